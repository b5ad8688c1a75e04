//! Grid types shared by every phase and the elementary operations on them.
//!
//! All arithmetic is carried out in `f64`; the exchange format narrows to
//! `f32` only at the file boundary.

use std::fmt;

use crate::error::{Error, Result};

/// A dense square grid of reals, row-major.
#[derive(Clone, PartialEq)]
pub struct Grid {
    side: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(side: usize) -> Self {
        Self::filled(side, 0.0)
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Grid {
            side,
            data: vec![value; side * side],
        }
    }

    pub fn from_vec(side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 {
            return Err(Error::dim("grid side must be at least 1"));
        }
        if data.len() != side * side {
            return Err(Error::dim(format!(
                "grid of side {side} needs {} values, got {}",
                side * side,
                data.len()
            )));
        }
        Ok(Grid { side, data })
    }

    /// Builds a grid from equal-length rows. Panics on ragged or non-square input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let side = rows.len();
        let mut data = Vec::with_capacity(side * side);
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), side, "grid rows must form a square");
            data.extend_from_slice(row);
        }
        Grid { side, data }
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                data.push(f(r, c));
            }
        }
        Grid { side, data }
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.side + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise product with the complement of `mask` (cells under the mask become 0).
    pub fn masked_out(&self, mask: &BinaryGrid) -> Grid {
        debug_assert_eq!(self.side, mask.side());
        let data = self
            .data
            .iter()
            .zip(mask.bits())
            .map(|(&v, &b)| if b { 0.0 } else { v })
            .collect();
        Grid {
            side: self.side,
            data,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Grid, factor: f64) {
        debug_assert_eq!(self.side, other.side);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Grid({}x{}) [", self.side, self.side)?;
        for r in 0..self.side {
            let row: Vec<String> = (0..self.side)
                .map(|c| format!("{:.4}", self.get(r, c)))
                .collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        write!(f, "]")
    }
}

/// Sum over all positions of the elementwise product.
pub fn frobenius_inner(a: &Grid, b: &Grid) -> Result<f64> {
    if a.side != b.side {
        return Err(Error::dim(format!(
            "inner product of {0}x{0} and {1}x{1} grids",
            a.side, b.side
        )));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// 3x3 grayscale dilation (local max); the window is clipped at the borders.
pub fn grayscale_dilate3x3(a: &Grid) -> Grid {
    dilate_with_sources(a).0
}

/// Dilation plus, for every output cell, the flat index of the input cell that
/// supplied the maximum (first occurrence in row-major order within the window).
pub(crate) fn dilate_with_sources(a: &Grid) -> (Grid, Vec<usize>) {
    let n = a.side;
    let mut out = Grid::zeros(n);
    let mut sources = vec![0usize; n * n];
    for r in 0..n {
        let r0 = r.saturating_sub(1);
        let r1 = (r + 1).min(n - 1);
        for c in 0..n {
            let c0 = c.saturating_sub(1);
            let c1 = (c + 1).min(n - 1);
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = r * n + c;
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    let v = a.get(rr, cc);
                    if v > best {
                        best = v;
                        best_idx = rr * n + cc;
                    }
                }
            }
            out.set(r, c, best);
            sources[r * n + c] = best_idx;
        }
    }
    (out, sources)
}

/// Position of the maximum; ties go to the first occurrence in row-major order.
pub fn spatial_argmax(a: &Grid) -> (usize, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (i, &v) in a.data.iter().enumerate() {
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    (best_idx / a.side, best_idx % a.side)
}

/// Optional preprocessing applied to imported attention snapshots.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    /// Divide every location by its sum over tokens.
    pub normalize_tokens: bool,
    /// 3x3 Gaussian blur with sigma 0.5, renormalized over the in-grid window.
    pub smooth: bool,
}

const SMOOTH_SIGMA: f64 = 0.5;

/// Per-token cross-attention maps for a `side x side` patch grid.
#[derive(Clone, PartialEq)]
pub struct AttentionMaps {
    side: usize,
    maps: Vec<Grid>,
}

impl AttentionMaps {
    /// Validates shape (side >= 2, at least one token) and entries (finite, nonnegative).
    pub fn new(maps: Vec<Grid>) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::dim("attention maps need at least one token"));
        };
        let side = first.side();
        if side < 2 {
            return Err(Error::dim(format!("attention grid side {side} < 2")));
        }
        for (token, m) in maps.iter().enumerate() {
            if m.side() != side {
                return Err(Error::dim(format!(
                    "token {token} map has side {}, expected {side}",
                    m.side()
                )));
            }
            for &v in m.as_slice() {
                if v.is_nan() || v.is_infinite() {
                    return Err(Error::Numeric(format!(
                        "non-finite attention value {v} for token {token}"
                    )));
                }
                if v < 0.0 {
                    return Err(Error::Numeric(format!(
                        "negative attention value {v} for token {token}"
                    )));
                }
            }
        }
        Ok(AttentionMaps { side, maps })
    }

    /// Builds from a `side x side x tokens` buffer with the token index fastest.
    pub fn from_interleaved(side: usize, tokens: usize, data: &[f64]) -> Result<Self> {
        if data.len() != side * side * tokens {
            return Err(Error::dim(format!(
                "expected {side}x{side}x{tokens} = {} values, got {}",
                side * side * tokens,
                data.len()
            )));
        }
        let maps = (0..tokens)
            .map(|n| Grid::from_fn(side, |r, c| data[(r * side + c) * tokens + n]))
            .collect();
        Self::new(maps)
    }

    /// Inverse of [`AttentionMaps::from_interleaved`].
    pub fn to_interleaved(&self) -> Vec<f64> {
        interleave(&self.maps)
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn tokens(&self) -> usize {
        self.maps.len()
    }

    /// The `side x side` slice of token `s`.
    #[inline]
    pub fn token(&self, s: usize) -> &Grid {
        &self.maps[s]
    }

    pub fn maps(&self) -> &[Grid] {
        &self.maps
    }

    pub fn preprocess(&self, opts: Preprocess) -> AttentionMaps {
        let mut maps = self.maps.clone();
        if opts.normalize_tokens {
            for i in 0..self.side * self.side {
                let total: f64 = maps.iter().map(|m| m.as_slice()[i]).sum();
                if total > 0.0 {
                    for m in maps.iter_mut() {
                        m.as_mut_slice()[i] /= total;
                    }
                }
            }
        }
        if opts.smooth {
            maps = maps.iter().map(gaussian_smooth3x3).collect();
        }
        AttentionMaps {
            side: self.side,
            maps,
        }
    }
}

impl fmt::Debug for AttentionMaps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttentionMaps")
            .field("side", &self.side)
            .field("tokens", &self.maps.len())
            .finish()
    }
}

pub(crate) fn interleave(maps: &[Grid]) -> Vec<f64> {
    let tokens = maps.len();
    let cells = maps.first().map_or(0, |m| m.side() * m.side());
    let mut out = vec![0.0; cells * tokens];
    for (n, m) in maps.iter().enumerate() {
        for (i, &v) in m.as_slice().iter().enumerate() {
            out[i * tokens + n] = v;
        }
    }
    out
}

fn gaussian_smooth3x3(a: &Grid) -> Grid {
    let w = |d: isize| (-((d * d) as f64) / (2.0 * SMOOTH_SIGMA * SMOOTH_SIGMA)).exp();
    let n = a.side() as isize;
    Grid::from_fn(a.side(), |r, c| {
        let (mut acc, mut norm) = (0.0, 0.0);
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= n || cc >= n {
                    continue;
                }
                let k = w(dr) * w(dc);
                acc += k * a.get(rr as usize, cc as usize);
                norm += k;
            }
        }
        acc / norm
    })
}

/// The prompt tokens treated as subjects, plus an optional background token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectSet {
    tokens: Vec<usize>,
    background: Option<usize>,
}

impl SubjectSet {
    pub fn new(tokens: Vec<usize>, background: Option<usize>) -> Result<Self> {
        for (i, t) in tokens.iter().enumerate() {
            if tokens[..i].contains(t) {
                return Err(Error::arg(format!("duplicate subject token {t}")));
            }
        }
        if let Some(b) = background {
            if tokens.contains(&b) {
                return Err(Error::arg(format!(
                    "background token {b} is also a subject token"
                )));
            }
        }
        Ok(SubjectSet { tokens, background })
    }

    /// Checks every index against the token count of the attention maps.
    pub fn check_tokens(&self, token_count: usize) -> Result<()> {
        for &t in self.tokens.iter().chain(self.background.iter()) {
            if t >= token_count {
                return Err(Error::arg(format!(
                    "token index {t} out of range for {token_count} tokens"
                )));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn background(&self) -> Option<usize> {
        self.background
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A square grid of bits.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryGrid {
    side: usize,
    bits: Vec<bool>,
}

impl BinaryGrid {
    pub fn empty(side: usize) -> Self {
        BinaryGrid {
            side,
            bits: vec![false; side * side],
        }
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                bits.push(f(r, c));
            }
        }
        BinaryGrid { side, bits }
    }

    pub fn from_bits(side: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != side * side {
            return Err(Error::dim(format!(
                "binary grid of side {side} needs {} bits, got {}",
                side * side,
                bits.len()
            )));
        }
        Ok(BinaryGrid { side, bits })
    }

    /// Parses rows such as `"0110"`; any character other than `'0'`, `'.'` or space counts as set.
    pub fn from_strs(rows: &[&str]) -> Self {
        let side = rows.len();
        let mut bits = Vec::with_capacity(side * side);
        for row in rows {
            let before = bits.len();
            bits.extend(row.chars().map(|ch| !matches!(ch, '0' | '.' | ' ')));
            assert_eq!(bits.len() - before, side, "mask rows must form a square");
        }
        BinaryGrid { side, bits }
    }

    /// Axis-aligned rectangle `rows x cols` starting at (`top`, `left`), clipped to the grid.
    pub fn rectangle(side: usize, top: isize, left: isize, rows: usize, cols: usize) -> Self {
        let bottom = top + rows as isize;
        let right = left + cols as isize;
        Self::from_fn(side, |r, c| {
            let (r, c) = (r as isize, c as isize);
            r >= top && r < bottom && c >= left && c < right
        })
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.side + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.side + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> BinaryGrid {
        BinaryGrid {
            side: self.side,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn union(&self, other: &BinaryGrid) -> BinaryGrid {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryGrid) -> BinaryGrid {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn intersection_area(&self, other: &BinaryGrid) -> usize {
        debug_assert_eq!(self.side, other.side);
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn is_subset_of(&self, other: &BinaryGrid) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Set positions in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let side = self.side;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i / side, i % side))
    }

    /// Inclusive bounding box `(row_min, row_max, col_min, col_max)` of the set bits.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut it = self.iter_set();
        let (r, c) = it.next()?;
        let init = (r, r, c, c);
        Some(it.fold(init, |(r0, r1, c0, c1), (r, c)| {
            (r0.min(r), r1.max(r), c0.min(c), c1.max(c))
        }))
    }

    /// Translates every set bit by (`dy`, `dx`); `None` if any bit would leave the grid.
    pub fn translate(&self, dy: isize, dx: isize) -> Option<BinaryGrid> {
        let n = self.side as isize;
        let mut out = BinaryGrid::empty(self.side);
        for (r, c) in self.iter_set() {
            let (rr, cc) = (r as isize + dy, c as isize + dx);
            if rr < 0 || cc < 0 || rr >= n || cc >= n {
                return None;
            }
            out.set(rr as usize, cc as usize, true);
        }
        Some(out)
    }

    /// 0/1 real grid.
    pub fn to_grid(&self) -> Grid {
        Grid {
            side: self.side,
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    fn zip_with(&self, other: &BinaryGrid, f: impl Fn(bool, bool) -> bool) -> BinaryGrid {
        debug_assert_eq!(self.side, other.side);
        BinaryGrid {
            side: self.side,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

impl fmt::Debug for BinaryGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryGrid({}x{}, area {}) [", self.side, self.side, self.area())?;
        for r in 0..self.side {
            let row: String = (0..self.side)
                .map(|c| if self.get(r, c) { '#' } else { '.' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        write!(f, "]")
    }
}

/// Latent map, `channels x height x width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Default latent channel count.
pub const LATENT_CHANNELS: usize = 4;

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim("latent extents must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "latent {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite latent value {v}")));
        }
        Ok(LatentGrid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        LatentGrid {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn index(&self, channel: usize, y: usize, x: usize) -> usize {
        (channel * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(channel, y, x)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, value: f64) {
        let i = self.index(channel, y, x);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[channel * plane..(channel + 1) * plane]
    }

    pub fn channel_mut(&mut self, channel: usize) -> &mut [f64] {
        let plane = self.height * self.width;
        &mut self.data[channel * plane..(channel + 1) * plane]
    }

    /// Per-channel (mean, population variance).
    pub fn channel_moments(&self) -> Vec<(f64, f64)> {
        (0..self.channels)
            .map(|c| {
                let v = self.channel(c);
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                (mean, var)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
