use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BinaryGrid, Grid};

/// Lower end of the admissible threshold range.
pub const GAMMA_MIN: f64 = 0.2;
/// Upper end (exclusive) of the admissible threshold range.
pub const GAMMA_MAX: f64 = 0.8;

/// Adaptive threshold settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaConfig {
    pub gamma0: f64,
    pub step: f64,
    /// Target minimum mask area in patches; `None` means `ceil(side^2 / (4 |S|))`.
    pub area_lo: Option<usize>,
    /// Target maximum mask area in patches; `None` means `floor(2 side^2 / |S|)`, capped at `side^2`.
    pub area_hi: Option<usize>,
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig {
            gamma0: GAMMA_MIN,
            step: 0.05,
            area_lo: None,
            area_hi: None,
        }
    }
}

impl GammaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(GAMMA_MIN..GAMMA_MAX).contains(&self.gamma0) {
            return Err(Error::Config(format!(
                "gamma0 {} outside [{GAMMA_MIN}, {GAMMA_MAX})",
                self.gamma0
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("gamma step {} must be > 0", self.step)));
        }
        Ok(())
    }

    /// Resolved `(area_lo, area_hi)` for a grid side and subject count.
    pub fn area_bounds(&self, side: usize, subject_count: usize) -> Result<(usize, usize)> {
        let cells = side * side;
        let n = subject_count.max(1);
        let lo = self.area_lo.unwrap_or_else(|| cells.div_ceil(4 * n));
        let hi = self.area_hi.unwrap_or_else(|| (2 * cells / n).min(cells));
        if lo == 0 || lo >= hi || hi > cells {
            return Err(Error::Config(format!(
                "mask area bounds [{lo}, {hi}] invalid for a {side}x{side} grid"
            )));
        }
        Ok((lo, hi))
    }
}

/// Bits where `a > gamma * max(a)`.
pub fn threshold_mask(a: &Grid, gamma: f64) -> Result<BinaryGrid> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::arg(format!("gamma {gamma} outside (0, 1)")));
    }
    let peak = a.max();
    if !(peak > 0.0) {
        return Err(Error::DegenerateMap(format!("maximum {peak} is not positive")));
    }
    let cut = gamma * peak;
    let side = a.side();
    let bits = a.as_slice().iter().map(|&v| v > cut).collect();
    BinaryGrid::from_bits(side, bits)
}

/// Threshold on the step lattice `gamma0 + k * step`.
fn lattice(cfg: &GammaConfig, k: i64) -> f64 {
    cfg.gamma0 + k as f64 * cfg.step
}

const LATTICE_EPS: f64 = 1e-9;

/// Walks the threshold lattice until the mask area lands in the target band.
///
/// Raising `gamma` shrinks the mask, so the walk moves in a single direction
/// chosen by the area at `gamma0`. It stops at the first lattice value whose
/// area is inside the band, at the last lattice value strictly inside the
/// admissible range, or at the first value that steps past the band (the band
/// is then unattainable on this lattice).
pub fn adapt_gamma(a: &Grid, cfg: &GammaConfig, subject_count: usize) -> Result<f64> {
    cfg.validate()?;
    let (lo, hi) = cfg.area_bounds(a.side(), subject_count)?;
    let area = |g: f64| threshold_mask(a, g).map(|m| m.area());

    let start = area(cfg.gamma0)?;
    if (lo..=hi).contains(&start) {
        return Ok(cfg.gamma0);
    }
    let dir: i64 = if start > hi { 1 } else { -1 };
    let mut k = 0i64;
    loop {
        let next = lattice(cfg, k + dir);
        let admissible = if dir > 0 {
            next < GAMMA_MAX - LATTICE_EPS
        } else {
            next >= GAMMA_MIN - LATTICE_EPS
        };
        if !admissible {
            return Ok(lattice(cfg, k));
        }
        k += dir;
        let ar = area(next)?;
        let crossed = if dir > 0 { ar <= hi } else { ar >= lo };
        if crossed {
            return Ok(next);
        }
    }
}
