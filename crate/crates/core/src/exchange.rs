//! Binary tensor exchange format.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "XAMT"
//! 4       4           version (u32 LE, = 1)
//! 8       4           dtype tag (u32 LE, 1 = f32)
//! 12      4           rank (u32 LE, 1..=8)
//! 16      4 * rank    dims (u32 LE each, all > 0)
//! ...     4 * prod    payload, f32 LE, row-major
//! ```
//!
//! Attention maps are stored as `[P, P, N]` (token index fastest), latents as
//! `[C, H, W]` and masks as `[P, P]` with values 0.0 / 1.0.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AttentionMaps, BinaryGrid, Grid, LatentGrid};

pub const MAGIC: [u8; 4] = *b"XAMT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const MAX_RANK: usize = 8;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeTensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| fmt_err(format!("truncated at byte {at}")))
}

impl ExchangeTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(fmt_err(format!("rank {} outside 1..={MAX_RANK}", dims.len())));
        }
        if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(fmt_err(format!("dims {dims:?} must be positive u32 values")));
        }
        let count = element_count(&dims)?;
        if count != data.len() {
            return Err(fmt_err(format!(
                "dims {dims:?} need {count} values, got {}",
                data.len()
            )));
        }
        Ok(ExchangeTensor { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a complete buffer; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(fmt_err(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = read_u32(bytes, 4)?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let dtype = read_u32(bytes, 8)?;
        if dtype != DTYPE_F32 {
            return Err(fmt_err(format!("unsupported dtype tag {dtype}")));
        }
        let rank = read_u32(bytes, 12)? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(fmt_err(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let dims = (0..rank)
            .map(|i| read_u32(bytes, HEADER_LEN + 4 * i).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims.contains(&0) {
            return Err(fmt_err(format!("zero extent in dims {dims:?}")));
        }
        let count = element_count(&dims)?;
        let start = HEADER_LEN + 4 * rank;
        let payload = &bytes[start..];
        let expected = count
            .checked_mul(4)
            .ok_or_else(|| fmt_err("payload size overflows"))?;
        if payload.len() != expected {
            return Err(fmt_err(format!(
                "payload is {} bytes, dims {dims:?} need {expected}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(ExchangeTensor { dims, data })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    fn widened(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn from_attention(maps: &AttentionMaps) -> Self {
        Self::from_token_grids(maps.maps())
    }

    /// `[P, P, N]` tensor of arbitrary per-token grids (gradients, for instance),
    /// token index fastest. All grids must share one side.
    pub fn from_token_grids(grids: &[Grid]) -> Self {
        let p = grids.first().map_or(0, Grid::side);
        let mut data = Vec::with_capacity(p * p * grids.len());
        for cell in 0..p * p {
            data.extend(grids.iter().map(|g| g.as_slice()[cell] as f32));
        }
        ExchangeTensor {
            dims: vec![p, p, grids.len()],
            data,
        }
    }

    pub fn to_attention(&self) -> Result<AttentionMaps> {
        match self.dims[..] {
            [p, q, n] if p == q => {
                AttentionMaps::from_interleaved(p, n, &self.widened()).map_err(|e| match e {
                    Error::Dimension(m) | Error::Numeric(m) => fmt_err(format!("attention tensor: {m}")),
                    other => other,
                })
            }
            _ => Err(fmt_err(format!(
                "attention tensor must be [P, P, N], got {:?}",
                self.dims
            ))),
        }
    }

    pub fn from_latent(z: &LatentGrid) -> Self {
        ExchangeTensor {
            dims: vec![z.channels(), z.height(), z.width()],
            data: z.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_latent(&self) -> Result<LatentGrid> {
        match self.dims[..] {
            [c, h, w] => LatentGrid::new(c, h, w, self.widened())
                .map_err(|e| fmt_err(format!("latent tensor: {e}"))),
            _ => Err(fmt_err(format!("latent tensor must be [C, H, W], got {:?}", self.dims))),
        }
    }

    pub fn from_mask(m: &BinaryGrid) -> Self {
        ExchangeTensor {
            dims: vec![m.side(), m.side()],
            data: m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Rank-2 square tensor holding only 0.0 and 1.0.
    pub fn to_mask(&self) -> Result<BinaryGrid> {
        let side = self.square_side()?;
        let bits = self
            .data
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(fmt_err(format!("mask value {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        BinaryGrid::from_bits(side, bits)
    }

    pub fn from_grid(g: &Grid) -> Self {
        ExchangeTensor {
            dims: vec![g.side(), g.side()],
            data: g.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_grid(&self) -> Result<Grid> {
        let side = self.square_side()?;
        Grid::from_vec(side, self.widened())
    }

    fn square_side(&self) -> Result<usize> {
        match self.dims[..] {
            [p, q] if p == q => Ok(p),
            _ => Err(fmt_err(format!("expected a square [P, P] tensor, got {:?}", self.dims))),
        }
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (isize::MAX as usize) / 4)
        .ok_or_else(|| fmt_err(format!("element count of {dims:?} overflows")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_2x2_layout() {
        let t = ExchangeTensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 16 + 8 + 16);
        assert_eq!(&bytes[..4], b"XAMT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(ExchangeTensor::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn rejects_malformed_headers() {
        let good = ExchangeTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().encode();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'Y';
        assert!(ExchangeTensor::decode(&bad_magic).is_err());
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(ExchangeTensor::decode(&bad_version).is_err());
        let mut bad_dtype = good.clone();
        bad_dtype[8] = 7;
        assert!(ExchangeTensor::decode(&bad_dtype).is_err());
        let mut bad_rank = good.clone();
        bad_rank[12] = 9;
        assert!(ExchangeTensor::decode(&bad_rank).is_err());
        assert!(ExchangeTensor::decode(&good[..good.len() - 1]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(ExchangeTensor::decode(&trailing).is_err());
        assert!(ExchangeTensor::decode(&good[..10]).is_err());
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"XAMT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(ExchangeTensor::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn attention_conversion_checks_shape() {
        let t = ExchangeTensor::new(vec![2, 3, 1], vec![0.0; 6]).unwrap();
        assert!(t.to_attention().is_err());
        let t = ExchangeTensor::new(vec![2, 2, 1], vec![0.0, -1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(t.to_attention(), Err(Error::Format(_))));
    }

    #[test]
    fn mask_conversion_rejects_fractions() {
        let t = ExchangeTensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.0]).unwrap();
        assert!(t.to_mask().is_err());
        let m = BinaryGrid::from_strs(&["10", "01"]);
        assert_eq!(ExchangeTensor::from_mask(&m).to_mask().unwrap(), m);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let count: usize = dims.iter().product();
            let data: Vec<f32> = (0..count)
                .map(|i| f32::from_bits((seed as u32).wrapping_add(i as u32).wrapping_mul(2654435761)))
                .collect();
            let t = ExchangeTensor::new(dims, data).unwrap();
            let back = ExchangeTensor::decode(&t.encode()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..96)) {
            let _ = ExchangeTensor::decode(&bytes);
        }
    }
}
