//! A differentiable stand-in for cross-attention.
//!
//! Each non-overlapping `4 x 4` latent block is one patch. Its logit for token
//! `n` is the dot product of the flattened block (all channels) with a
//! per-token key, and the attention over tokens is the softmax of the logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layout::LATENT_SCALE;
use crate::tensor::{AttentionMaps, Grid, LatentGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyAttentionModel {
    channels: usize,
    keys: Vec<Vec<f64>>,
}

/// Default standard deviation of the key entries.
pub const DEFAULT_KEY_SCALE: f64 = 0.25;

impl ToyAttentionModel {
    /// Keys drawn i.i.d. from `N(0, key_scale^2)`.
    pub fn seeded(tokens: usize, channels: usize, key_scale: f64, seed: u64) -> Result<Self> {
        if tokens == 0 || channels == 0 {
            return Err(Error::arg("toy model needs at least one token and one channel"));
        }
        let normal = Normal::new(0.0, key_scale)
            .map_err(|e| Error::Config(format!("key scale {key_scale}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = channels * LATENT_SCALE * LATENT_SCALE;
        let keys = (0..tokens)
            .map(|_| (0..len).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Ok(ToyAttentionModel { channels, keys })
    }

    pub fn from_keys(channels: usize, keys: Vec<Vec<f64>>) -> Result<Self> {
        let len = channels * LATENT_SCALE * LATENT_SCALE;
        if keys.is_empty() || keys.iter().any(|k| k.len() != len) {
            return Err(Error::dim(format!("every key must have length {len}")));
        }
        Ok(ToyAttentionModel { channels, keys })
    }

    pub fn tokens(&self) -> usize {
        self.keys.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn side_for(&self, z: &LatentGrid) -> Result<usize> {
        if z.channels() != self.channels {
            return Err(Error::dim(format!(
                "latent has {} channels, model expects {}",
                z.channels(),
                self.channels
            )));
        }
        if z.height() != z.width() || !z.height().is_multiple_of(LATENT_SCALE) {
            return Err(Error::dim(format!(
                "latent {}x{} is not a square multiple of {LATENT_SCALE}",
                z.height(),
                z.width()
            )));
        }
        Ok(z.height() / LATENT_SCALE)
    }

    fn logit(&self, z: &LatentGrid, key: &[f64], pr: usize, pc: usize) -> f64 {
        let mut acc = 0.0;
        let mut k = 0;
        for c in 0..self.channels {
            for dy in 0..LATENT_SCALE {
                for dx in 0..LATENT_SCALE {
                    acc += key[k] * z.get(c, pr * LATENT_SCALE + dy, pc * LATENT_SCALE + dx);
                    k += 1;
                }
            }
        }
        acc
    }

    /// Attention maps for latent `z`.
    pub fn attention(&self, z: &LatentGrid) -> Result<AttentionMaps> {
        let side = self.side_for(z)?;
        let n = self.tokens();
        let mut maps = vec![Grid::zeros(side); n];
        let mut logits = vec![0.0; n];
        for pr in 0..side {
            for pc in 0..side {
                for (t, key) in self.keys.iter().enumerate() {
                    logits[t] = self.logit(z, key, pr, pc);
                }
                let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - peak).exp();
                    total += *l;
                }
                for (t, l) in logits.iter().enumerate() {
                    maps[t].set(pr, pc, l / total);
                }
            }
        }
        AttentionMaps::new(maps)
    }

    /// Chains `dL/dA` (one grid per token) through the softmax and the logits
    /// to `dL/dz`. `maps` must be `self.attention(z)`.
    pub fn backward(&self, z: &LatentGrid, maps: &AttentionMaps, grad: &[Grid]) -> Result<LatentGrid> {
        let side = self.side_for(z)?;
        if maps.side() != side || maps.tokens() != self.tokens() || grad.len() != self.tokens() {
            return Err(Error::dim("attention gradient does not match the model"));
        }
        let mut out = LatentGrid::zeros(z.channels(), z.height(), z.width());
        let n = self.tokens();
        let mut dlogit = vec![0.0; n];
        for pr in 0..side {
            for pc in 0..side {
                // softmax jacobian: dl_n = a_n (g_n - sum_m a_m g_m)
                let mean: f64 = (0..n)
                    .map(|t| maps.token(t).get(pr, pc) * grad[t].get(pr, pc))
                    .sum();
                for (t, d) in dlogit.iter_mut().enumerate() {
                    *d = maps.token(t).get(pr, pc) * (grad[t].get(pr, pc) - mean);
                }
                let mut k = 0;
                for c in 0..self.channels {
                    for dy in 0..LATENT_SCALE {
                        for dx in 0..LATENT_SCALE {
                            let (y, x) = (pr * LATENT_SCALE + dy, pc * LATENT_SCALE + dx);
                            let g: f64 = self.keys.iter().zip(&dlogit).map(|(key, d)| key[k] * d).sum();
                            out.set(c, y, x, g);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Standard normal latent of shape `channels x size x size`.
pub fn sample_latent(channels: usize, size: usize, seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * size * size)
        .map(|_| rand_distr::StandardNormal.sample(&mut rng))
        .collect();
    LatentGrid::new(channels, size, size, data).expect("sampled latent is well formed")
}
