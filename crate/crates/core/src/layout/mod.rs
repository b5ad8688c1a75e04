//! One-shot layout rearrangement.
//!
//! Attention maps are thresholded into per-subject masks, the two subjects
//! whose masks overlap the rest the most are moved (never upward) to the
//! translation that minimizes the total overlap, and the latent is rewritten
//! so its content follows the moved masks.

mod gamma;
mod migrate;
mod shift;

pub use gamma::{adapt_gamma, threshold_mask, GammaConfig, GAMMA_MAX, GAMMA_MIN};
pub use migrate::{migrate_latent, ImputationConfig, ImputationMode, MigrationMap};
pub use shift::{mover_ratio, search_shift, search_shift_with_cost, select_movers, Shift};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{AttentionMaps, BinaryGrid, SubjectSet};

/// Ratio between latent and attention resolution.
pub const LATENT_SCALE: usize = 4;

/// A subject selected for relocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mover {
    /// Position within the subject set.
    pub subject: usize,
    pub token: usize,
    pub ratio: f64,
    pub shift: Shift,
}

/// Result of the rearrangement planning step. Mask vectors are indexed like
/// `SubjectSet::tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutPlan {
    pub tokens: Vec<usize>,
    pub gammas: Vec<f64>,
    pub initial_masks: Vec<BinaryGrid>,
    pub final_masks: Vec<BinaryGrid>,
    /// In the order they were placed.
    pub movers: Vec<Mover>,
    pub overlap_before: usize,
    pub overlap_after: usize,
}

impl LayoutPlan {
    pub fn is_identity(&self) -> bool {
        self.movers.iter().all(|m| m.shift.is_zero())
    }

    pub fn side(&self) -> usize {
        self.initial_masks.first().map_or(0, BinaryGrid::side)
    }
}

/// Sum of intersection areas over unordered mask pairs.
pub fn total_pairwise_overlap(masks: &[BinaryGrid]) -> usize {
    let mut total = 0;
    for i in 0..masks.len() {
        for j in (i + 1)..masks.len() {
            total += masks[i].intersection_area(&masks[j]);
        }
    }
    total
}

/// Threshold every subject map with its adapted `gamma`.
pub fn initial_masks(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    gcfg: &GammaConfig,
) -> Result<(Vec<f64>, Vec<BinaryGrid>)> {
    subjects.check_tokens(maps.tokens())?;
    let mut gammas = Vec::with_capacity(subjects.len());
    let mut masks = Vec::with_capacity(subjects.len());
    for &s in subjects.tokens() {
        let a = maps.token(s);
        let tag = |e: Error| match e {
            Error::DegenerateMap(msg) => Error::DegenerateMap(format!("token {s}: {msg}")),
            other => other,
        };
        let g = adapt_gamma(a, gcfg, subjects.len()).map_err(tag)?;
        masks.push(threshold_mask(a, g).map_err(tag)?);
        gammas.push(g);
    }
    Ok((gammas, masks))
}

pub fn plan_layout(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    gcfg: &GammaConfig,
) -> Result<LayoutPlan> {
    let (gammas, initial) = initial_masks(maps, subjects, gcfg)?;
    let overlap_before = total_pairwise_overlap(&initial);
    let mut final_masks = initial.clone();
    let mut movers = Vec::new();

    for idx in select_movers(&initial)? {
        let ratio = mover_ratio(&initial, idx)?;
        let others: Vec<BinaryGrid> = final_masks
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != idx)
            .map(|(_, m)| m.clone())
            .collect();
        let shift = search_shift(&initial[idx], &others)?;
        final_masks[idx] = initial[idx]
            .translate(shift.dy, shift.dx)
            .expect("search_shift only returns in-grid shifts");
        log::debug!(
            "mover token {} ratio {ratio:.4} shift ({}, {})",
            subjects.tokens()[idx],
            shift.dy,
            shift.dx
        );
        movers.push(Mover {
            subject: idx,
            token: subjects.tokens()[idx],
            ratio,
            shift,
        });
    }

    let overlap_after = total_pairwise_overlap(&final_masks);
    debug_assert!(overlap_after <= overlap_before);
    Ok(LayoutPlan {
        tokens: subjects.tokens().to_vec(),
        gammas,
        initial_masks: initial,
        final_masks,
        movers,
        overlap_before,
        overlap_after,
    })
}

/// Nearest-neighbor expansion: each bit becomes a `factor x factor` block.
pub fn upscale_mask(mask: &BinaryGrid, factor: usize) -> Result<BinaryGrid> {
    if factor == 0 {
        return Err(Error::arg("upscale factor must be at least 1"));
    }
    Ok(BinaryGrid::from_fn(mask.side() * factor, |r, c| {
        mask.get(r / factor, c / factor)
    }))
}
