use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{upscale_mask, LayoutPlan, LATENT_SCALE};
use crate::error::{Error, Result};
use crate::tensor::{AttentionMaps, BinaryGrid, LatentGrid, SubjectSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputationMode {
    /// i.i.d. standard normal per channel.
    RandomNormal,
    /// Cyclic copies of the latent at the highest background-attention locations.
    BackgroundCopy,
}

/// How vacated latent cells are refilled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputationConfig {
    /// `None` picks background copy when a background token exists, random normal otherwise.
    pub mode: Option<ImputationMode>,
    /// Number of latent cells sampled for background copy.
    pub k: usize,
    pub seed: u64,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        ImputationConfig {
            mode: None,
            k: 16,
            seed: 0,
        }
    }
}

impl ImputationConfig {
    pub fn resolve(&self, subjects: &SubjectSet) -> Result<ImputationMode> {
        let mode = self.mode.unwrap_or(if subjects.background().is_some() {
            ImputationMode::BackgroundCopy
        } else {
            ImputationMode::RandomNormal
        });
        if mode == ImputationMode::BackgroundCopy {
            if subjects.background().is_none() {
                return Err(Error::Config(
                    "background-copy imputation needs a background token".into(),
                ));
            }
            if self.k == 0 {
                return Err(Error::Config("background-copy imputation needs k >= 1".into()));
            }
        }
        Ok(mode)
    }
}

/// Latent-resolution bookkeeping of a migration.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationMap {
    pub sources: BinaryGrid,
    pub destinations: BinaryGrid,
    /// Sources not covered by any destination.
    pub vacated: BinaryGrid,
    /// Background cells copied into vacated cells, in cycling order (empty for random normal).
    pub background_cells: Vec<(usize, usize)>,
    pub mode: ImputationMode,
}

/// Moves the latent content under each mover's upscaled initial mask by
/// `4 * shift`, then imputes the cells left vacant.
///
/// Content is always read from the input latent; later movers overwrite earlier
/// ones where destinations collide.
pub fn migrate_latent(
    z: &LatentGrid,
    plan: &LayoutPlan,
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    icfg: &ImputationConfig,
) -> Result<(LatentGrid, MigrationMap)> {
    let side = maps.side();
    let size = side * LATENT_SCALE;
    if z.height() != size || z.width() != size {
        return Err(Error::dim(format!(
            "latent is {}x{}, expected {size}x{size} for a {side}x{side} attention grid",
            z.height(),
            z.width()
        )));
    }
    if plan.side() != side {
        return Err(Error::dim(format!(
            "plan grid side {} does not match attention side {side}",
            plan.side()
        )));
    }
    let mode = icfg.resolve(subjects)?;

    let mut out = z.clone();
    let mut sources = BinaryGrid::empty(size);
    let mut destinations = BinaryGrid::empty(size);
    let scale = LATENT_SCALE as isize;

    for mover in plan.movers.iter().filter(|m| !m.shift.is_zero()) {
        let src = upscale_mask(&plan.initial_masks[mover.subject], LATENT_SCALE)?;
        let (dy, dx) = (mover.shift.dy * scale, mover.shift.dx * scale);
        for (y, x) in src.iter_set() {
            let (ty, tx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
            for c in 0..z.channels() {
                out.set(c, ty, tx, z.get(c, y, x));
            }
            sources.set(y, x, true);
            destinations.set(ty, tx, true);
        }
    }

    let vacated = sources.intersection(&destinations.complement());
    let mut background_cells = Vec::new();

    match mode {
        ImputationMode::RandomNormal => fill_normal(&mut out, &vacated, icfg.seed),
        ImputationMode::BackgroundCopy => {
            let bkg = subjects.background().expect("resolved mode checked the background");
            let touched = sources.union(&destinations);
            background_cells = top_background_cells(maps, bkg, &touched, icfg.k);
            if background_cells.is_empty() && !vacated.is_empty() {
                log::warn!("no untouched background cells; imputing vacated cells from N(0, 1)");
                fill_normal(&mut out, &vacated, icfg.seed);
            } else {
                for (i, (y, x)) in vacated.iter_set().enumerate() {
                    let (sy, sx) = background_cells[i % background_cells.len()];
                    for c in 0..z.channels() {
                        out.set(c, y, x, z.get(c, sy, sx));
                    }
                }
            }
        }
    }

    Ok((
        out,
        MigrationMap {
            sources,
            destinations,
            vacated,
            background_cells,
            mode,
        },
    ))
}

/// Vacated cells in row-major order, channels innermost.
fn fill_normal(out: &mut LatentGrid, vacated: &BinaryGrid, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (y, x) in vacated.iter_set() {
        for c in 0..out.channels() {
            let v: f64 = StandardNormal.sample(&mut rng);
            out.set(c, y, x, v);
        }
    }
}

/// Latent cells ranked by the nearest-neighbor upscaled background attention
/// (descending, ties in row-major order), skipping cells touched by the move.
fn top_background_cells(
    maps: &AttentionMaps,
    background: usize,
    touched: &BinaryGrid,
    k: usize,
) -> Vec<(usize, usize)> {
    let a = maps.token(background);
    let size = touched.side();
    let mut cells: Vec<(usize, usize, f64)> = (0..size * size)
        .map(|i| (i / size, i % size))
        .filter(|&(y, x)| !touched.get(y, x))
        .map(|(y, x)| (y, x, a.get(y / LATENT_SCALE, x / LATENT_SCALE)))
        .collect();
    // stable sort keeps row-major order among equal attention values
    cells.sort_by(|p, q| q.2.total_cmp(&p.2));
    cells.truncate(k);
    cells.into_iter().map(|(y, x, _)| (y, x)).collect()
}
