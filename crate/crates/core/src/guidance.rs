//! Three-phase guidance over a synthetic reverse-diffusion schedule.
//!
//! Steps run from `t = T` down to `t = 1`. The first `tau` steps descend the
//! excite-and-distinguish loss. At `t = T - tau` the layout is planned once,
//! the latent is migrated, and from then on the latent descends the
//! mask-following loss against the fixed final masks.
//!
//! The "restart" option re-standardizes every latent channel to the mean and
//! variance it had before migration. This is our reading of restarting the
//! diffusion statistics after pixel reallocation.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::excite::{loss_phase1, LossWeights, Phase1Loss};
use crate::follow::{loss_phase3, MaskSet, Phase3Loss};
use crate::layout::{migrate_latent, plan_layout, GammaConfig, ImputationConfig, LayoutPlan};
use crate::tensor::{AttentionMaps, BinaryGrid, Grid, LatentGrid, SubjectSet};
use crate::toy::ToyAttentionModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSchedule {
    pub total_steps: usize,
    pub tau: usize,
    pub iters_per_step: usize,
    pub alpha: f64,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        PhaseSchedule {
            total_steps: 50,
            tau: 15,
            iters_per_step: 1,
            alpha: 0.1,
        }
    }
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.tau && self.tau < self.total_steps) {
            return Err(Error::Config(format!(
                "need 0 < tau < T, got tau = {}, T = {}",
                self.tau, self.total_steps
            )));
        }
        if self.iters_per_step == 0 {
            return Err(Error::Config("iters_per_step must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// The step at which the layout is rearranged.
    pub fn rearrange_step(&self) -> usize {
        self.total_steps - self.tau
    }
}

/// Component switches for ablations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub enable_be: bool,
    pub enable_ol: bool,
    pub enable_norm: bool,
    pub enable_inside: bool,
    pub enable_fill: bool,
    pub enable_pixel_realloc: bool,
    pub enable_restart: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            enable_be: true,
            enable_ol: true,
            enable_norm: true,
            enable_inside: true,
            enable_fill: true,
            enable_pixel_realloc: true,
            enable_restart: true,
        }
    }
}

impl AblationFlags {
    pub fn all_off() -> Self {
        AblationFlags {
            enable_be: false,
            enable_ol: false,
            enable_norm: false,
            enable_inside: false,
            enable_fill: false,
            enable_pixel_realloc: false,
            enable_restart: false,
        }
    }

    /// Weights with every disabled term zeroed.
    pub fn apply(&self, w: &LossWeights) -> LossWeights {
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        LossWeights {
            lambda_be: on(self.enable_be, w.lambda_be),
            lambda_ol: on(self.enable_ol, w.lambda_ol),
            lambda_norm: on(self.enable_norm, w.lambda_norm),
            lambda_inside: on(self.enable_inside, w.lambda_inside),
            lambda_fill: on(self.enable_fill, w.lambda_fill),
            rect_side: w.rect_side,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GuidanceConfig {
    pub schedule: PhaseSchedule,
    pub flags: AblationFlags,
    pub weights: LossWeights,
    pub gamma: GammaConfig,
    pub imputation: ImputationConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Excite,
    Rearrange,
    Follow,
}

/// Unweighted first-phase components and the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExciteSummary {
    pub be: f64,
    pub ol_total: f64,
    pub norm_total: f64,
    pub total: f64,
}

impl From<&Phase1Loss> for ExciteSummary {
    fn from(l: &Phase1Loss) -> Self {
        ExciteSummary {
            be: l.be,
            ol_total: l.overlap.total,
            norm_total: l.norm.iter().sum(),
            total: l.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FollowSummary {
    pub inside: f64,
    pub fill: f64,
    pub total: f64,
}

impl From<&Phase3Loss> for FollowSummary {
    fn from(l: &Phase3Loss) -> Self {
        FollowSummary {
            inside: l.inside,
            fill: l.fill,
            total: l.total,
        }
    }
}

/// State of one diffusion step, measured before that step's latent updates
/// (after migration for the rearrange step).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excite: Option<ExciteSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub follow: Option<FollowSummary>,
    /// Peak attention per subject, indexed like `SubjectSet::tokens`.
    pub max_attention: Vec<f64>,
    /// Root mean square of the latent.
    pub latent_rms: f64,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "ser_masks")]
    pub masks: Option<Vec<BinaryGrid>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap_before: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap_after: Option<usize>,
}

fn ser_masks<S: Serializer>(masks: &Option<Vec<BinaryGrid>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Option<Vec<Vec<String>>> = masks.as_ref().map(|ms| ms.iter().map(mask_rows).collect());
    rows.serialize(s)
}

/// Rows of `'#'` (set) and `'.'` (clear).
pub fn mask_rows(m: &BinaryGrid) -> Vec<String> {
    (0..m.side())
        .map(|r| (0..m.side()).map(|c| if m.get(r, c) { '#' } else { '.' }).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTrace {
    /// One per step, from `t = T` down to `t = 1`.
    pub records: Vec<StepRecord>,
    pub plan: Option<LayoutPlan>,
    /// Mask-following loss right after the rearrangement, before any update.
    pub post_rearrange: Option<Phase3Loss>,
    /// Mask-following loss of the final latent.
    pub final_follow: Option<Phase3Loss>,
    pub final_latent: LatentGrid,
}

impl GuidanceTrace {
    /// One JSON object per step record, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn final_masks(&self) -> Option<&[BinaryGrid]> {
        self.plan.as_ref().map(|p| p.final_masks.as_slice())
    }
}

fn latent_rms(z: &LatentGrid) -> f64 {
    let s = z.as_slice();
    (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt()
}

fn peaks(maps: &AttentionMaps, subjects: &SubjectSet) -> Vec<f64> {
    subjects.tokens().iter().map(|&s| maps.token(s).max()).collect()
}

fn descend(z: &mut LatentGrid, grad: &LatentGrid, alpha: f64) {
    for (v, g) in z.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *v -= alpha * g;
    }
}

fn all_zero(grads: &[Grid]) -> bool {
    grads.iter().all(|g| g.as_slice().iter().all(|&v| v == 0.0))
}

/// Re-standardizes each channel of `z` to the given (mean, variance) pairs.
/// Channels that already match, or have zero variance, are left untouched.
pub fn restore_moments(z: &mut LatentGrid, target: &[(f64, f64)]) {
    let current = z.channel_moments();
    for (c, (&(m0, v0), &(m1, v1))) in target.iter().zip(&current).enumerate() {
        if v1 <= 0.0 || (m0 == m1 && v0 == v1) {
            continue;
        }
        let k = (v0 / v1).sqrt();
        for v in z.channel_mut(c) {
            *v = (*v - m1) * k + m0;
        }
    }
}

pub fn run_guidance(
    z_t: &LatentGrid,
    model: &ToyAttentionModel,
    subjects: &SubjectSet,
    cfg: &GuidanceConfig,
) -> Result<GuidanceTrace> {
    let sched = &cfg.schedule;
    sched.validate()?;
    subjects.check_tokens(model.tokens())?;
    if subjects.is_empty() {
        return Err(Error::arg("subject set is empty"));
    }
    let weights = cfg.flags.apply(&cfg.weights);
    weights.validate()?;

    let mut z = z_t.clone();
    let mut records = Vec::with_capacity(sched.total_steps);
    let rearrange_at = sched.rearrange_step();

    for t in ((rearrange_at + 1)..=sched.total_steps).rev() {
        let mut record = None;
        for _ in 0..sched.iters_per_step {
            let maps = model.attention(&z)?;
            let (loss, grad) = loss_phase1(&maps, subjects, &weights)?;
            if record.is_none() {
                record = Some(StepRecord {
                    t,
                    phase: Phase::Excite,
                    excite: Some((&loss).into()),
                    follow: None,
                    max_attention: peaks(&maps, subjects),
                    latent_rms: latent_rms(&z),
                    masks: None,
                    overlap_before: None,
                    overlap_after: None,
                });
            }
            if all_zero(&grad) {
                break;
            }
            let gz = model.backward(&z, &maps, &grad)?;
            descend(&mut z, &gz, sched.alpha);
        }
        records.push(record.expect("at least one iteration"));
    }

    let maps_tau = model.attention(&z)?;
    let plan = plan_layout(&maps_tau, subjects, &cfg.gamma)?;
    log::info!(
        "rearranged at t = {rearrange_at}: overlap {} -> {}, {} mover(s)",
        plan.overlap_before,
        plan.overlap_after,
        plan.movers.len()
    );
    if cfg.flags.enable_pixel_realloc {
        let moments = z.channel_moments();
        let (migrated, _) = migrate_latent(&z, &plan, &maps_tau, subjects, &cfg.imputation)?;
        z = migrated;
        if cfg.flags.enable_restart {
            restore_moments(&mut z, &moments);
        }
    }
    let masks = MaskSet::new(plan.final_masks.clone())?;

    let mut post_rearrange = None;
    for t in (1..=rearrange_at).rev() {
        let mut record = None;
        for _ in 0..sched.iters_per_step {
            let maps = model.attention(&z)?;
            let (loss, grad) = loss_phase3(&maps, subjects, &masks, &weights)?;
            if record.is_none() {
                let first = t == rearrange_at;
                if first {
                    post_rearrange = Some(loss);
                }
                record = Some(StepRecord {
                    t,
                    phase: if first { Phase::Rearrange } else { Phase::Follow },
                    excite: None,
                    follow: Some((&loss).into()),
                    max_attention: peaks(&maps, subjects),
                    latent_rms: latent_rms(&z),
                    masks: first.then(|| plan.final_masks.clone()),
                    overlap_before: first.then_some(plan.overlap_before),
                    overlap_after: first.then_some(plan.overlap_after),
                });
            }
            if all_zero(&grad) {
                break;
            }
            let gz = model.backward(&z, &maps, &grad)?;
            descend(&mut z, &gz, sched.alpha);
        }
        records.push(record.expect("at least one iteration"));
    }

    let final_maps = model.attention(&z)?;
    let (final_follow, _) = loss_phase3(&final_maps, subjects, &masks, &weights)?;

    Ok(GuidanceTrace {
        records,
        plan: Some(plan),
        post_rearrange,
        final_follow: Some(final_follow),
        final_latent: z,
    })
}
