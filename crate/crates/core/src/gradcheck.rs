//! Finite-difference verification of the analytic gradients.
//!
//! Attention instances are drawn so that every value in the tensor is distinct
//! by a margin far larger than the probe step, and the first subject is
//! scaled so its conditional norm term is active. Instances whose discrete
//! choices (sort order, worst excite term, norm activation) sit closer than
//! [`DECISION_MARGIN`] to a switch are rejected and redrawn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::excite::{build_blocking_sequence, loss_phase1, norm_threshold, phase1_parts, LossWeights};
use crate::follow::{loss_phase3, MaskSet};
use crate::tensor::{AttentionMaps, BinaryGrid, Grid, LatentGrid, SubjectSet};
use crate::toy::{sample_latent, ToyAttentionModel};

/// Probe step for central differences.
pub const EPSILON: f64 = 1e-4;
/// Pass threshold for gradients with respect to attention maps.
pub const LOSS_TOLERANCE: f64 = 1e-4;
/// Pass threshold for gradients chained through the toy model.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Minimum distance of any discrete decision from its switching point.
pub const DECISION_MARGIN: f64 = 3e-4;
/// Denominator floor of the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Central differences of `f` at `x`, coordinate by coordinate.
pub fn central_differences(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Token maps whose values are all distinct multiples of `1 / (side^2 * tokens)`
/// (plus jitter of at most a tenth of that spacing), in `(0, 1)`.
pub fn tie_free_maps(side: usize, tokens: usize, rng: &mut impl Rng) -> Vec<Grid> {
    let count = side * side * tokens;
    let mut ranks: Vec<usize> = (0..count).collect();
    ranks.shuffle(rng);
    let spacing = 1.0 / count as f64;
    let mut values = ranks
        .into_iter()
        .map(|k| (k as f64 + 0.5 + rng.random_range(-0.1..0.1)) * spacing);
    (0..tokens)
        .map(|_| Grid::from_fn(side, |_, _| values.next().expect("enough values")))
        .collect()
}

/// Attention instance for checking the first-phase gradient: tie-free values,
/// with subject 0 rescaled to 1.5x the norm threshold.
pub fn phase1_instance(
    side: usize,
    tokens: usize,
    subjects: &SubjectSet,
    rng: &mut impl Rng,
) -> Result<AttentionMaps> {
    let mut maps = tie_free_maps(side, tokens, rng);
    if let Some(&s0) = subjects.tokens().first() {
        let c = norm_threshold(side, subjects.len());
        let n = maps[s0].frobenius_norm();
        maps[s0].scale(1.5 * c / n);
    }
    AttentionMaps::new(maps)
}

/// Whether every discrete choice of the first-phase loss is at least `margin`
/// away from switching.
pub fn phase1_decisions_stable(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    weights: &LossWeights,
    margin: f64,
) -> Result<bool> {
    let seq = build_blocking_sequence(maps, subjects, weights)?;
    let mut maxima: Vec<f64> = subjects.tokens().iter().map(|&s| maps.token(s).max()).collect();
    maxima.sort_by(f64::total_cmp);
    if maxima.windows(2).any(|w| w[1] - w[0] < margin) {
        return Ok(false);
    }
    let mut terms = Vec::new();
    for (i, (&s, peak)) in seq.order().iter().zip(seq.peaks()).enumerate() {
        let Some((r, c)) = *peak else {
            return Ok(false);
        };
        let a = maps.token(s);
        let prior = seq.prior_mask(i);
        let best = a.get(r, c);
        // runner-up among unblocked cells
        let second = a
            .as_slice()
            .iter()
            .zip(prior.bits())
            .enumerate()
            .filter(|(j, (_, b))| !**b && *j != r * a.side() + c)
            .map(|(_, (v, _))| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if best - second < margin {
            return Ok(false);
        }
        terms.push(1.0 - best);
    }
    terms.sort_by(f64::total_cmp);
    if terms.len() >= 2 && terms[terms.len() - 1] - terms[terms.len() - 2] < margin {
        return Ok(false);
    }
    let c = norm_threshold(maps.side(), subjects.len());
    for &s in subjects.tokens() {
        if (maps.token(s).frobenius_norm() - c).abs() < margin {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Positive maps in `[0.05, 1)` and nonempty random masks.
pub fn phase3_instance(
    side: usize,
    tokens: usize,
    subjects: &SubjectSet,
    rng: &mut impl Rng,
) -> Result<(AttentionMaps, MaskSet)> {
    let maps = (0..tokens)
        .map(|_| Grid::from_fn(side, |_, _| rng.random_range(0.05..1.0)))
        .collect();
    let masks = subjects
        .tokens()
        .iter()
        .map(|_| {
            let mut m = BinaryGrid::from_fn(side, |_, _| rng.random_bool(0.3));
            if m.is_empty() {
                m.set(rng.random_range(0..side), rng.random_range(0..side), true);
            }
            m
        })
        .collect();
    Ok((AttentionMaps::new(maps)?, MaskSet::new(masks)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSettings {
    pub side: usize,
    pub tokens: usize,
    pub channels: usize,
    pub key_scale: f64,
    pub instances: usize,
    /// Latent coordinates probed per composite instance; `None` probes all.
    pub composite_coords: Option<usize>,
    pub seed: u64,
    /// Negative control: perturb the analytic gradients before comparing.
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss1_max_rel: f64,
    pub loss3_max_rel: f64,
    pub composite_max_rel: f64,
    pub instances: usize,
    /// Attention instances redrawn because a discrete choice sat near a switch.
    pub rejected: usize,
    /// Single-coordinate probes skipped because they crossed a kink.
    pub skipped_probes: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.loss1_max_rel < LOSS_TOLERANCE
            && self.loss3_max_rel < LOSS_TOLERANCE
            && self.composite_max_rel < COMPOSITE_TOLERANCE
    }
}

fn flatten(grads: &[Grid]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
}

fn corrupt(values: &mut [f64]) {
    if let Some(v) = values.iter_mut().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
        *v = *v * 1.5 + 0.1;
    }
}

/// Discrete choices made by the first-phase loss: sort order, blocking peaks,
/// worst excite term, dilation sources and active norm terms. Probes that
/// change this signature straddle a kink and are skipped.
pub fn phase1_signature(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    weights: &LossWeights,
) -> Result<Vec<usize>> {
    Ok(phase1_value_and_signature(maps, subjects, weights)?.1)
}

fn phase1_value_and_signature(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    weights: &LossWeights,
) -> Result<(f64, Vec<usize>)> {
    let parts = phase1_parts(maps, subjects, weights)?;
    let side = maps.side();
    let mut sig: Vec<usize> = parts.seq.order().to_vec();
    sig.extend(
        parts
            .seq
            .peaks()
            .iter()
            .map(|p| p.map_or(usize::MAX, |(r, c)| r * side + c)),
    );
    sig.push(parts.worst);
    for (d, norm) in parts.dilated.iter().zip(&parts.loss.norm) {
        sig.extend(&d.1);
        sig.push(usize::from(*norm > 0.0));
    }
    Ok((parts.loss.total, sig))
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub max_rel: f64,
    pub probes: usize,
    /// Probes skipped because they crossed a kink of the loss.
    pub skipped: usize,
}

/// Compares `analytic` against central differences of `eval` at `coords`.
/// `eval` returns the loss and, for piecewise losses, a signature of its
/// discrete choices; probes whose signature differs from the base are skipped.
fn compare<T>(
    analytic: &[f64],
    coords: &[usize],
    base: &T,
    perturb: impl Fn(&T, usize, f64) -> T,
    eval: impl Fn(&T) -> Result<(f64, Option<Vec<usize>>)>,
) -> Result<ProbeResult> {
    let reference = eval(base)?.1;
    let mut out = ProbeResult {
        max_rel: 0.0,
        probes: 0,
        skipped: 0,
    };
    for (&i, &a) in coords.iter().zip(analytic) {
        let (up, sig_up) = eval(&perturb(base, i, EPSILON))?;
        let (down, sig_down) = eval(&perturb(base, i, -EPSILON))?;
        if sig_up != reference || sig_down != reference {
            out.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * EPSILON);
        out.max_rel = out.max_rel.max(relative_error(a, numeric));
        out.probes += 1;
    }
    Ok(out)
}

fn perturb_maps(maps: &AttentionMaps, i: usize, delta: f64) -> AttentionMaps {
    let cells = maps.side() * maps.side();
    let mut grids = maps.maps().to_vec();
    grids[i / cells].as_mut_slice()[i % cells] += delta;
    AttentionMaps::new(grids).expect("probe stays nonnegative and finite")
}

/// First-phase gradient against central differences over every attention entry.
pub fn check_phase1(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    weights: &LossWeights,
    corrupt_gradient: bool,
) -> Result<ProbeResult> {
    let (_, grad) = loss_phase1(maps, subjects, weights)?;
    let mut analytic = flatten(&grad);
    if corrupt_gradient {
        corrupt(&mut analytic);
    }
    let coords: Vec<usize> = (0..analytic.len()).collect();
    compare(&analytic, &coords, maps, perturb_maps, |m| {
        let (v, sig) = phase1_value_and_signature(m, subjects, weights)?;
        Ok((v, Some(sig)))
    })
}

/// Mask-following gradient against central differences over every attention entry.
pub fn check_phase3(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    masks: &MaskSet,
    weights: &LossWeights,
    corrupt_gradient: bool,
) -> Result<ProbeResult> {
    let (_, grad) = loss_phase3(maps, subjects, masks, weights)?;
    let mut analytic = flatten(&grad);
    if corrupt_gradient {
        corrupt(&mut analytic);
    }
    let coords: Vec<usize> = (0..analytic.len()).collect();
    compare(&analytic, &coords, maps, perturb_maps, |m| {
        Ok((loss_phase3(m, subjects, masks, weights)?.0.total, None))
    })
}

/// Which attention loss to chain through the toy model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompositeLoss<'a> {
    Excite,
    Follow(&'a MaskSet),
}

/// `dL/dz` through the toy model against central differences at `coords`.
pub fn check_composite(
    z: &LatentGrid,
    model: &ToyAttentionModel,
    subjects: &SubjectSet,
    weights: &LossWeights,
    loss: CompositeLoss<'_>,
    coords: &[usize],
    corrupt_gradient: bool,
) -> Result<ProbeResult> {
    let eval = |maps: &AttentionMaps| -> Result<(f64, Vec<Grid>)> {
        match loss {
            CompositeLoss::Excite => loss_phase1(maps, subjects, weights).map(|(l, g)| (l.total, g)),
            CompositeLoss::Follow(masks) => {
                loss_phase3(maps, subjects, masks, weights).map(|(l, g)| (l.total, g))
            }
        }
    };
    let maps = model.attention(z)?;
    let (_, grad) = eval(&maps)?;
    let gz = model.backward(z, &maps, &grad)?;
    let mut analytic: Vec<f64> = coords.iter().map(|&i| gz.as_slice()[i]).collect();
    if corrupt_gradient {
        corrupt(&mut analytic);
    }
    compare(
        &analytic,
        coords,
        z,
        |z, i, delta| {
            let mut p = z.clone();
            p.as_mut_slice()[i] += delta;
            p
        },
        |z| {
            let maps = model.attention(z)?;
            match loss {
                CompositeLoss::Excite => {
                    let (v, sig) = phase1_value_and_signature(&maps, subjects, weights)?;
                    Ok((v, Some(sig)))
                }
                CompositeLoss::Follow(masks) => {
                    Ok((loss_phase3(&maps, subjects, masks, weights)?.0.total, None))
                }
            }
        },
    )
}

/// Runs all three checks on `settings.instances` random instances each.
pub fn run_gradcheck(
    subjects: &SubjectSet,
    weights: &LossWeights,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    subjects.check_tokens(settings.tokens)?;
    if subjects.is_empty() {
        return Err(Error::arg("subject set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut report = GradCheckReport {
        loss1_max_rel: 0.0,
        loss3_max_rel: 0.0,
        composite_max_rel: 0.0,
        instances: settings.instances,
        rejected: 0,
        skipped_probes: 0,
    };
    const MAX_DRAWS: usize = 1000;

    for _ in 0..settings.instances {
        let mut draws = 0;
        let maps = loop {
            let maps = phase1_instance(settings.side, settings.tokens, subjects, &mut rng)?;
            if phase1_decisions_stable(&maps, subjects, weights, DECISION_MARGIN)? {
                break maps;
            }
            report.rejected += 1;
            draws += 1;
            if draws >= MAX_DRAWS {
                return Err(Error::Numeric("could not draw a tie-free instance".into()));
            }
        };
        let e1 = check_phase1(&maps, subjects, weights, settings.corrupt_gradient)?;
        report.loss1_max_rel = report.loss1_max_rel.max(e1.max_rel);
        report.skipped_probes += e1.skipped;

        let (maps3, masks) = phase3_instance(settings.side, settings.tokens, subjects, &mut rng)?;
        let e3 = check_phase3(&maps3, subjects, &masks, weights, settings.corrupt_gradient)?;
        report.loss3_max_rel = report.loss3_max_rel.max(e3.max_rel);

        let model = ToyAttentionModel::seeded(
            settings.tokens,
            settings.channels,
            settings.key_scale,
            rng.random(),
        )?;
        let size = settings.side * crate::layout::LATENT_SCALE;
        let z = sample_latent(settings.channels, size, rng.random());
        let total = z.as_slice().len();
        let coords: Vec<usize> = match settings.composite_coords {
            Some(k) if k < total => rand::seq::index::sample(&mut rng, total, k).into_vec(),
            _ => (0..total).collect(),
        };
        for loss in [CompositeLoss::Excite, CompositeLoss::Follow(&masks)] {
            let r = check_composite(
                &z,
                &model,
                subjects,
                weights,
                loss,
                &coords,
                settings.corrupt_gradient,
            )?;
            report.composite_max_rel = report.composite_max_rel.max(r.max_rel);
            report.skipped_probes += r.skipped;
        }
    }
    Ok(report)
}
