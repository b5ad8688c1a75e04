//! Excite-and-distinguish objectives applied during the first guidance steps.
//!
//! Subjects are sorted by peak attention. Each subject's map is filtered by
//! the accumulated blocking mask of the subjects ranked before it, so a later
//! subject can only be excited away from the peaks already claimed. The
//! blocking masks are treated as constants when differentiating, and every
//! `max` routes its gradient to a single (tie-broken) element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    dilate_with_sources, frobenius_inner, AttentionMaps, BinaryGrid, Grid, SubjectSet,
};

/// Scaling factors for every loss term, plus the blocking-rectangle side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_be: f64,
    pub lambda_ol: f64,
    pub lambda_norm: f64,
    pub lambda_inside: f64,
    pub lambda_fill: f64,
    /// Side of the blocking rectangle in patches; `None` means `max(3, side / 4)`.
    pub rect_side: Option<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_be: 1.0,
            lambda_ol: 0.5,
            lambda_norm: 0.1,
            lambda_inside: 1.0,
            lambda_fill: 1.0,
            rect_side: None,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_be: 0.0,
            lambda_ol: 0.0,
            lambda_norm: 0.0,
            lambda_inside: 0.0,
            lambda_fill: 0.0,
            rect_side: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_be", self.lambda_be),
            ("lambda_ol", self.lambda_ol),
            ("lambda_norm", self.lambda_norm),
            ("lambda_inside", self.lambda_inside),
            ("lambda_fill", self.lambda_fill),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.rect_side == Some(0) {
            return Err(Error::Config("rect_side must be at least 1".into()));
        }
        Ok(())
    }

    /// Blocking-rectangle side for a grid of the given side.
    pub fn rect_side_for(&self, side: usize) -> Result<usize> {
        match self.rect_side {
            Some(r) if r == 0 || r > side => Err(Error::Config(format!(
                "rect_side {r} outside [1, {side}]"
            ))),
            Some(r) => Ok(r),
            None => Ok(default_rect_side(side)),
        }
    }
}

/// `max(3, side / 4)`, never larger than the grid.
pub fn default_rect_side(side: usize) -> usize {
    (side / 4).max(3).min(side)
}

/// Subject tokens by descending peak attention; ties go to the lower token index.
pub fn sort_tokens_by_max(maps: &AttentionMaps, subjects: &SubjectSet) -> Result<Vec<usize>> {
    if subjects.is_empty() {
        return Err(Error::arg("subject set is empty"));
    }
    subjects.check_tokens(maps.tokens())?;
    let mut order: Vec<(usize, f64)> = subjects
        .tokens()
        .iter()
        .map(|&s| (s, maps.token(s).max()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(order.into_iter().map(|(s, _)| s).collect())
}

/// Cumulative blocking masks, one per sorted subject token.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockingSequence {
    order: Vec<usize>,
    peaks: Vec<Option<(usize, usize)>>,
    masks: Vec<BinaryGrid>,
    rect_side: usize,
}

impl BlockingSequence {
    /// Token indices sorted by descending peak attention.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `masks[i]` accumulates the rectangles of `order[0..=i]`.
    pub fn masks(&self) -> &[BinaryGrid] {
        &self.masks
    }

    /// Peak of the filtered map of `order[i]`; `None` when the prior mask covers the grid.
    pub fn peaks(&self) -> &[Option<(usize, usize)>] {
        &self.peaks
    }

    pub fn rect_side(&self) -> usize {
        self.rect_side
    }

    /// The mask that filters `order[i]` (empty for the first token).
    pub fn prior_mask(&self, i: usize) -> BinaryGrid {
        if i == 0 {
            BinaryGrid::empty(self.masks[0].side())
        } else {
            self.masks[i - 1].clone()
        }
    }
}

/// Square of side `rect_side` around (`row`, `col`), clipped to the grid.
pub fn blocking_rectangle(side: usize, row: usize, col: usize, rect_side: usize) -> BinaryGrid {
    let half = (rect_side as isize - 1) / 2;
    BinaryGrid::rectangle(
        side,
        row as isize - half,
        col as isize - half,
        rect_side,
        rect_side,
    )
}

/// Maximum of `map` over cells outside `blocked`, first occurrence in row-major order.
///
/// Equals the argmax of `map ⊙ (1 - blocked)` whenever that filtered map has a
/// positive maximum; when it does not, the chosen cell still lies outside the
/// blocked region.
fn unblocked_argmax(map: &Grid, blocked: &BinaryGrid) -> Option<(usize, usize)> {
    let side = map.side();
    let mut best: Option<(usize, f64)> = None;
    for (i, (&v, &b)) in map.as_slice().iter().zip(blocked.bits()).enumerate() {
        if b {
            continue;
        }
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| (i / side, i % side))
}

pub fn build_blocking_sequence(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    weights: &LossWeights,
) -> Result<BlockingSequence> {
    let side = maps.side();
    let rect_side = weights.rect_side_for(side)?;
    let order = sort_tokens_by_max(maps, subjects)?;
    let mut masks = Vec::with_capacity(order.len());
    let mut peaks = Vec::with_capacity(order.len());
    let mut acc = BinaryGrid::empty(side);
    for &s in &order {
        let peak = unblocked_argmax(maps.token(s), &acc);
        if let Some((r, c)) = peak {
            acc = acc.union(&blocking_rectangle(side, r, c, rect_side));
        }
        peaks.push(peak);
        masks.push(acc.clone());
    }
    Ok(BlockingSequence {
        order,
        peaks,
        masks,
        rect_side,
    })
}

/// One `1 - max(filtered)` term per sorted subject.
fn be_terms(maps: &AttentionMaps, seq: &BlockingSequence) -> Vec<f64> {
    seq.order
        .iter()
        .zip(&seq.peaks)
        .map(|(&s, peak)| match peak {
            Some((r, c)) => 1.0 - maps.token(s).get(*r, *c),
            None => 1.0,
        })
        .collect()
}

/// Blocked excite loss: worst `1 - max((1 - B_prev) ⊙ A_s)` over sorted subjects.
pub fn loss_be(maps: &AttentionMaps, seq: &BlockingSequence) -> f64 {
    be_terms(maps, seq)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Unblocked excite loss: `max_s (1 - max(A_s))`.
pub fn loss_ae(maps: &AttentionMaps, subjects: &SubjectSet) -> f64 {
    subjects
        .tokens()
        .iter()
        .map(|&s| 1.0 - maps.token(s).max())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Pairwise overlap of dilated subject maps.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapLoss {
    /// Indexed like `SubjectSet::tokens`.
    pub per_subject: Vec<f64>,
    pub total: f64,
}

pub fn loss_overlap(maps: &AttentionMaps, subjects: &SubjectSet) -> Result<OverlapLoss> {
    subjects.check_tokens(maps.tokens())?;
    let dilated: Vec<Grid> = subjects
        .tokens()
        .iter()
        .map(|&s| dilate_with_sources(maps.token(s)).0)
        .collect();
    overlap_of_dilated(dilated.iter())
}

fn overlap_of_dilated<'a>(dilated: impl ExactSizeIterator<Item = &'a Grid> + Clone) -> Result<OverlapLoss> {
    let m = dilated.len();
    let mut per_subject = vec![0.0; m];
    if m >= 2 {
        let norm = 1.0 / (m as f64 - 1.0);
        for (i, a) in dilated.clone().enumerate() {
            let mut acc = 0.0;
            for (j, b) in dilated.clone().enumerate() {
                if i != j {
                    acc += frobenius_inner(a, b)?;
                }
            }
            per_subject[i] = norm * acc;
        }
    }
    let total = per_subject.iter().sum();
    Ok(OverlapLoss { per_subject, total })
}

/// Norm threshold `side^2 / |S|`.
pub fn norm_threshold(side: usize, subject_count: usize) -> f64 {
    (side * side) as f64 / subject_count as f64
}

/// `[‖A_s‖_F > C] ‖A_s‖_F` per subject, indexed like `SubjectSet::tokens`.
pub fn loss_norm(maps: &AttentionMaps, subjects: &SubjectSet) -> Result<Vec<f64>> {
    if subjects.is_empty() {
        return Err(Error::arg("subject set is empty"));
    }
    subjects.check_tokens(maps.tokens())?;
    let c = norm_threshold(maps.side(), subjects.len());
    Ok(subjects
        .tokens()
        .iter()
        .map(|&s| {
            let n = maps.token(s).frobenius_norm();
            if n > c {
                n
            } else {
                0.0
            }
        })
        .collect())
}

/// Breakdown of the first-phase objective. Components are unweighted.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Loss {
    pub be: f64,
    pub overlap: OverlapLoss,
    pub norm: Vec<f64>,
    /// Weighted sum.
    pub total: f64,
}

/// Everything the first-phase loss and its gradient are assembled from.
pub(crate) struct Phase1Parts {
    pub seq: BlockingSequence,
    pub worst: usize,
    /// Dilated subject maps with their source cells, indexed like `SubjectSet::tokens`.
    pub dilated: Vec<(Grid, Vec<usize>)>,
    pub loss: Phase1Loss,
}

pub(crate) fn phase1_parts(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    weights: &LossWeights,
) -> Result<Phase1Parts> {
    weights.validate()?;
    if maps.maps().iter().any(|m| !m.is_finite()) {
        return Err(Error::Numeric("non-finite attention value".into()));
    }
    let seq = build_blocking_sequence(maps, subjects, weights)?;
    let norm = loss_norm(maps, subjects)?;

    let terms = be_terms(maps, &seq);
    let mut worst = 0;
    for (i, &v) in terms.iter().enumerate() {
        if v > terms[worst] {
            worst = i;
        }
    }
    let be = terms[worst];

    let dilated: Vec<(Grid, Vec<usize>)> = subjects
        .tokens()
        .iter()
        .map(|&s| dilate_with_sources(maps.token(s)))
        .collect();
    let overlap = overlap_of_dilated(dilated.iter().map(|(g, _)| g))?;

    let total = weights.lambda_be * be
        + weights.lambda_ol * overlap.total
        + weights.lambda_norm * norm.iter().sum::<f64>();
    Ok(Phase1Parts {
        seq,
        worst,
        dilated,
        loss: Phase1Loss {
            be,
            overlap,
            norm,
            total,
        },
    })
}

/// Weighted first-phase loss and its gradient with respect to every token map
/// (non-subject tokens get zero gradient).
pub fn loss_phase1(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    weights: &LossWeights,
) -> Result<(Phase1Loss, Vec<Grid>)> {
    let parts = phase1_parts(maps, subjects, weights)?;
    let side = maps.side();
    let mut grad = vec![Grid::zeros(side); maps.tokens()];

    if weights.lambda_be != 0.0 {
        if let Some((r, c)) = parts.seq.peaks[parts.worst] {
            let s = parts.seq.order[parts.worst];
            let v = grad[s].get(r, c);
            grad[s].set(r, c, v - weights.lambda_be);
        }
    }

    let m = subjects.len();
    if weights.lambda_ol != 0.0 && m >= 2 {
        // d(total)/d(dilated_i) = 2/(m-1) * sum_{j != i} dilated_j
        let coeff = weights.lambda_ol * 2.0 / (m as f64 - 1.0);
        for (i, &s) in subjects.tokens().iter().enumerate() {
            let mut others = Grid::zeros(side);
            for (j, (d, _)) in parts.dilated.iter().enumerate() {
                if j != i {
                    others.add_scaled(d, 1.0);
                }
            }
            let sources = &parts.dilated[i].1;
            let g = grad[s].as_mut_slice();
            for (cell, &src) in sources.iter().enumerate() {
                g[src] += coeff * others.as_slice()[cell];
            }
        }
    }

    let norm = &parts.loss.norm;
    if weights.lambda_norm != 0.0 {
        for (i, &s) in subjects.tokens().iter().enumerate() {
            if norm[i] > 0.0 {
                let a = maps.token(s);
                grad[s].add_scaled(a, weights.lambda_norm / norm[i]);
            }
        }
    }

    Ok((parts.loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps_with_peaks(side: usize, tokens: usize, peaks: &[(usize, usize, usize, f64)]) -> AttentionMaps {
        let mut grids = vec![Grid::zeros(side); tokens];
        for &(t, r, c, v) in peaks {
            grids[t].set(r, c, v);
        }
        AttentionMaps::new(grids).unwrap()
    }

    #[test]
    fn sort_examples() {
        let m = maps_with_peaks(
            4,
            8,
            &[(2, 0, 0, 0.9), (5, 1, 1, 0.7), (7, 2, 2, 0.7), (1, 0, 0, 0.1), (4, 3, 3, 0.8)],
        );
        let s = SubjectSet::new(vec![7, 5, 2], None).unwrap();
        assert_eq!(sort_tokens_by_max(&m, &s).unwrap(), vec![2, 5, 7]);
        let s = SubjectSet::new(vec![3], None).unwrap();
        assert_eq!(sort_tokens_by_max(&m, &s).unwrap(), vec![3]);
        let s = SubjectSet::new(vec![1, 4], None).unwrap();
        assert_eq!(sort_tokens_by_max(&m, &s).unwrap(), vec![4, 1]);
        let empty = SubjectSet::new(vec![], None).unwrap();
        assert!(matches!(sort_tokens_by_max(&m, &empty), Err(Error::Argument(_))));
    }

    #[test]
    fn single_cell_blocking() {
        let m = maps_with_peaks(4, 1, &[(0, 0, 0, 1.0)]);
        let s = SubjectSet::new(vec![0], None).unwrap();
        let w = LossWeights {
            rect_side: Some(1),
            ..LossWeights::default()
        };
        let seq = build_blocking_sequence(&m, &s, &w).unwrap();
        assert_eq!(seq.masks(), &[BinaryGrid::from_strs(&["1000", "0000", "0000", "0000"])]);
    }

    #[test]
    fn identical_maps_force_exclusion() {
        let mut g = Grid::filled(4, 0.1);
        g.set(0, 0, 1.0);
        let m = AttentionMaps::new(vec![g.clone(), g]).unwrap();
        let s = SubjectSet::new(vec![0, 1], None).unwrap();
        let w = LossWeights {
            rect_side: Some(1),
            ..LossWeights::default()
        };
        let seq = build_blocking_sequence(&m, &s, &w).unwrap();
        assert_ne!(seq.peaks()[1], Some((0, 0)));
        assert!(seq.masks()[0].is_subset_of(&seq.masks()[1]));
        assert_ne!(seq.masks()[0], seq.masks()[1]);
    }

    #[test]
    fn rectangle_is_clipped_not_shifted() {
        let r = blocking_rectangle(6, 0, 5, 3);
        assert_eq!(r.area(), 4);
        assert!(r.get(0, 5) && r.get(1, 4));
        let even = blocking_rectangle(8, 4, 4, 4);
        assert_eq!(even.bounding_box(), Some((3, 6, 3, 6)));
    }

    #[test]
    fn be_examples() {
        let w1 = LossWeights {
            rect_side: Some(1),
            ..LossWeights::default()
        };
        // single subject reduces to the unblocked loss
        let m = maps_with_peaks(4, 1, &[(0, 2, 1, 0.8)]);
        let s = SubjectSet::new(vec![0], None).unwrap();
        let seq = build_blocking_sequence(&m, &s, &w1).unwrap();
        assert!((loss_be(&m, &seq) - 0.2).abs() < 1e-15);
        assert_eq!(loss_be(&m, &seq), loss_ae(&m, &s));

        // disjoint unit peaks
        let m = maps_with_peaks(4, 2, &[(0, 0, 0, 1.0), (1, 3, 3, 1.0)]);
        let s = SubjectSet::new(vec![0, 1], None).unwrap();
        let seq = build_blocking_sequence(&m, &s, &w1).unwrap();
        assert_eq!(loss_be(&m, &seq), 0.0);

        // shared single peak: second subject fully blocked
        let m = maps_with_peaks(4, 2, &[(0, 1, 1, 1.0), (1, 1, 1, 1.0)]);
        let seq = build_blocking_sequence(&m, &s, &w1).unwrap();
        assert_eq!(loss_be(&m, &seq), 1.0);
    }

    #[test]
    fn overlap_examples() {
        let s = SubjectSet::new(vec![0, 1], None).unwrap();
        let m = maps_with_peaks(8, 2, &[(0, 0, 0, 1.0), (1, 7, 7, 1.0)]);
        let ol = loss_overlap(&m, &s).unwrap();
        assert_eq!(ol.per_subject, vec![0.0, 0.0]);
        assert_eq!(ol.total, 0.0);

        let m = AttentionMaps::new(vec![Grid::filled(4, 0.1), Grid::filled(4, 0.1)]).unwrap();
        let ol = loss_overlap(&m, &s).unwrap();
        for v in &ol.per_subject {
            assert!((v - 0.16).abs() < 1e-12);
        }
        assert!((ol.total - 0.32).abs() < 1e-12);

        let single = SubjectSet::new(vec![0], None).unwrap();
        assert_eq!(loss_overlap(&m, &single).unwrap().total, 0.0);
    }

    #[test]
    fn norm_examples() {
        let s4 = SubjectSet::new(vec![0, 1, 2, 3], None).unwrap();
        let ones = AttentionMaps::new(vec![Grid::filled(16, 1.0); 4]).unwrap();
        assert_eq!(norm_threshold(16, 4), 64.0);
        assert_eq!(loss_norm(&ones, &s4).unwrap(), vec![0.0; 4]);
        let fives = AttentionMaps::new(vec![Grid::filled(16, 5.0); 4]).unwrap();
        assert_eq!(loss_norm(&fives, &s4).unwrap(), vec![80.0; 4]);
        let s2 = SubjectSet::new(vec![0, 1], None).unwrap();
        let zeros = AttentionMaps::new(vec![Grid::zeros(8); 2]).unwrap();
        assert_eq!(norm_threshold(8, 2), 32.0);
        assert_eq!(loss_norm(&zeros, &s2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let m = maps_with_peaks(6, 3, &[(0, 1, 1, 0.5), (1, 4, 4, 0.7), (2, 2, 3, 0.2)]);
        let s = SubjectSet::new(vec![0, 1, 2], None).unwrap();
        let (l, g) = loss_phase1(&m, &s, &LossWeights::zero()).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.iter().all(|g| g.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_subject_be_gradient() {
        let mut a = Grid::from_fn(5, |r, c| 0.01 * (r * 5 + c) as f64);
        a.set(3, 2, 0.9);
        let m = AttentionMaps::new(vec![Grid::zeros(5), a]).unwrap();
        let s = SubjectSet::new(vec![1], None).unwrap();
        let w = LossWeights {
            lambda_be: 1.0,
            ..LossWeights::zero()
        };
        let (l, g) = loss_phase1(&m, &s, &w).unwrap();
        assert!((l.be - 0.1).abs() < 1e-15);
        for r in 0..5 {
            for c in 0..5 {
                let expect = if (r, c) == (3, 2) { -1.0 } else { 0.0 };
                assert_eq!(g[1].get(r, c), expect);
                assert_eq!(g[0].get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn rect_side_defaults() {
        assert_eq!(default_rect_side(16), 4);
        assert_eq!(default_rect_side(8), 3);
        assert_eq!(default_rect_side(2), 2);
        let w = LossWeights {
            rect_side: Some(9),
            ..LossWeights::default()
        };
        assert!(w.rect_side_for(8).is_err());
    }
}
