//! Mask-following objectives used after the layout has been fixed.

use crate::error::{Error, Result};
use crate::excite::LossWeights;
use crate::tensor::{frobenius_inner, AttentionMaps, BinaryGrid, Grid, SubjectSet};

/// One nonempty mask per subject, indexed like `SubjectSet::tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    masks: Vec<BinaryGrid>,
}

impl MaskSet {
    pub fn new(masks: Vec<BinaryGrid>) -> Result<Self> {
        let side = masks.first().map_or(0, BinaryGrid::side);
        for (i, m) in masks.iter().enumerate() {
            if m.side() != side {
                return Err(Error::dim(format!("mask {i} has side {}, expected {side}", m.side())));
            }
            if m.is_empty() {
                return Err(Error::DegenerateMask { subject: i });
            }
        }
        Ok(MaskSet { masks })
    }

    pub fn masks(&self) -> &[BinaryGrid] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    fn check(&self, maps: &AttentionMaps, subjects: &SubjectSet) -> Result<()> {
        subjects.check_tokens(maps.tokens())?;
        if subjects.is_empty() {
            return Err(Error::arg("subject set is empty"));
        }
        if self.masks.len() != subjects.len() {
            return Err(Error::dim(format!(
                "{} masks for {} subjects",
                self.masks.len(),
                subjects.len()
            )));
        }
        if self.masks[0].side() != maps.side() {
            return Err(Error::dim(format!(
                "mask side {} does not match attention side {}",
                self.masks[0].side(),
                maps.side()
            )));
        }
        Ok(())
    }
}

/// Per-subject sufficient statistics: `<A, M>`, `sum(A)`, `area(M)`.
struct Stats {
    inner: f64,
    mass: f64,
    area: f64,
}

fn stats(a: &Grid, m: &BinaryGrid) -> Stats {
    Stats {
        inner: frobenius_inner(a, &m.to_grid()).expect("sides checked"),
        mass: a.sum(),
        area: m.area() as f64,
    }
}

fn inside_term(st: &Stats, token: usize) -> Result<f64> {
    if !(st.mass > 0.0) {
        return Err(Error::DegenerateMap(format!("token {token} has zero attention mass")));
    }
    Ok((1.0 - st.inner / st.mass).powi(2))
}

fn fill_term(st: &Stats) -> f64 {
    (1.0 - st.inner / st.area).powi(2)
}

/// Mean squared share of attention mass falling outside each mask.
pub fn loss_inside(maps: &AttentionMaps, subjects: &SubjectSet, masks: &MaskSet) -> Result<f64> {
    masks.check(maps, subjects)?;
    let mut acc = 0.0;
    for (&s, m) in subjects.tokens().iter().zip(masks.masks()) {
        acc += inside_term(&stats(maps.token(s), m), s)?;
    }
    Ok(acc / subjects.len() as f64)
}

/// Mean squared deficit of the mask-averaged attention from 1.
pub fn loss_fill(maps: &AttentionMaps, subjects: &SubjectSet, masks: &MaskSet) -> Result<f64> {
    masks.check(maps, subjects)?;
    let total: f64 = subjects
        .tokens()
        .iter()
        .zip(masks.masks())
        .map(|(&s, m)| fill_term(&stats(maps.token(s), m)))
        .sum();
    Ok(total / subjects.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase3Loss {
    pub inside: f64,
    pub fill: f64,
    /// Weighted sum.
    pub total: f64,
}

/// Weighted mask-following loss and its gradient with respect to every token map.
///
/// The attention mass in the denominator of the inside term is differentiated
/// as a plain sum.
pub fn loss_phase3(
    maps: &AttentionMaps,
    subjects: &SubjectSet,
    masks: &MaskSet,
    weights: &LossWeights,
) -> Result<(Phase3Loss, Vec<Grid>)> {
    weights.validate()?;
    masks.check(maps, subjects)?;
    let side = maps.side();
    let count = subjects.len() as f64;
    let mut grad = vec![Grid::zeros(side); maps.tokens()];
    let (mut inside, mut fill) = (0.0, 0.0);

    for (&s, m) in subjects.tokens().iter().zip(masks.masks()) {
        let a = maps.token(s);
        let st = stats(a, m);
        inside += inside_term(&st, s)?;
        fill += fill_term(&st);

        let ratio = st.inner / st.mass;
        let fill_ratio = st.inner / st.area;
        // d/dA_ij (1 - <A,M>/sum A)^2 = -2 (1 - r) (M_ij - r) / sum A
        let k_in = weights.lambda_inside * -2.0 * (1.0 - ratio) / (st.mass * count);
        // d/dA_ij (1 - <A,M>/|M|)^2 = -2 (1 - q) M_ij / |M|
        let k_fill = weights.lambda_fill * -2.0 * (1.0 - fill_ratio) / (st.area * count);
        let g = grad[s].as_mut_slice();
        for (gi, &bit) in g.iter_mut().zip(m.bits()) {
            let mij = if bit { 1.0 } else { 0.0 };
            *gi += k_in * (mij - ratio) + k_fill * mij;
        }
    }
    inside /= count;
    fill /= count;
    Ok((
        Phase3Loss {
            inside,
            fill,
            total: weights.lambda_inside * inside + weights.lambda_fill * fill,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(side: usize, mask: &BinaryGrid, a: Grid) -> (AttentionMaps, SubjectSet, MaskSet) {
        assert_eq!(mask.side(), side);
        (
            AttentionMaps::new(vec![a]).unwrap(),
            SubjectSet::new(vec![0], None).unwrap(),
            MaskSet::new(vec![mask.clone()]).unwrap(),
        )
    }

    #[test]
    fn inside_examples() {
        let m = BinaryGrid::from_strs(&["1100", "1100", "0000", "0000"]);
        let (a, s, ms) = one(4, &m, m.to_grid());
        assert_eq!(loss_inside(&a, &s, &ms).unwrap(), 0.0);
        let (a, s, ms) = one(4, &m, m.complement().to_grid());
        assert_eq!(loss_inside(&a, &s, &ms).unwrap(), 1.0);
        let half = BinaryGrid::from_strs(&["1111", "1111", "0000", "0000"]);
        let (a, s, ms) = one(4, &half, Grid::filled(4, 0.3));
        assert!((loss_inside(&a, &s, &ms).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn fill_examples() {
        let m = BinaryGrid::from_strs(&["0110", "0110", "0000", "0000"]);
        let (a, s, ms) = one(4, &m, m.to_grid());
        assert_eq!(loss_fill(&a, &s, &ms).unwrap(), 0.0);
        let (a, s, ms) = one(4, &m, Grid::zeros(4));
        assert_eq!(loss_fill(&a, &s, &ms).unwrap(), 1.0);
        let mut halfway = m.to_grid();
        halfway.scale(0.5);
        let (a, s, ms) = one(4, &m, halfway);
        assert_eq!(loss_fill(&a, &s, &ms).unwrap(), 0.25);
    }

    #[test]
    fn degenerate_inputs() {
        let m = BinaryGrid::from_strs(&["10", "00"]);
        let (a, s, ms) = one(2, &m, Grid::zeros(2));
        assert!(matches!(loss_inside(&a, &s, &ms), Err(Error::DegenerateMap(_))));
        assert!(matches!(
            MaskSet::new(vec![BinaryGrid::empty(2)]),
            Err(Error::DegenerateMask { subject: 0 })
        ));
    }

    #[test]
    fn zero_weights() {
        let m = BinaryGrid::from_strs(&["10", "01"]);
        let (a, s, ms) = one(2, &m, Grid::filled(2, 0.4));
        let (l, g) = loss_phase3(&a, &s, &ms, &LossWeights::zero()).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g[0].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn optimum_has_zero_loss_and_fill_gradient() {
        let m0 = BinaryGrid::from_strs(&["1100", "1100", "0000", "0000"]);
        let m1 = BinaryGrid::from_strs(&["0000", "0000", "0011", "0011"]);
        let a = AttentionMaps::new(vec![m0.to_grid(), m1.to_grid()]).unwrap();
        let s = SubjectSet::new(vec![0, 1], None).unwrap();
        let ms = MaskSet::new(vec![m0, m1]).unwrap();
        let w = LossWeights::default();
        let (l, g) = loss_phase3(&a, &s, &ms, &w).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.iter().all(|g| g.as_slice().iter().all(|&v| v == 0.0)));
    }
}
