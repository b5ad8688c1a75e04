use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::BinaryGrid;

/// Translation in patches; positive `dy` moves down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
pub struct Shift {
    pub dy: isize,
    pub dx: isize,
}

impl Shift {
    pub const ZERO: Shift = Shift { dy: 0, dx: 0 };

    pub fn new(dy: isize, dx: isize) -> Self {
        Shift { dy, dx }
    }

    pub fn is_zero(&self) -> bool {
        self.dy == 0 && self.dx == 0
    }

    pub fn magnitude(&self) -> usize {
        self.dy.unsigned_abs() + self.dx.unsigned_abs()
    }

    /// Ordering used to break ties between equally good shifts.
    fn tie_key(&self) -> (usize, isize, isize) {
        (self.magnitude(), self.dy, self.dx)
    }
}

/// Overlap of mask `s` with all other masks divided by its own area.
pub fn mover_ratio(masks: &[BinaryGrid], s: usize) -> Result<f64> {
    let own = masks
        .get(s)
        .ok_or_else(|| Error::arg(format!("subject {s} out of range")))?;
    let area = own.area();
    if area == 0 {
        return Err(Error::DegenerateMask { subject: s });
    }
    let shared: usize = masks
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != s)
        .map(|(_, m)| own.intersection_area(m))
        .sum();
    Ok(shared as f64 / area as f64)
}

/// The two subjects with the highest mover ratio, highest first (ties to the
/// lower index). Empty when fewer than two subjects exist or nothing overlaps.
pub fn select_movers(masks: &[BinaryGrid]) -> Result<Vec<usize>> {
    if masks.len() < 2 {
        return Ok(Vec::new());
    }
    let ratios = masks
        .iter()
        .enumerate()
        .map(|(i, _)| mover_ratio(masks, i))
        .collect::<Result<Vec<f64>>>()?;
    select_by_ratio(&ratios)
}

pub(crate) fn select_by_ratio(ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.len() < 2 || ratios.iter().all(|&r| r == 0.0) {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..ratios.len()).collect();
    idx.sort_by(|&a, &b| ratios[b].total_cmp(&ratios[a]).then(a.cmp(&b)));
    idx.truncate(2);
    Ok(idx)
}

/// Exhaustive search over every downward-or-level translation that keeps the
/// mask on the grid, minimizing the summed overlap with `others`.
///
/// Ties prefer the smallest `|dy| + |dx|`, then the smallest `dy`, then the
/// smallest `dx`.
pub fn search_shift(mask: &BinaryGrid, others: &[BinaryGrid]) -> Result<Shift> {
    Ok(search_shift_with_cost(mask, others)?.0)
}

/// [`search_shift`] together with the overlap it achieves.
pub fn search_shift_with_cost(mask: &BinaryGrid, others: &[BinaryGrid]) -> Result<(Shift, usize)> {
    let side = mask.side();
    let Some((_, r1, c0, c1)) = mask.bounding_box() else {
        return Err(Error::DegenerateMask { subject: 0 });
    };
    if others.iter().any(|o| o.side() != side) {
        return Err(Error::dim("masks must share a grid side"));
    }
    let mut occupancy = vec![0usize; side * side];
    for o in others {
        for (i, &b) in o.bits().iter().enumerate() {
            occupancy[i] += usize::from(b);
        }
    }
    let cells: Vec<(usize, usize)> = mask.iter_set().collect();

    let max_dy = (side - 1 - r1) as isize;
    let min_dx = -(c0 as isize);
    let max_dx = (side - 1 - c1) as isize;

    let mut best = (Shift::ZERO, usize::MAX);
    for dy in 0..=max_dy {
        for dx in min_dx..=max_dx {
            let cost: usize = cells
                .iter()
                .map(|&(r, c)| {
                    let rr = (r as isize + dy) as usize;
                    let cc = (c as isize + dx) as usize;
                    occupancy[rr * side + cc]
                })
                .sum();
            let cand = Shift::new(dy, dx);
            if cost < best.1 || (cost == best.1 && cand.tie_key() < best.0.tie_key()) {
                best = (cand, cost);
            }
        }
    }
    Ok(best)
}
