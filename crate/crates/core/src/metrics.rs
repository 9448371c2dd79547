//! Point-to-point (D1) reconstruction quality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{Point3, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrResult {
    /// `f64::INFINITY` when the clouds coincide.
    pub d1_psnr: f64,
    pub mse: f64,
    pub peak: f64,
}

/// Peak convention: the longest bounding-box edge of the reference cloud,
/// or 1 for a cloud that is a single location.
pub fn default_peak(reference: &PointCloud) -> f64 {
    let e = reference.bbox().max_edge();
    if e > 0.0 {
        e
    } else {
        1.0
    }
}

/// Symmetric D1 PSNR: the larger of the two directed mean squared
/// nearest-neighbour distances.
pub fn d1_psnr(reference: &PointCloud, reconstructed: &PointCloud, peak: f64) -> Result<PsnrResult> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Domain(format!("peak {peak} must be positive and finite")));
    }
    let forward = directed_mse(reference.points(), &NeighborGrid::new(reconstructed.points()));
    let backward = directed_mse(reconstructed.points(), &NeighborGrid::new(reference.points()));
    let mse = forward.max(backward);
    Ok(PsnrResult {
        d1_psnr: psnr(mse, peak),
        mse,
        peak,
    })
}

/// `10 log10(peak^2 / mse)`, written through the root error so that
/// round-number inputs give round-number results.
pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (peak / mse.sqrt()).log10()
    }
}

fn directed_mse(from: &[Point3], to: &NeighborGrid) -> f64 {
    let sum: f64 = from.iter().map(|p| to.nearest_squared(p)).sum();
    sum / from.len() as f64
}

/// Mean squared nearest-neighbour distance by exhaustive search.
pub fn directed_mse_brute(from: &[Point3], to: &[Point3]) -> f64 {
    let sum: f64 = from.iter().map(|p| nearest_brute(p, to)).sum();
    sum / from.len() as f64
}

pub fn nearest_brute(q: &Point3, points: &[Point3]) -> f64 {
    points
        .iter()
        .map(|p| q.squared_distance(p))
        .fold(f64::INFINITY, f64::min)
}

/// Uniform bucket grid over a point set; queries return exactly the
/// brute-force minimum squared distance.
pub struct NeighborGrid<'a> {
    points: &'a [Point3],
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    /// Point indices grouped by cell; `starts` has one extra entry.
    order: Vec<usize>,
    starts: Vec<usize>,
}

impl<'a> NeighborGrid<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for (a, v) in p.coords().into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        let edge = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if edge > 0.0 { edge / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1));
        let mut grid = NeighborGrid {
            points,
            origin: lo,
            cell,
            dims,
            order: Vec::new(),
            starts: Vec::new(),
        };
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        grid.order = order;
        grid.starts = counts;
        grid
    }

    fn cell_of(&self, p: &Point3) -> [usize; 3] {
        let c = p.coords();
        [0, 1, 2].map(|a| {
            let f = ((c[a] - self.origin[a]) / self.cell).floor();
            if f <= 0.0 {
                0
            } else {
                (f as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn scan(&self, c: [usize; 3], q: &Point3, best: &mut f64) {
        let f = self.flat(c);
        for &i in &self.order[self.starts[f]..self.starts[f + 1]] {
            *best = best.min(q.squared_distance(&self.points[i]));
        }
    }

    pub fn nearest_squared(&self, q: &Point3) -> f64 {
        let c = self.cell_of(q);
        let qc = q.coords();
        let mut best = f64::INFINITY;
        let max_r = *self.dims.iter().max().unwrap();
        for r in 0..max_r {
            let lo = [0, 1, 2].map(|a| c[a].saturating_sub(r));
            let hi = [0, 1, 2].map(|a| (c[a] + r).min(self.dims[a] - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let shell = x.abs_diff(c[0]) == r
                            || y.abs_diff(c[1]) == r
                            || z.abs_diff(c[2]) == r;
                        if shell {
                            self.scan([x, y, z], q, &mut best);
                        }
                    }
                }
            }
            // Lower bound on the distance to any cell outside the searched
            // block; faces on the grid boundary have nothing beyond them.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if lo[a] > 0 {
                    let face = self.origin[a] + lo[a] as f64 * self.cell;
                    bound = bound.min((qc[a] - face).max(0.0));
                }
                if hi[a] + 1 < self.dims[a] {
                    let face = self.origin[a] + (hi[a] + 1) as f64 * self.cell;
                    bound = bound.min((face - qc[a]).max(0.0));
                }
            }
            if bound == f64::INFINITY {
                break;
            }
            // Slack covers points whose bucket was chosen under rounding.
            let bound = (bound - self.cell * 1e-9).max(0.0);
            if best <= bound * bound {
                break;
            }
        }
        best
    }
}
