//! Level-ordered occupancy octrees.
//!
//! Level `l` (1-based) holds one occupancy byte per occupied node at depth
//! `l - 1`, in breadth-first order. Bit `k` of a byte marks child octant `k`,
//! where `k = (x_bit << 2) | (y_bit << 1) | z_bit` and each bit is the next
//! binary digit of the normalized coordinate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{Point3, PointCloud};

pub const MAX_DEPTH: u32 = 16;

/// A depth level in `1..=MAX_DEPTH`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct DepthLevel(u8);

impl DepthLevel {
    pub fn new(value: u32) -> Result<Self> {
        if (1..=MAX_DEPTH).contains(&value) {
            Ok(DepthLevel(value as u8))
        } else {
            Err(Error::DepthOutOfRange {
                depth: value,
                max: MAX_DEPTH,
            })
        }
    }

    pub fn get(self) -> u32 {
        u32::from(self.0)
    }

    pub(crate) fn index(self) -> usize {
        usize::from(self.0)
    }

    pub(crate) fn check_within(self, max: u32) -> Result<()> {
        if self.get() <= max {
            Ok(())
        } else {
            Err(Error::DepthOutOfRange {
                depth: self.get(),
                max,
            })
        }
    }
}

impl TryFrom<u32> for DepthLevel {
    type Error = Error;

    fn try_from(value: u32) -> Result<Self> {
        DepthLevel::new(value)
    }
}

impl From<DepthLevel> for u32 {
    fn from(d: DepthLevel) -> u32 {
        d.get()
    }
}

impl fmt::Display for DepthLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Octree {
    levels: Vec<Vec<u8>>,
    point_count: u64,
}

impl Octree {
    /// Validates level sizes against the parent popcounts.
    pub fn from_levels(levels: Vec<Vec<u8>>, point_count: u64) -> Result<Self> {
        let depth = levels.len() as u32;
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::DepthOutOfRange {
                depth,
                max: MAX_DEPTH,
            });
        }
        let mut expected = 1usize;
        for (i, level) in levels.iter().enumerate() {
            if level.len() != expected {
                return Err(Error::CorruptStream(format!(
                    "level {} has {} nodes, parents imply {expected}",
                    i + 1,
                    level.len()
                )));
            }
            if level.contains(&0) {
                return Err(Error::CorruptStream(format!(
                    "level {} contains an empty occupancy byte",
                    i + 1
                )));
            }
            expected = child_count(level);
        }
        Ok(Octree {
            levels,
            point_count,
        })
    }

    pub fn max_depth(&self) -> u32 {
        self.levels.len() as u32
    }

    pub fn levels(&self) -> &[Vec<u8>] {
        &self.levels
    }

    pub fn level(&self, depth: DepthLevel) -> &[u8] {
        &self.levels[depth.index() - 1]
    }

    pub fn point_count(&self) -> u64 {
        self.point_count
    }

    /// Number of occupied cells at `depth`.
    pub fn occupied_at(&self, depth: DepthLevel) -> usize {
        child_count(self.level(depth))
    }

    /// Integer coordinates of every occupied cell at `depth`, breadth-first.
    pub fn cells(&self, depth: DepthLevel) -> Result<Vec<[u32; 3]>> {
        depth.check_within(self.max_depth())?;
        let mut cells = vec![[0u32; 3]];
        for level in &self.levels[..depth.index()] {
            let mut next = Vec::with_capacity(child_count(level));
            for (cell, &byte) in cells.iter().zip(level) {
                for octant in 0..8u32 {
                    if byte & (1 << octant) != 0 {
                        next.push([
                            cell[0] << 1 | (octant >> 2) & 1,
                            cell[1] << 1 | (octant >> 1) & 1,
                            cell[2] << 1 | octant & 1,
                        ]);
                    }
                }
            }
            cells = next;
        }
        Ok(cells)
    }

    pub fn truncate(&self, depth: DepthLevel) -> Result<Octree> {
        depth.check_within(self.max_depth())?;
        Ok(Octree {
            levels: self.levels[..depth.index()].to_vec(),
            point_count: self.point_count,
        })
    }
}

pub(crate) fn child_count(level: &[u8]) -> usize {
    level.iter().map(|b| b.count_ones() as usize).sum()
}

fn quantize(v: f64, depth: u32) -> u64 {
    // Multiplying by a power of two is exact, so truncation commutes with depth.
    (v * (1u64 << depth) as f64) as u64
}

fn morton(q: [u64; 3], depth: u32) -> u64 {
    let mut key = 0u64;
    for bit in (0..depth).rev() {
        let octant = ((q[0] >> bit) & 1) << 2 | ((q[1] >> bit) & 1) << 1 | (q[2] >> bit) & 1;
        key = key << 3 | octant;
    }
    key
}

/// Builds the occupancy octree of a normalized cloud down to `max_depth`.
pub fn build_octree(cloud: &PointCloud, max_depth: u32) -> Result<Octree> {
    let depth = DepthLevel::new(max_depth)?.get();
    cloud.check_unit_cube()?;
    let mut keys: Vec<u64> = cloud
        .points()
        .iter()
        .map(|p| morton([quantize(p.x, depth), quantize(p.y, depth), quantize(p.z, depth)], depth))
        .collect();
    keys.sort_unstable();
    keys.dedup();

    let mut levels = Vec::with_capacity(depth as usize);
    for l in 0..depth {
        let parent_shift = 3 * (depth - l);
        let child_shift = parent_shift - 3;
        let mut bytes: Vec<u8> = Vec::new();
        let mut current: Option<u64> = None;
        for &key in &keys {
            let parent = key >> parent_shift;
            let bit = 1u8 << ((key >> child_shift) & 7);
            if current == Some(parent) {
                *bytes.last_mut().unwrap() |= bit;
            } else {
                bytes.push(bit);
                current = Some(parent);
            }
        }
        levels.push(bytes);
    }
    Ok(Octree {
        levels,
        point_count: cloud.len() as u64,
    })
}

/// Cell centers of the occupied nodes at `depth`, breadth-first.
pub fn reconstruct(tree: &Octree, depth: DepthLevel) -> Result<PointCloud> {
    let cells = tree.cells(depth)?;
    let size = (1u64 << depth.get()) as f64;
    let points = cells
        .iter()
        .map(|c| {
            Point3::new(
                (f64::from(c[0]) + 0.5) / size,
                (f64::from(c[1]) + 0.5) / size,
                (f64::from(c[2]) + 0.5) / size,
            )
        })
        .collect();
    PointCloud::new_normalized(points)
}

pub fn truncate(tree: &Octree, depth: DepthLevel) -> Result<Octree> {
    tree.truncate(depth)
}

/// An inclusive range of candidate depth levels, `min..=max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "LevelBounds", into = "LevelBounds")]
pub struct CandidateLevels {
    min: DepthLevel,
    max: DepthLevel,
}

#[derive(Serialize, Deserialize)]
struct LevelBounds {
    min: u32,
    max: u32,
}

impl CandidateLevels {
    pub fn new(min: u32, max: u32) -> Result<Self> {
        let (lo, hi) = (DepthLevel::new(min)?, DepthLevel::new(max)?);
        if lo >= hi {
            return Err(Error::InvalidConfig(format!(
                "candidate levels {min}..{max} need at least two levels"
            )));
        }
        Ok(CandidateLevels { min: lo, max: hi })
    }

    pub fn min(self) -> DepthLevel {
        self.min
    }

    pub fn max(self) -> DepthLevel {
        self.max
    }

    /// Number of candidates, `K`.
    pub fn len(self) -> usize {
        (self.max.get() - self.min.get() + 1) as usize
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// The `i`-th candidate (0-based).
    pub fn level(self, i: usize) -> DepthLevel {
        assert!(i < self.len(), "candidate index {i} out of range");
        DepthLevel(self.min.0 + i as u8)
    }

    pub fn index_of(self, level: DepthLevel) -> Option<usize> {
        (self.min..=self.max)
            .contains(&level)
            .then(|| (level.get() - self.min.get()) as usize)
    }

    pub fn iter(self) -> impl Iterator<Item = DepthLevel> {
        (self.min.0..=self.max.0).map(DepthLevel)
    }
}

impl Default for CandidateLevels {
    fn default() -> Self {
        CandidateLevels::new(2, 8).unwrap()
    }
}

impl TryFrom<LevelBounds> for CandidateLevels {
    type Error = Error;

    fn try_from(b: LevelBounds) -> Result<Self> {
        CandidateLevels::new(b.min, b.max)
    }
}

impl From<CandidateLevels> for LevelBounds {
    fn from(c: CandidateLevels) -> Self {
        LevelBounds {
            min: c.min.get(),
            max: c.max.get(),
        }
    }
}

impl fmt::Display for CandidateLevels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.min, self.max)
    }
}

/// Parses `lo..hi` or `lo..=hi`; both ends are inclusive.
impl std::str::FromStr for CandidateLevels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("expected levels as lo..hi, got {s:?}"));
        let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
        CandidateLevels::new(lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_shape, normalize, ShapeKind};
    use proptest::prelude::*;

    fn d(v: u32) -> DepthLevel {
        DepthLevel::new(v).unwrap()
    }

    fn unit(points: &[(f64, f64, f64)]) -> PointCloud {
        PointCloud::new_normalized(points.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect())
            .unwrap()
    }

    #[test]
    fn single_point_levels() {
        let c = unit(&[(0.1, 0.1, 0.1)]);
        assert_eq!(build_octree(&c, 1).unwrap().levels(), &[vec![0x01]]);
        assert_eq!(build_octree(&c, 2).unwrap().levels(), &[vec![0x01], vec![0x01]]);
        let x = unit(&[(0.9, 0.1, 0.1)]);
        assert_eq!(build_octree(&x, 1).unwrap().levels(), &[vec![0x10]]);
    }

    #[test]
    fn all_octants() {
        let mut pts = Vec::new();
        for k in 0..8u32 {
            let at = |b: u32| 0.25 + 0.5 * f64::from(b);
            pts.push((at(k >> 2 & 1), at(k >> 1 & 1), at(k & 1)));
        }
        let tree = build_octree(&unit(&pts), 1).unwrap();
        assert_eq!(tree.levels(), &[vec![0xFF]]);
        let rec = reconstruct(&tree, d(1)).unwrap();
        assert_eq!(rec.len(), 8);
        for p in rec.points() {
            for v in p.coords() {
                assert!(v == 0.25 || v == 0.75);
            }
        }
    }

    #[test]
    fn reconstruct_center() {
        let tree = build_octree(&unit(&[(0.1, 0.1, 0.1)]), 1).unwrap();
        assert_eq!(reconstruct(&tree, d(1)).unwrap().points(), &[Point3::splat(0.25)]);
    }

    #[test]
    fn rejects_unnormalized_and_bad_depth() {
        let raw = PointCloud::new(vec![Point3::new(1.0, 0.5, 0.5)]).unwrap();
        assert!(matches!(build_octree(&raw, 3), Err(Error::NotNormalized { index: 0, .. })));
        let c = unit(&[(0.1, 0.1, 0.1)]);
        assert!(matches!(build_octree(&c, 0), Err(Error::DepthOutOfRange { .. })));
        assert!(matches!(build_octree(&c, 17), Err(Error::DepthOutOfRange { .. })));
        let t = build_octree(&c, 3).unwrap();
        assert!(matches!(t.truncate(d(4)), Err(Error::DepthOutOfRange { .. })));
    }

    #[test]
    fn duplicates_collapse_but_count() {
        let c = unit(&[(0.3, 0.3, 0.3), (0.3, 0.3, 0.3), (0.31, 0.3, 0.3)]);
        let t = build_octree(&c, 4).unwrap();
        assert_eq!(t.point_count(), 3);
        assert_eq!(reconstruct(&t, d(4)).unwrap().len(), 1);
    }

    #[test]
    fn max_depth_reconstruction_equals_voxel_centers() {
        let (c, _) = normalize(&generate_shape(ShapeKind::Torus, 500, 9, 0.01).cloud);
        let t = build_octree(&c, 5).unwrap();
        let mut got: Vec<[u64; 3]> = reconstruct(&t, d(5))
            .unwrap()
            .points()
            .iter()
            .map(|p| [p.x, p.y, p.z].map(|v| quantize(v, 5)))
            .collect();
        let mut want: Vec<[u64; 3]> =
            c.points().iter().map(|p| [p.x, p.y, p.z].map(|v| quantize(v, 5))).collect();
        want.sort_unstable();
        want.dedup();
        got.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn from_levels_validates() {
        assert!(Octree::from_levels(vec![vec![0x03], vec![0x01, 0x80]], 2).is_ok());
        assert!(Octree::from_levels(vec![vec![0x03], vec![0x01]], 2).is_err());
        assert!(Octree::from_levels(vec![vec![0x00]], 2).is_err());
        assert!(Octree::from_levels(vec![], 2).is_err());
    }

    fn cloud_strategy() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..200)
            .prop_map(|v| unit(&v))
    }

    proptest! {
        #[test]
        fn level_sizes_consistent(c in cloud_strategy(), depth in 1..=10u32) {
            let t = build_octree(&c, depth).unwrap();
            prop_assert_eq!(t.levels()[0].len(), 1);
            prop_assert!(Octree::from_levels(t.levels().to_vec(), t.point_count()).is_ok());
        }

        #[test]
        fn prefix_property(c in cloud_strategy(), n in 1..=12u32, k in 1..=12u32) {
            let k = k.min(n);
            let full = build_octree(&c, n).unwrap();
            let short = build_octree(&c, k).unwrap();
            prop_assert_eq!(full.truncate(d(k)).unwrap(), short.clone());
            prop_assert_eq!(reconstruct(&full, d(k)).unwrap(), reconstruct(&short, d(k)).unwrap());
        }

        #[test]
        fn resolution_bound(c in cloud_strategy(), depth in 1..=10u32) {
            let t = build_octree(&c, depth).unwrap();
            let rec = reconstruct(&t, d(depth)).unwrap();
            let bound = 3f64.sqrt() / 2.0 * 0.5f64.powi(depth as i32) * (1.0 + 1e-12);
            for p in c.points() {
                let best = rec.points().iter().map(|q| p.squared_distance(q)).fold(f64::INFINITY, f64::min);
                prop_assert!(best.sqrt() <= bound);
            }
        }

        #[test]
        fn idempotent_at_resolution(c in cloud_strategy(), depth in 1..=10u32) {
            let t = build_octree(&c, depth).unwrap();
            let again = build_octree(&reconstruct(&t, d(depth)).unwrap(), depth).unwrap();
            prop_assert_eq!(again.levels(), t.levels());
        }
    }

    #[test]
    fn candidate_levels() {
        let c: CandidateLevels = "2..8".parse().unwrap();
        assert_eq!(c, CandidateLevels::default());
        assert_eq!(c.len(), 7);
        assert_eq!(c.level(0), d(2));
        assert_eq!(c.level(6), d(8));
        assert_eq!(c.index_of(d(5)), Some(3));
        assert_eq!(c.index_of(d(1)), None);
        assert_eq!("3..=4".parse::<CandidateLevels>().unwrap().len(), 2);
        assert!("4..4".parse::<CandidateLevels>().is_err());
        assert!("0..4".parse::<CandidateLevels>().is_err());
        assert!("2-8".parse::<CandidateLevels>().is_err());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, r#"{"min":2,"max":8}"#);
        assert_eq!(serde_json::from_str::<CandidateLevels>(&json).unwrap(), c);
    }
}
