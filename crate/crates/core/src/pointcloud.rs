//! Point cloud data model: ingestion, normalization into the unit cube and
//! the synthetic labeled shapes used to train and evaluate task networks.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// Shrink applied on top of the max-edge scale so the far corner stays inside `[0,1)`.
pub const NORMALIZE_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Point3::new(v, v, v)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn squared_distance(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    fn of(points: &[Point3]) -> Aabb {
        let mut min = Point3::splat(f64::INFINITY);
        let mut max = Point3::splat(f64::NEG_INFINITY);
        for p in points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            min.z = min.z.min(p.z);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
            max.z = max.z.max(p.z);
        }
        Aabb { min, max }
    }

    pub fn extent(&self) -> Point3 {
        Point3::new(
            self.max.x - self.min.x,
            self.max.y - self.min.y,
            self.max.z - self.min.z,
        )
    }

    /// Longest edge of the box.
    pub fn max_edge(&self) -> f64 {
        let e = self.extent();
        e.x.max(e.y).max(e.z)
    }
}

/// An ordered, non-empty set of finite points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    bbox: Aabb,
    normalized: bool,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Domain(format!("point {i} has a non-finite coordinate")));
        }
        let bbox = Aabb::of(&points);
        Ok(PointCloud {
            points,
            bbox,
            normalized: false,
        })
    }

    /// Wraps points already known to lie in `[0,1)^3`.
    pub fn new_normalized(points: Vec<Point3>) -> Result<Self> {
        let mut cloud = PointCloud::new(points)?;
        cloud.check_unit_cube()?;
        cloud.normalized = true;
        Ok(cloud)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub(crate) fn check_unit_cube(&self) -> Result<()> {
        let inside = |v: f64| (0.0..1.0).contains(&v);
        match self
            .points
            .iter()
            .position(|p| !(inside(p.x) && inside(p.y) && inside(p.z)))
        {
            Some(index) => {
                let p = self.points[index];
                Err(Error::NotNormalized {
                    index,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                })
            }
            None => Ok(()),
        }
    }
}

/// Uniform scale plus translation mapping raw coordinates into the unit cube:
/// `normalized = (raw - offset) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub offset: Point3,
    pub scale: f64,
}

impl NormalizationTransform {
    pub const IDENTITY: NormalizationTransform = NormalizationTransform {
        offset: Point3::new(0.0, 0.0, 0.0),
        scale: 1.0,
    };

    pub fn apply(&self, p: Point3) -> Point3 {
        Point3::new(
            (p.x - self.offset.x) * self.scale,
            (p.y - self.offset.y) * self.scale,
            (p.z - self.offset.z) * self.scale,
        )
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        Point3::new(
            p.x / self.scale + self.offset.x,
            p.y / self.scale + self.offset.y,
            p.z / self.scale + self.offset.z,
        )
    }

    /// Maps a normalized cloud back to raw coordinates.
    pub fn denormalize(&self, cloud: &PointCloud) -> PointCloud {
        let points: Vec<Point3> = cloud.points.iter().map(|&p| self.invert(p)).collect();
        let bbox = Aabb::of(&points);
        PointCloud {
            points,
            bbox,
            normalized: false,
        }
    }
}

/// Translates by the bounding-box minimum and scales uniformly by
/// `1 / (max_edge * (1 + NORMALIZE_EPSILON))`.
///
/// A cloud whose points all coincide maps to the single point (0.5, 0.5, 0.5)
/// with scale 1; the offset is chosen so that the inverse recovers the input.
pub fn normalize(cloud: &PointCloud) -> (PointCloud, NormalizationTransform) {
    let bbox = cloud.bbox;
    let max_edge = bbox.max_edge();
    let transform = if max_edge > 0.0 {
        NormalizationTransform {
            offset: bbox.min,
            scale: 1.0 / (max_edge * (1.0 + NORMALIZE_EPSILON)),
        }
    } else {
        NormalizationTransform {
            offset: Point3::new(bbox.min.x - 0.5, bbox.min.y - 0.5, bbox.min.z - 0.5),
            scale: 1.0,
        }
    };
    let points: Vec<Point3> = cloud
        .points
        .iter()
        .map(|&p| {
            let q = transform.apply(p);
            // Guard against a coordinate rounding up to exactly 1.0.
            Point3::new(clamp_unit(q.x), clamp_unit(q.y), clamp_unit(q.z))
        })
        .collect();
    let bbox = Aabb::of(&points);
    (
        PointCloud {
            points,
            bbox,
            normalized: true,
        },
        transform,
    )
}

fn clamp_unit(v: f64) -> f64 {
    const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    v.clamp(0.0, BELOW_ONE)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
}

impl CloudFormat {
    /// Guesses the format from a file extension (`.xyz`, `.ply`).
    pub fn from_path(path: &Path) -> Option<CloudFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" => Some(CloudFormat::Xyz),
            "ply" => Some(CloudFormat::PlyAscii),
            _ => None,
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    match format {
        CloudFormat::Xyz => parse_xyz(&text, &name),
        CloudFormat::PlyAscii => parse_ply(&text, &name),
    }
}

pub fn parse_xyz(text: &str, source: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = || format!("{source}:{}", lineno + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                loc(),
                format!("expected 3 coordinates, found {}", fields.len()),
            ));
        }
        points.push(parse_point(&fields, loc)?);
    }
    PointCloud::new(points)
}

fn parse_point(fields: &[&str], loc: impl Fn() -> String) -> Result<Point3> {
    let mut c = [0.0f64; 3];
    for (slot, token) in c.iter_mut().zip(fields) {
        let v: f64 = token
            .parse()
            .map_err(|_| Error::parse(loc(), format!("non-numeric token {token:?}")))?;
        if !v.is_finite() {
            return Err(Error::parse(loc(), format!("non-finite coordinate {token:?}")));
        }
        *slot = v;
    }
    Ok(Point3::new(c[0], c[1], c[2]))
}

pub fn parse_ply(text: &str, source: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    let header_err = |n: usize, msg: String| Error::parse(format!("{source}:{}", n + 1), msg);

    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(header_err(0, "missing 'ply' magic".into())),
    }

    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut properties: Vec<String> = Vec::new();
    let mut saw_format = false;
    let mut header_done = false;

    for (n, raw) in lines.by_ref() {
        let line = raw.trim();
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                if words.next() != Some("ascii") {
                    return Err(header_err(n, format!("unsupported format line {line:?}")));
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = words.next().unwrap_or("");
                let count = words
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| header_err(n, format!("bad element line {line:?}")))?;
                in_vertex = name == "vertex";
                if in_vertex {
                    if vertex_count.is_some() {
                        return Err(header_err(n, "duplicate vertex element".into()));
                    }
                    vertex_count = Some(count);
                } else if vertex_count.is_none() {
                    return Err(header_err(n, format!("element {name:?} precedes vertex")));
                }
            }
            Some("property") => {
                if in_vertex {
                    let kind = words.next().unwrap_or("");
                    if kind == "list" {
                        return Err(header_err(n, "list property on vertex element".into()));
                    }
                    let name = words
                        .next()
                        .ok_or_else(|| header_err(n, format!("bad property line {line:?}")))?;
                    properties.push(name.to_string());
                }
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(header_err(n, format!("unknown header keyword {other:?}"))),
        }
    }

    if !header_done || !saw_format {
        return Err(header_err(0, "incomplete PLY header".into()));
    }
    let count = vertex_count.ok_or_else(|| header_err(0, "no vertex element".into()))?;
    let index_of = |name: &str| properties.iter().position(|p| p == name);
    let (ix, iy, iz) = match (index_of("x"), index_of("y"), index_of("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(header_err(0, "vertex element lacks x/y/z properties".into())),
    };

    let mut points = Vec::with_capacity(count);
    for (n, raw) in lines {
        if points.len() == count {
            break;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let loc = || format!("{source}:{}", n + 1);
        if fields.len() != properties.len() {
            return Err(Error::parse(
                loc(),
                format!(
                    "vertex has {} values, header declares {}",
                    fields.len(),
                    properties.len()
                ),
            ));
        }
        points.push(parse_point(&[fields[ix], fields[iy], fields[iz]], loc)?);
    }
    if points.len() != count {
        return Err(header_err(
            0,
            format!("header declares {count} vertices, found {}", points.len()),
        ));
    }
    PointCloud::new(points)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in cloud.points() {
        out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    out
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48 + 128);
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in cloud.points() {
        out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    out
}

/// Writes a cloud atomically; shortest round-trip decimal formatting means
/// `load_cloud` returns the identical points.
pub fn write_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let text = match format {
        CloudFormat::Xyz => format_xyz(cloud),
        CloudFormat::PlyAscii => format_ply(cloud),
    };
    fsutil::write_atomic(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    SphereSurface,
    CubeSurface,
    Plane,
    Torus,
    TwoSpheres,
    GaussianBlob,
}

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.4;
pub const TWIN_RADIUS: f64 = 0.5;
pub const TWIN_OFFSET: f64 = 0.8;
pub const BLOB_SIGMA: f64 = 0.5;

/// Number of distinct part labels produced by [`ShapeKind::part_label`].
pub const PART_COUNT: usize = 3;

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::SphereSurface,
        ShapeKind::CubeSurface,
        ShapeKind::Plane,
        ShapeKind::Torus,
        ShapeKind::TwoSpheres,
        ShapeKind::GaussianBlob,
    ];

    pub fn index(self) -> usize {
        ShapeKind::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<ShapeKind> {
        ShapeKind::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::SphereSurface => "sphere-surface",
            ShapeKind::CubeSurface => "cube-surface",
            ShapeKind::Plane => "plane",
            ShapeKind::Torus => "torus",
            ShapeKind::TwoSpheres => "two-spheres",
            ShapeKind::GaussianBlob => "gaussian-blob",
        }
    }

    /// Part id of a raw-space point, taken from the ideal surface component
    /// nearest to it. Used as the per-point segmentation target.
    pub fn part_label(self, p: Point3) -> usize {
        match self {
            ShapeKind::SphereSurface => usize::from(p.z >= 0.0),
            ShapeKind::CubeSurface => {
                let (ax, ay, az) = (p.x.abs(), p.y.abs(), p.z.abs());
                if ax >= ay && ax >= az {
                    0
                } else if ay >= az {
                    1
                } else {
                    2
                }
            }
            ShapeKind::Plane => 0,
            ShapeKind::Torus => usize::from(p.x.hypot(p.y) >= TORUS_MAJOR),
            ShapeKind::TwoSpheres => usize::from(p.x >= 0.0),
            ShapeKind::GaussianBlob => usize::from(p.norm() >= BLOB_SIGMA),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shape kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    pub seed: u64,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
    pub params: ShapeParams,
}

/// Samples `n` points uniformly on the ideal surface of `kind`, then adds
/// isotropic Gaussian noise. Deterministic in all arguments.
pub fn generate_shape(kind: ShapeKind, n: usize, seed: u64, noise_sigma: f64) -> LabeledCloud {
    assert!(n >= 8, "generate_shape needs at least 8 points");
    assert!(
        noise_sigma >= 0.0 && noise_sigma.is_finite(),
        "noise_sigma must be finite and non-negative"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let p = match kind {
            ShapeKind::SphereSurface => unit_sphere(&mut rng),
            ShapeKind::CubeSurface => {
                let face = rng.random_range(0..6usize);
                let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
                let u = rng.random_range(-1.0..1.0);
                let v = rng.random_range(-1.0..1.0);
                match face / 2 {
                    0 => Point3::new(sign, u, v),
                    1 => Point3::new(u, sign, v),
                    _ => Point3::new(u, v, sign),
                }
            }
            ShapeKind::Plane => {
                Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0)
            }
            ShapeKind::Torus => torus(&mut rng),
            ShapeKind::TwoSpheres => {
                let s = unit_sphere(&mut rng);
                let cx = if rng.random::<bool>() { TWIN_OFFSET } else { -TWIN_OFFSET };
                Point3::new(cx + TWIN_RADIUS * s.x, TWIN_RADIUS * s.y, TWIN_RADIUS * s.z)
            }
            ShapeKind::GaussianBlob => {
                let g = Normal::new(0.0, BLOB_SIGMA).unwrap();
                Point3::new(g.sample(&mut rng), g.sample(&mut rng), g.sample(&mut rng))
            }
        };
        points.push(p);
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).unwrap();
        for p in &mut points {
            p.x += noise.sample(&mut rng);
            p.y += noise.sample(&mut rng);
            p.z += noise.sample(&mut rng);
        }
    }
    LabeledCloud {
        cloud: PointCloud::new(points).expect("generated points are finite"),
        label: kind.index(),
        params: ShapeParams {
            kind,
            seed,
            noise_sigma,
        },
    }
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let y: f64 = StandardNormal.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        let r = (x * x + y * y + z * z).sqrt();
        if r > 1e-9 {
            return Point3::new(x / r, y / r, z / r);
        }
    }
}

fn torus(rng: &mut ChaCha8Rng) -> Point3 {
    // Area element is proportional to (R + r cos(phi)); rejection-sample phi.
    loop {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let accept = rng.random::<f64>() * (TORUS_MAJOR + TORUS_MINOR);
        let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
        if accept <= ring {
            return Point3::new(ring * theta.cos(), ring * theta.sin(), TORUS_MINOR * phi.sin());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    pub per_class: usize,
    pub points: usize,
    pub max_noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: ShapeKind::ALL.len(),
            per_class: 300,
            points: 1024,
            max_noise: 0.03,
            seed: 1,
        }
    }
}

/// Generates `per_class` clouds for each of the first `classes` shape kinds,
/// interleaved by class. Each cloud gets its own seed and a noise level drawn
/// uniformly from `[0, max_noise]`.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<LabeledCloud>> {
    if config.classes < 2 || config.classes > ShapeKind::ALL.len() {
        return Err(Error::InvalidConfig(format!(
            "classes must be in 2..={}, got {}",
            ShapeKind::ALL.len(),
            config.classes
        )));
    }
    if config.points < 8 || config.per_class == 0 {
        return Err(Error::InvalidConfig(
            "need at least 8 points and one cloud per class".into(),
        ));
    }
    if !(config.max_noise >= 0.0 && config.max_noise.is_finite()) {
        return Err(Error::InvalidConfig("max_noise must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.classes * config.per_class);
    for _ in 0..config.per_class {
        for kind in &ShapeKind::ALL[..config.classes] {
            let seed = rng.random::<u64>();
            let noise = config.max_noise * rng.random::<f64>();
            out.push(generate_shape(*kind, config.points, seed, noise));
        }
    }
    Ok(out)
}
