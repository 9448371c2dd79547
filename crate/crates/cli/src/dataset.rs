//! On-disk dataset directory: `manifest.json` plus `points.f64`, a flat
//! little-endian array of xyz triples. Coordinates round-trip bit-exactly.

use std::fs;
use std::path::Path;

use pcmp_core::fsutil::write_atomic;
use pcmp_core::pointcloud::{DatasetConfig, LabeledCloud, Point3, PointCloud, ShapeParams};
use pcmp_core::tasks::dataset_hash;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const POINTS: &str = "points.f64";

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleEntry {
    pub label: usize,
    pub params: ShapeParams,
    /// First point index in `points.f64`.
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub dataset_hash: String,
    pub samples: Vec<SampleEntry>,
    pub run: serde_json::Value,
}

pub fn save(dir: &Path, dataset: &[LabeledCloud], config: &DatasetConfig, run: serde_json::Value) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    let mut samples = Vec::with_capacity(dataset.len());
    let mut offset = 0;
    for s in dataset {
        for p in s.cloud.points() {
            for v in p.coords() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        samples.push(SampleEntry {
            label: s.label,
            params: s.params,
            offset,
            count: s.cloud.len(),
        });
        offset += s.cloud.len();
    }
    let manifest = Manifest {
        config: config.clone(),
        dataset_hash: format!("{:016x}", dataset_hash(dataset)),
        samples,
        run,
    };
    write_atomic(&dir.join(POINTS), &bytes)?;
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Vec<LabeledCloud>, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("parse error in {}: {e}", path.display())))?;
    let path = dir.join(POINTS);
    let bytes = fs::read(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if bytes.len() % 24 != 0 {
        return Err(CliError::data(format!("{} is not a whole number of points", path.display())));
    }
    let coord = |i: usize| f64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    let total = bytes.len() / 24;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for (i, e) in manifest.samples.iter().enumerate() {
        if e.offset.checked_add(e.count).is_none_or(|end| end > total) {
            return Err(CliError::data(format!("sample {i} runs past the end of {POINTS}")));
        }
        let points = (e.offset..e.offset + e.count)
            .map(|j| Point3::new(coord(3 * j), coord(3 * j + 1), coord(3 * j + 2)))
            .collect();
        out.push(LabeledCloud {
            cloud: PointCloud::new(points)?,
            label: e.label,
            params: e.params,
        });
    }
    let hash = format!("{:016x}", dataset_hash(&out));
    if hash != manifest.dataset_hash {
        return Err(CliError::data(format!(
            "dataset hash {hash} does not match manifest {}",
            manifest.dataset_hash
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcmp_core::pointcloud::generate_dataset;

    #[test]
    fn round_trips_exactly() {
        let config = DatasetConfig {
            per_class: 2,
            points: 50,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &data, &config, serde_json::Value::Null).unwrap();
        assert_eq!(load(dir.path()).unwrap(), data);
    }

    #[test]
    fn detects_tampering() {
        let config = DatasetConfig {
            per_class: 1,
            points: 20,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &data, &config, serde_json::Value::Null).unwrap();
        let p = dir.path().join(POINTS);
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(load(dir.path()).is_err());
        fs::write(&p, &bytes[..bytes.len() - 24]).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
