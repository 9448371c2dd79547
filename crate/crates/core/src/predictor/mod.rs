//! Per-cloud depth-level predictor.
//!
//! A PointNet-style network maps a cloud to a probability for each candidate
//! depth. Training perturbs the probabilities with Gumbel noise, selects the
//! argmax level in the forward pass and back-propagates through the
//! temperature softmax of the perturbed scores. The rate/loss costs of each
//! level are constants taken from a precomputed table.

mod gradcheck;

pub use gradcheck::{gradient_check, gradient_check_head, GradCheckBatch, GradCheckReport};

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{fnv1a, write_atomic};
use crate::nn::{argmax, softmax, softmax_backward, write_layers, Adam, BlobReader, PointNet};
use crate::octree::{CandidateLevels, DepthLevel};
use crate::pointcloud::{normalize, LabeledCloud, Point3, PointCloud};
use crate::tasks::{dataset_hash, RateLossTable};

pub const PREDICTOR_POINT_WIDTHS: [usize; 4] = [3, 64, 128, 256];
pub const PREDICTOR_HIDDEN: usize = 128;
/// Points kept by the canonical subsample fed to the predictor.
pub const PREDICTOR_POINTS: usize = 32;

const MODEL_MAGIC: [u8; 4] = *b"PMDL";
const MODEL_VERSION: u32 = 1;

/// Max-pooled per-point features of a cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature(pub Array1<f64>);

impl GlobalFeature {
    pub fn values(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous feature")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorModel {
    net: PointNet,
    levels: CandidateLevels,
}

impl PredictorModel {
    pub fn new(levels: CandidateLevels, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PointNet::new(
            &PREDICTOR_POINT_WIDTHS,
            &[PREDICTOR_POINT_WIDTHS[3], PREDICTOR_HIDDEN, levels.len()],
            &mut rng,
        );
        PredictorModel { net, levels }
    }

    /// Wraps explicit weights; the network must end in one output per level.
    pub fn from_pointnet(net: PointNet, levels: CandidateLevels) -> Result<Self> {
        if net.point_layers.first().map(|l| l.inputs()) != Some(3)
            || net.head_layers.is_empty()
            || net.output_width() != levels.len()
        {
            return Err(Error::InvalidConfig(format!(
                "predictor needs 3 inputs and {} outputs",
                levels.len()
            )));
        }
        Ok(PredictorModel { net, levels })
    }

    pub fn levels(&self) -> CandidateLevels {
        self.levels
    }

    /// Number of candidate levels, `K`.
    pub fn k(&self) -> usize {
        self.levels.len()
    }

    pub fn pointnet(&self) -> &PointNet {
        &self.net
    }

    pub fn pointnet_mut(&mut self) -> &mut PointNet {
        &mut self.net
    }

    /// Checkpoint: magic, version, `K`, minimum level, then the layers.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&self.levels.min().get().to_le_bytes());
        let point: Vec<_> = self.net.point_layers.iter().collect();
        let head: Vec<_> = self.net.head_layers.iter().collect();
        write_layers(&mut out, &point);
        write_layers(&mut out, &head);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::CorruptModel("bad predictor magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::CorruptModel(format!("unsupported version {version}")));
        }
        let k = r.u32()?;
        let min = r.u32()?;
        let levels = k
            .checked_add(min)
            .and_then(|end| CandidateLevels::new(min, end - 1).ok())
            .ok_or_else(|| Error::CorruptModel(format!("bad level range: K={k}, min={min}")))?;
        let point_layers = r.read_layers()?;
        let head_layers = r.read_layers()?;
        r.finish()?;
        let chained = point_layers
            .iter()
            .chain(&head_layers)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[0].outputs() == w[1].inputs());
        if !chained {
            return Err(Error::CorruptModel("layer shapes do not chain".into()));
        }
        PredictorModel::from_pointnet(
            PointNet {
                point_layers,
                head_layers,
            },
            levels,
        )
        .map_err(|e| Error::CorruptModel(e.to_string()))
    }

    pub fn weights_hash(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        PredictorModel::from_bytes(&bytes)
    }
}

/// Canonical subsample of a cloud in network coordinates: distinct points
/// sorted lexicographically, then `PREDICTOR_POINTS` evenly spaced picks.
/// The result depends only on the set of points, not their order or
/// multiplicity.
pub fn predictor_input(cloud: &PointCloud) -> Array2<f64> {
    let norm;
    let cloud = if cloud.is_normalized() {
        cloud
    } else {
        norm = normalize(cloud).0;
        &norm
    };
    let mut pts: Vec<Point3> = cloud.points().to_vec();
    let key = |a: &Point3, b: &Point3| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    };
    pts.sort_by(key);
    pts.dedup_by(|a, b| key(a, b).is_eq());
    let n = pts.len();
    let m = n.min(PREDICTOR_POINTS);
    let mut out = Array2::zeros((m, 3));
    for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let p = pts[r * n / m];
        row[0] = 2.0 * p.x - 1.0;
        row[1] = 2.0 * p.y - 1.0;
        row[2] = 2.0 * p.z - 1.0;
    }
    out
}

pub fn extract_feature(cloud: &PointCloud, model: &PredictorModel) -> GlobalFeature {
    GlobalFeature(model.net.pooled_feature(&predictor_input(cloud)))
}

/// Head layers followed by softmax.
pub fn forward_probs(feature: &GlobalFeature, model: &PredictorModel) -> Vec<f64> {
    softmax(model.net.head(&feature.0).as_slice().unwrap())
}

/// Standard Gumbel sample `-ln(-ln eps)` for `eps` in `(0, 1)`.
pub fn gumbel_noise(eps: f64) -> Result<f64> {
    if eps > 0.0 && eps < 1.0 {
        Ok(-(-eps.ln()).ln())
    } else {
        Err(Error::Domain(format!("gumbel input {eps} outside (0, 1)")))
    }
}

/// `k` uniform draws from the open interval `(0, 1)`.
pub fn open_uniforms<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k)
        .map(|_| loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOutcome {
    pub probs: Vec<f64>,
    /// `probs + G`.
    pub noisy: Vec<f64>,
    /// Index of the hard selection, the first maximum of `noisy`.
    pub hard: usize,
    /// `softmax(noisy / tau)`.
    pub relaxed: Vec<f64>,
    pub tau: f64,
}

impl SelectionOutcome {
    pub fn one_hot(&self) -> Vec<f64> {
        (0..self.probs.len())
            .map(|i| if i == self.hard { 1.0 } else { 0.0 })
            .collect()
    }

    /// Gradient of `costs · relaxed` with respect to `probs`.
    pub fn probs_grad(&self, costs: &[f64]) -> Vec<f64> {
        let mean: f64 = costs.iter().zip(&self.relaxed).map(|(c, h)| c * h).sum();
        self.relaxed
            .iter()
            .zip(costs)
            .map(|(h, c)| h * (c - mean) / self.tau)
            .collect()
    }
}

/// Gumbel-perturbed selection from uniform draws `eps`, one per level.
pub fn gumbel_select(p: &[f64], tau: f64, eps: &[f64]) -> Result<SelectionOutcome> {
    let noise = eps.iter().map(|&e| gumbel_noise(e)).collect::<Result<Vec<_>>>()?;
    gumbel_select_with_noise(p, tau, &noise)
}

/// Same as [`gumbel_select`] with the Gumbel values given directly; zero
/// noise reduces the hard choice to the argmax of `p`.
pub fn gumbel_select_with_noise(p: &[f64], tau: f64, noise: &[f64]) -> Result<SelectionOutcome> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    if noise.len() != p.len() {
        return Err(Error::Domain(format!("{} noise values for {} levels", noise.len(), p.len())));
    }
    let noisy: Vec<f64> = p.iter().zip(noise).map(|(a, g)| a + g).collect();
    let scaled: Vec<f64> = noisy.iter().map(|v| v / tau).collect();
    Ok(SelectionOutcome {
        probs: p.to_vec(),
        hard: argmax(&noisy),
        relaxed: softmax(&scaled),
        noisy,
        tau,
    })
}

/// `Σ (λ·bpp_i + L_i)·h_i`.
pub fn selection_loss(bpp: &[f64], loss: &[f64], h: &[f64], lambda: f64) -> f64 {
    bpp.iter()
        .zip(loss)
        .zip(h)
        .map(|((b, l), w)| (lambda * b + l) * w)
        .sum()
}

pub(crate) fn costs(bpp: &[f64], loss: &[f64], lambda: f64) -> Vec<f64> {
    bpp.iter().zip(loss).map(|(b, l)| lambda * b + l).collect()
}

/// Exponential interpolation from `start` at epoch 0 to `end` at the last epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub total_epochs: usize,
}

impl TemperatureSchedule {
    pub fn new(start: f64, end: f64, total_epochs: usize) -> Result<Self> {
        if !(start > 0.0 && end > 0.0 && start.is_finite() && end <= start) || total_epochs == 0 {
            return Err(Error::InvalidConfig(format!(
                "temperature schedule {start} -> {end} over {total_epochs} epochs"
            )));
        }
        Ok(TemperatureSchedule {
            start,
            end,
            total_epochs,
        })
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if self.total_epochs <= 1 || epoch == 0 {
            return self.start;
        }
        let last = self.total_epochs - 1;
        if epoch >= last {
            return self.end;
        }
        let t = epoch as f64 / last as f64;
        self.start * (self.end / self.start).powf(t)
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            start: 3.0,
            end: 0.001,
            total_epochs: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate from `lr_drop_epoch` onwards.
    pub lr_late: f64,
    pub lr_drop_epoch: usize,
    pub schedule: TemperatureSchedule,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            lambda: 1.0,
            epochs: 50,
            batch: 48,
            lr: 1e-3,
            lr_late: 1e-4,
            lr_drop_epoch: 40,
            schedule: TemperatureSchedule::default(),
            seed: 0,
        }
    }
}

impl PredictorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("epochs and batch must be positive".into()));
        }
        for lr in [self.lr, self.lr_late] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!("learning rate {lr} must be positive")));
            }
        }
        TemperatureSchedule::new(self.schedule.start, self.schedule.end, self.schedule.total_epochs)
            .map(|_| ())
    }
}

/// Per-epoch means over the training set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Cost of the hard (noisy argmax) selection.
    pub hard_objective: Vec<f64>,
    /// Relaxed objective `costs · h̃`.
    pub relaxed_objective: Vec<f64>,
    /// Cost of the noise-free argmax of `p`.
    pub greedy_objective: Vec<f64>,
    pub temperature: Vec<f64>,
}

/// Trains a fresh predictor for `table`'s candidate levels. Only predictor
/// weights change; the table's rate and loss values are constants.
pub fn train_predictor(
    dataset: &[LabeledCloud],
    table: &RateLossTable,
    config: &PredictorTrainConfig,
) -> Result<(PredictorModel, TrainingLog)> {
    config.validate()?;
    if table.len() != dataset.len() {
        return Err(Error::TableMismatch(format!(
            "table has {} samples, dataset has {}",
            table.len(),
            dataset.len()
        )));
    }
    if table.meta().dataset_hash != format!("{:016x}", dataset_hash(dataset)) {
        return Err(Error::TableMismatch("table was built from a different dataset".into()));
    }
    let inputs: Vec<Array2<f64>> = dataset.iter().map(|s| predictor_input(&s.cloud)).collect();
    let costs: Vec<Vec<f64>> = (0..table.len())
        .map(|i| costs(&table.bpp_vec(i), &table.loss_vec(i), config.lambda))
        .collect();
    train_on_costs(&inputs, &costs, table.levels(), config)
}

/// Training loop over precomputed inputs and per-level costs.
pub fn train_on_costs(
    inputs: &[Array2<f64>],
    costs: &[Vec<f64>],
    levels: CandidateLevels,
    config: &PredictorTrainConfig,
) -> Result<(PredictorModel, TrainingLog)> {
    config.validate()?;
    let k = levels.len();
    if inputs.len() != costs.len() || inputs.is_empty() {
        return Err(Error::TableMismatch(format!(
            "{} inputs for {} cost rows",
            inputs.len(),
            costs.len()
        )));
    }
    if let Some(i) = costs.iter().position(|c| c.len() != k) {
        return Err(Error::TableMismatch(format!("sample {i} lacks entries for {k} levels")));
    }
    let mut model = PredictorModel::new(levels, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = TrainingLog::default();
    let n = inputs.len() as f64;
    for epoch in 0..config.epochs {
        let tau = config.schedule.at(epoch);
        adam.lr = if epoch < config.lr_drop_epoch {
            config.lr
        } else {
            config.lr_late
        };
        let (mut hard, mut relaxed, mut greedy) = (0.0, 0.0, 0.0);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch) {
            let mut grad = model.net.zero_grad();
            for &i in batch {
                let trace = model.net.forward_trace(&inputs[i]);
                let p = softmax(trace.logits.as_slice().unwrap());
                let eps = open_uniforms(&mut rng, k);
                let sel = gumbel_select(&p, tau, &eps)?;
                let c = &costs[i];
                hard += c[sel.hard];
                relaxed += c.iter().zip(&sel.relaxed).map(|(a, b)| a * b).sum::<f64>();
                greedy += c[argmax(&p)];
                let dlogits = softmax_backward(&p, &sel.probs_grad(c));
                model.net.backward(&trace, &Array1::from(dlogits), &mut grad);
            }
            grad.scale(1.0 / batch.len() as f64);
            adam.step_pointnet(&mut model.net, &grad);
        }
        log.hard_objective.push(hard / n);
        log.relaxed_objective.push(relaxed / n);
        log.greedy_objective.push(greedy / n);
        log.temperature.push(tau);
    }
    Ok((model, log))
}

/// Candidate level with the highest probability; ties go to the lower level.
pub fn predict_depth(model: &PredictorModel, cloud: &PointCloud) -> DepthLevel {
    model.levels.level(predict_index(model, &predictor_input(cloud)))
}

/// Candidate index chosen for a precomputed predictor input.
pub fn predict_index(model: &PredictorModel, input: &Array2<f64>) -> usize {
    let p = softmax(model.net.logits(input).as_slice().unwrap());
    argmax(&p)
}

/// Training metadata written next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub lambda: f64,
    pub seed: u64,
    pub schedule: TemperatureSchedule,
    pub levels: CandidateLevels,
    pub config: PredictorTrainConfig,
    pub table_dataset_hash: String,
    pub weights_hash: String,
}

/// Writes `path` and `path.json`.
pub fn save_checkpoint(path: &Path, model: &PredictorModel, meta: &CheckpointMeta) -> Result<()> {
    model.save(path)?;
    let json = serde_json::to_vec_pretty(meta).expect("meta serializes");
    write_atomic(&sidecar_path(path), &json)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
