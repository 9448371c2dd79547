//! Frozen task networks and the per-sample rate/loss tables built from them.
//!
//! Two toy tasks are provided: whole-cloud shape classification and per-point
//! part segmentation. Both networks read normalized clouds mapped to
//! `[-1, 1)^3` and are frozen once trained.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{bits_per_point, decode_cloud, CodecConfig};
use crate::error::{Error, Result};
use crate::fsutil::{fnv1a, write_atomic, Fnv1a};
use crate::nn::{argmax, relu, softmax, write_layers, Adam, BlobReader, Dense, PointNet, PointNetGrad};
use crate::octree::{reconstruct, CandidateLevels};
use crate::pointcloud::{
    normalize, LabeledCloud, NormalizationTransform, Point3, PointCloud, ShapeKind, PART_COUNT,
};

const MODEL_MAGIC: [u8; 4] = *b"PTSK";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Segmentation => "segmentation",
        }
    }

    fn code(self) -> u8 {
        match self {
            TaskKind::Classification => 0,
            TaskKind::Segmentation => 1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "cls" => Ok(TaskKind::Classification),
            "segmentation" | "seg" => Ok(TaskKind::Segmentation),
            _ => Err(Error::InvalidConfig(format!("unknown task {s:?}"))),
        }
    }
}

/// Loss and metric of one task evaluation. `score` is top-1 correctness
/// (0 or 1) for classification and the instance mIoU for segmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskOutcome {
    pub loss: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Points drawn per cloud at each step.
    pub subset: usize,
    pub seed: u64,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        TaskTrainConfig {
            epochs: 12,
            batch: 32,
            lr: 2e-3,
            subset: 256,
            seed: 0,
        }
    }
}

impl TaskTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.subset == 0 {
            return Err(Error::InvalidConfig("epochs, batch and subset must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} is not positive", self.lr)));
        }
        Ok(())
    }
}

/// Maps a cloud into network coordinates, normalizing raw clouds first.
pub fn network_input(cloud: &PointCloud) -> Array2<f64> {
    if cloud.is_normalized() {
        centered(cloud.points())
    } else {
        centered(normalize(cloud).0.points())
    }
}

fn centered(points: &[Point3]) -> Array2<f64> {
    let mut m = Array2::zeros((points.len(), 3));
    for (mut row, p) in m.axis_iter_mut(Axis(0)).zip(points) {
        row[0] = 2.0 * p.x - 1.0;
        row[1] = 2.0 * p.y - 1.0;
        row[2] = 2.0 * p.z - 1.0;
    }
    m
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy of `softmax(logits)` against `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    (log_sum_exp(logits) - logits[label]).max(0.0)
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

pub const CLASSIFIER_POINT_WIDTHS: [usize; 3] = [3, 32, 64];
pub const CLASSIFIER_HIDDEN: usize = 32;

/// Shape classifier: shared per-point MLP, max-pool, two FC layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskNetwork {
    net: PointNet,
    classes: usize,
    frozen: bool,
}

impl TaskNetwork {
    /// Randomly initialized, unfrozen classifier.
    pub fn new(classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidDataset(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PointNet::new(
            &CLASSIFIER_POINT_WIDTHS,
            &[CLASSIFIER_POINT_WIDTHS[2], CLASSIFIER_HIDDEN, classes],
            &mut rng,
        );
        Ok(TaskNetwork {
            net,
            classes,
            frozen: false,
        })
    }

    /// Wraps explicit weights. The result is unfrozen.
    pub fn from_pointnet(net: PointNet) -> Result<Self> {
        let classes = net.output_width();
        if classes < 2 || net.point_layers.first().map(Dense::inputs) != Some(3) {
            return Err(Error::InvalidConfig("classifier needs 3 inputs and >= 2 outputs".into()));
        }
        Ok(TaskNetwork {
            net,
            classes,
            frozen: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn pointnet(&self) -> &PointNet {
        &self.net
    }

    pub fn logits(&self, cloud: &PointCloud) -> Vec<f64> {
        self.net.logits(&network_input(cloud)).to_vec()
    }

    pub fn probs(&self, cloud: &PointCloud) -> Vec<f64> {
        softmax(&self.logits(cloud))
    }

    pub fn predict(&self, cloud: &PointCloud) -> usize {
        argmax(&self.logits(cloud))
    }

    /// Cross-entropy against `label` plus top-1 correctness.
    pub fn task_loss(&self, cloud: &PointCloud, label: usize) -> TaskOutcome {
        let logits = self.logits(cloud);
        TaskOutcome {
            loss: cross_entropy(&logits, label),
            score: if argmax(&logits) == label { 1.0 } else { 0.0 },
        }
    }

    pub fn accuracy(&self, dataset: &[LabeledCloud]) -> f64 {
        if dataset.is_empty() {
            return 0.0;
        }
        let hits = dataset
            .iter()
            .filter(|s| self.predict(&s.cloud) == s.label)
            .count();
        hits as f64 / dataset.len() as f64
    }
}

fn class_count(dataset: &[LabeledCloud]) -> Result<usize> {
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("dataset is empty".into()));
    }
    let classes = dataset.iter().map(|s| s.label).max().unwrap() + 1;
    let mut seen = vec![false; classes];
    for s in dataset {
        seen[s.label] = true;
    }
    let distinct = seen.iter().filter(|&&b| b).count();
    if distinct < 2 {
        return Err(Error::InvalidDataset(format!(
            "need at least 2 classes, found {distinct}"
        )));
    }
    Ok(classes)
}

fn subsample(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let n = x.nrows();
    if n <= k {
        return (x.clone(), (0..n).collect());
    }
    let mut idx = index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    (x.select(Axis(0), &idx), idx)
}

/// Trains a classifier with cross-entropy on the raw clouds, then freezes it.
pub fn train_task_network(
    dataset: &[LabeledCloud],
    config: &TaskTrainConfig,
) -> Result<TaskNetwork> {
    config.validate()?;
    let classes = class_count(dataset)?;
    let mut model = TaskNetwork::new(classes, config.seed)?;
    let inputs: Vec<Array2<f64>> = dataset.iter().map(|s| network_input(&s.cloud)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch) {
            let mut grad = model.net.zero_grad();
            for &i in batch {
                let (x, _) = subsample(&inputs[i], config.subset, &mut rng);
                let trace = model.net.forward_trace(&x);
                let mut d = Array1::from(softmax(trace.logits.as_slice().unwrap()));
                d[dataset[i].label] -= 1.0;
                model.net.backward(&trace, &d, &mut grad);
            }
            grad.scale(1.0 / batch.len() as f64);
            adam.step_pointnet(&mut model.net, &grad);
        }
    }
    model.freeze();
    Ok(model)
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

pub const SEGMENTER_HIDDEN: usize = 64;

/// Per-point part labels of a cloud given in the generator's raw frame.
pub fn part_labels(kind: ShapeKind, raw: &[Point3]) -> Vec<usize> {
    raw.iter().map(|&p| kind.part_label(p)).collect()
}

/// Per-point part segmenter: the classifier's encoder, with each point's
/// local feature concatenated to the pooled global feature and fed through
/// a per-point head.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationNetwork {
    encoder: PointNet,
    head: Vec<Dense>,
    frozen: bool,
}

struct SegTrace {
    point: crate::nn::PointNetTrace,
    head_inputs: Vec<Array2<f64>>,
    head_pre: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl SegmentationNetwork {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = PointNet::new(&CLASSIFIER_POINT_WIDTHS, &[], &mut rng);
        let width = CLASSIFIER_POINT_WIDTHS[2];
        let head = vec![
            Dense::new(2 * width, SEGMENTER_HIDDEN, &mut rng),
            Dense::new(SEGMENTER_HIDDEN, PART_COUNT, &mut rng),
        ];
        SegmentationNetwork {
            encoder,
            head,
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn trace(&self, x: &Array2<f64>) -> SegTrace {
        let point = self.encoder.forward_trace(x);
        let last = point.point_pre.len() - 1;
        let local = relu(point.point_pre[last].clone());
        let width = local.ncols();
        let mut h = Array2::zeros((x.nrows(), 2 * width));
        h.slice_mut(s![.., ..width]).assign(&local);
        h.slice_mut(s![.., width..]).assign(&point.feature.broadcast((x.nrows(), width)).unwrap());
        let mut head_inputs = Vec::with_capacity(self.head.len());
        let mut head_pre = Vec::with_capacity(self.head.len());
        for (i, layer) in self.head.iter().enumerate() {
            let z = layer.forward(&h);
            head_inputs.push(h);
            h = if i + 1 < self.head.len() { relu(z.clone()) } else { z.clone() };
            head_pre.push(z);
        }
        SegTrace {
            point,
            head_inputs,
            head_pre,
            logits: h,
        }
    }

    /// Per-point part logits, one row per point.
    pub fn logits(&self, cloud: &PointCloud) -> Array2<f64> {
        self.trace(&network_input(cloud)).logits
    }

    pub fn predict(&self, cloud: &PointCloud) -> Vec<usize> {
        self.logits(cloud)
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().unwrap()))
            .collect()
    }

    /// Mean per-point cross-entropy and the instance mIoU against `labels`.
    pub fn task_loss(&self, cloud: &PointCloud, labels: &[usize]) -> TaskOutcome {
        assert_eq!(cloud.len(), labels.len(), "one label per point");
        let logits = self.logits(cloud);
        let mut loss = 0.0;
        let mut pred = Vec::with_capacity(labels.len());
        for (row, &y) in logits.rows().into_iter().zip(labels) {
            let r = row.as_slice().unwrap();
            loss += cross_entropy(r, y);
            pred.push(argmax(r));
        }
        TaskOutcome {
            loss: loss / labels.len() as f64,
            score: mean_iou(&pred, labels, PART_COUNT),
        }
    }

    fn backward(&self, t: &SegTrace, labels: &[usize], grad: &mut SegGrad) {
        let m = labels.len() as f64;
        let mut dz = t.logits.clone();
        for (mut row, &y) in dz.rows_mut().into_iter().zip(labels) {
            let p = softmax(row.as_slice().unwrap());
            for (d, (k, pk)) in row.iter_mut().zip(p.into_iter().enumerate()) {
                *d = (pk - if k == y { 1.0 } else { 0.0 }) / m;
            }
        }
        for i in (0..self.head.len()).rev() {
            let g = &mut grad.head[i];
            g.weight += &dz.t().dot(&t.head_inputs[i]);
            g.bias += &dz.sum_axis(Axis(0));
            let mut da = dz.dot(&self.head[i].weight);
            if i > 0 {
                da.zip_mut_with(&t.head_pre[i - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            dz = da;
        }
        let width = dz.ncols() / 2;
        let mut dlocal = dz.slice(s![.., ..width]).to_owned();
        let dglobal = dz.slice(s![.., width..]).sum_axis(Axis(0));
        for (f, (&p, &d)) in t.point.argmax.iter().zip(dglobal.iter()).enumerate() {
            dlocal[[p, f]] += d;
        }
        let top = t.point.point_pre.len() - 1;
        self.encoder.backward_points_from(&t.point, top, dlocal, &mut grad.encoder);
    }

    fn zero_grad(&self) -> SegGrad {
        SegGrad {
            encoder: self.encoder.zero_grad(),
            head: self.head.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect(),
        }
    }

    fn layers(&self) -> Vec<&Dense> {
        self.encoder.point_layers.iter().chain(&self.head).collect()
    }
}

struct SegGrad {
    encoder: PointNetGrad,
    head: Vec<Dense>,
}

/// Mean intersection-over-union over the parts present in either labelling.
pub fn mean_iou(pred: &[usize], truth: &[usize], parts: usize) -> f64 {
    let mut inter = vec![0usize; parts];
    let mut union = vec![0usize; parts];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let present: Vec<f64> = (0..parts)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Trains the part segmenter on the raw clouds, then freezes it.
pub fn train_segmentation_network(
    dataset: &[LabeledCloud],
    config: &TaskTrainConfig,
) -> Result<SegmentationNetwork> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("dataset is empty".into()));
    }
    let mut model = SegmentationNetwork::new(config.seed);
    let inputs: Vec<Array2<f64>> = dataset.iter().map(|s| network_input(&s.cloud)).collect();
    let labels: Vec<Vec<usize>> = dataset
        .iter()
        .map(|s| part_labels(s.params.kind, s.cloud.points()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e9);
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch) {
            let mut grad = model.zero_grad();
            for &i in batch {
                let (x, idx) = subsample(&inputs[i], config.subset, &mut rng);
                let y: Vec<usize> = idx.iter().map(|&j| labels[i][j]).collect();
                let t = model.trace(&x);
                model.backward(&t, &y, &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.encoder.scale(scale);
            let mut params: Vec<&mut [f64]> = Vec::new();
            for l in model.encoder.point_layers.iter_mut().chain(model.head.iter_mut()) {
                params.push(l.weight.as_slice_mut().unwrap());
                params.push(l.bias.as_slice_mut().unwrap());
            }
            for l in &mut grad.head {
                l.weight *= scale;
                l.bias *= scale;
            }
            let grads: Vec<&[f64]> = grad
                .encoder
                .point_layers
                .iter()
                .chain(&grad.head)
                .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
                .collect();
            adam.step(&mut params, &grads);
        }
    }
    model.freeze();
    Ok(model)
}

// ---------------------------------------------------------------------------
// Either task, frozen
// ---------------------------------------------------------------------------

/// A trained task network of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskModel {
    Classification(TaskNetwork),
    Segmentation(SegmentationNetwork),
}

impl TaskModel {
    pub fn train(kind: TaskKind, dataset: &[LabeledCloud], config: &TaskTrainConfig) -> Result<Self> {
        Ok(match kind {
            TaskKind::Classification => {
                TaskModel::Classification(train_task_network(dataset, config)?)
            }
            TaskKind::Segmentation => {
                TaskModel::Segmentation(train_segmentation_network(dataset, config)?)
            }
        })
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskModel::Classification(_) => TaskKind::Classification,
            TaskModel::Segmentation(_) => TaskKind::Segmentation,
        }
    }

    pub fn is_frozen(&self) -> bool {
        match self {
            TaskModel::Classification(n) => n.is_frozen(),
            TaskModel::Segmentation(n) => n.is_frozen(),
        }
    }

    /// Evaluates the task on a normalized cloud (typically a reconstruction)
    /// of `sample`; `transform` maps it back to the sample's raw frame.
    pub fn evaluate(
        &self,
        normalized: &PointCloud,
        transform: &NormalizationTransform,
        sample: &LabeledCloud,
    ) -> TaskOutcome {
        match self {
            TaskModel::Classification(n) => n.task_loss(normalized, sample.label),
            TaskModel::Segmentation(n) => {
                let raw: Vec<Point3> =
                    normalized.points().iter().map(|&p| transform.invert(p)).collect();
                n.task_loss(normalized, &part_labels(sample.params.kind, &raw))
            }
        }
    }

    /// Evaluates the task on the uncompressed sample.
    pub fn evaluate_raw(&self, sample: &LabeledCloud) -> TaskOutcome {
        let (norm, t) = normalize(&sample.cloud);
        self.evaluate(&norm, &t, sample)
    }

    fn layer_groups(&self) -> (Vec<&Dense>, Vec<&Dense>) {
        match self {
            TaskModel::Classification(n) => (
                n.net.point_layers.iter().collect(),
                n.net.head_layers.iter().collect(),
            ),
            TaskModel::Segmentation(n) => {
                let all = n.layers();
                let split = n.encoder.point_layers.len();
                (all[..split].to_vec(), all[split..].to_vec())
            }
        }
    }

    /// Binary checkpoint: magic, version, task code, then both layer groups.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(self.kind().code());
        let (point, head) = self.layer_groups();
        write_layers(&mut out, &point);
        write_layers(&mut out, &head);
        out
    }

    /// Loads a checkpoint; the result is frozen.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::CorruptModel("bad task model magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::CorruptModel(format!("unsupported version {version}")));
        }
        let code = r.take(1)?[0];
        let point_layers = r.read_layers()?;
        let head_layers = r.read_layers()?;
        r.finish()?;
        check_chain(&point_layers)?;
        check_chain(&head_layers)?;
        let feature = point_layers.last().unwrap().outputs();
        if point_layers[0].inputs() != 3 {
            return Err(Error::CorruptModel("encoder must take 3 inputs".into()));
        }
        match code {
            0 => {
                if head_layers[0].inputs() != feature {
                    return Err(Error::CorruptModel("head does not match encoder".into()));
                }
                let mut n = TaskNetwork::from_pointnet(PointNet {
                    point_layers,
                    head_layers,
                })
                .map_err(|e| Error::CorruptModel(e.to_string()))?;
                n.freeze();
                Ok(TaskModel::Classification(n))
            }
            1 => {
                if head_layers[0].inputs() != 2 * feature
                    || head_layers.last().unwrap().outputs() != PART_COUNT
                {
                    return Err(Error::CorruptModel("segmentation head shape".into()));
                }
                Ok(TaskModel::Segmentation(SegmentationNetwork {
                    encoder: PointNet {
                        point_layers,
                        head_layers: Vec::new(),
                    },
                    head: head_layers,
                    frozen: true,
                }))
            }
            c => Err(Error::CorruptModel(format!("unknown task code {c}"))),
        }
    }

    /// FNV-1a of the checkpoint bytes.
    pub fn weights_hash(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TaskModel::from_bytes(&bytes)
    }
}

fn check_chain(layers: &[Dense]) -> Result<()> {
    for w in layers.windows(2) {
        if w[0].outputs() != w[1].inputs() {
            return Err(Error::CorruptModel("layer shapes do not chain".into()));
        }
    }
    Ok(())
}

/// FNV-1a over every point coordinate and label, in order.
pub fn dataset_hash(dataset: &[LabeledCloud]) -> u64 {
    let mut h = Fnv1a::new();
    h.write_u64(dataset.len() as u64);
    for s in dataset {
        h.write_u64(s.label as u64).write_u64(s.cloud.len() as u64);
        for p in s.cloud.points() {
            h.write_f64(p.x).write_f64(p.y).write_f64(p.z);
        }
    }
    h.finish()
}

// ---------------------------------------------------------------------------
// Rate/loss tables
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateLoss {
    pub bpp: f64,
    pub loss: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub task: TaskKind,
    pub levels: CandidateLevels,
    pub max_depth: u32,
    pub samples: usize,
    pub dataset_hash: String,
    pub codec_hash: String,
    pub network_hash: String,
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

/// `rows[sample][k]` holds bpp, loss and score at candidate level `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct RateLossTable {
    meta: TableMeta,
    rows: Vec<Vec<RateLoss>>,
}

impl RateLossTable {
    /// Validates completeness, finiteness and non-negativity.
    pub fn new(meta: TableMeta, rows: Vec<Vec<RateLoss>>) -> Result<Self> {
        let k = meta.levels.len();
        if rows.len() != meta.samples {
            return Err(Error::TableMismatch(format!(
                "{} rows for {} samples",
                rows.len(),
                meta.samples
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::TableMismatch(format!(
                    "sample {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            for e in row {
                if !(e.bpp.is_finite() && e.loss.is_finite() && e.score.is_finite())
                    || e.bpp < 0.0
                    || e.loss < 0.0
                {
                    return Err(Error::TableMismatch(format!("sample {i} has an invalid entry")));
                }
            }
        }
        Ok(RateLossTable { meta, rows })
    }

    pub fn meta(&self) -> &TableMeta {
        &self.meta
    }

    pub fn levels(&self) -> CandidateLevels {
        self.meta.levels
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of candidate levels, `K`.
    pub fn k(&self) -> usize {
        self.meta.levels.len()
    }

    pub fn rows(&self) -> &[Vec<RateLoss>] {
        &self.rows
    }

    pub fn row(&self, sample: usize) -> &[RateLoss] {
        &self.rows[sample]
    }

    pub fn bpp_vec(&self, sample: usize) -> Vec<f64> {
        self.rows[sample].iter().map(|e| e.bpp).collect()
    }

    pub fn loss_vec(&self, sample: usize) -> Vec<f64> {
        self.rows[sample].iter().map(|e| e.loss).collect()
    }

    /// `lambda * bpp + loss` at candidate index `k`.
    pub fn objective(&self, sample: usize, k: usize, lambda: f64) -> f64 {
        let e = &self.rows[sample][k];
        lambda * e.bpp + e.loss
    }

    /// CSV with header `sample_id,level,bpp,loss,correct`; floats use the
    /// shortest representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,level,bpp,loss,correct\n");
        for (i, row) in self.rows.iter().enumerate() {
            for (k, e) in row.iter().enumerate() {
                out.push_str(&format!(
                    "{i},{},{},{},{}\n",
                    self.meta.levels.level(k),
                    e.bpp,
                    e.loss,
                    e.score
                ));
            }
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output; any inconsistency with `meta`
    /// is reported as `CacheCorrupt`.
    pub fn from_csv(text: &str, meta: TableMeta) -> Result<Self> {
        let corrupt = |line: usize, msg: &str| Error::CacheCorrupt(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "sample_id,level,bpp,loss,correct")) => {}
            _ => return Err(corrupt(1, "missing header")),
        }
        let k = meta.levels.len();
        let mut slots: Vec<Vec<Option<RateLoss>>> = vec![vec![None; k]; meta.samples];
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(corrupt(n + 1, "expected 5 fields"));
            }
            let sample: usize = f[0].parse().map_err(|_| corrupt(n + 1, "bad sample id"))?;
            let level: u32 = f[1].parse().map_err(|_| corrupt(n + 1, "bad level"))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| corrupt(n + 1, "bad number"));
            let entry = RateLoss {
                bpp: num(f[2])?,
                loss: num(f[3])?,
                score: num(f[4])?,
            };
            let slot = crate::octree::DepthLevel::new(level)
                .ok()
                .and_then(|d| meta.levels.index_of(d))
                .filter(|_| sample < meta.samples)
                .ok_or_else(|| corrupt(n + 1, "sample or level out of range"))?;
            if slots[sample][slot].replace(entry).is_some() {
                return Err(corrupt(n + 1, "duplicate entry"));
            }
        }
        let rows = slots
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                row.into_iter()
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::CacheCorrupt(format!("sample {i} is incomplete")))
            })
            .collect::<Result<Vec<_>>>()?;
        RateLossTable::new(meta, rows).map_err(|e| Error::CacheCorrupt(e.to_string()))
    }

    /// Writes `<stem>.csv` and `<stem>.json`, each atomically.
    pub fn save(&self, stem: &Path) -> Result<()> {
        write_atomic(&stem.with_extension("csv"), self.to_csv().as_bytes())?;
        let meta = serde_json::to_vec_pretty(&self.meta).expect("meta serializes");
        write_atomic(&stem.with_extension("json"), &meta)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let json_path = stem.with_extension("json");
        let csv_path = stem.with_extension("csv");
        let json = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let meta: TableMeta = serde_json::from_slice(&json)
            .map_err(|e| Error::CacheCorrupt(format!("{}: {e}", json_path.display())))?;
        let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        RateLossTable::from_csv(&csv, meta)
    }
}

/// Encodes every sample once to the codec depth, then for each candidate
/// level takes the prefix bpp and evaluates the task on the reconstruction.
pub fn build_rate_loss_table(
    dataset: &[LabeledCloud],
    codec: &CodecConfig,
    task: &TaskModel,
    levels: CandidateLevels,
) -> Result<RateLossTable> {
    if !task.is_frozen() {
        return Err(Error::InvalidConfig("task network must be frozen".into()));
    }
    if levels.max().get() > codec.max_depth {
        return Err(Error::InvalidConfig(format!(
            "candidate levels {levels} exceed codec depth {}",
            codec.max_depth
        )));
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let stream = codec.encode(&sample.cloud)?;
        let (tree, _) = decode_cloud(&stream, levels.max())?;
        let transform = stream.header().transform;
        let points = stream.header().point_count;
        let mut row = Vec::with_capacity(levels.len());
        for level in levels.iter() {
            let recon = reconstruct(&tree, level)?;
            let outcome = task.evaluate(&recon, &transform, sample);
            row.push(RateLoss {
                bpp: bits_per_point(stream.prefix_payload_len(level), points),
                loss: outcome.loss,
                score: outcome.score,
            });
        }
        rows.push(row);
    }
    let meta = TableMeta {
        task: task.kind(),
        levels,
        max_depth: codec.max_depth,
        samples: dataset.len(),
        dataset_hash: hex(dataset_hash(dataset)),
        codec_hash: hex(codec.hash()),
        network_hash: hex(task.weights_hash()),
    };
    RateLossTable::new(meta, rows)
}

/// Whether [`TableCache::load_or_build`] reused a cached table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Built,
    /// A cached table existed but failed validation and was rebuilt.
    Rebuilt,
}

/// On-disk table cache keyed by dataset, codec and network hashes.
#[derive(Clone, Debug)]
pub struct TableCache {
    dir: PathBuf,
}

impl TableCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        TableCache { dir: dir.into() }
    }

    pub fn stem(&self, task: TaskKind, dataset: u64, codec: u64, network: u64) -> PathBuf {
        self.dir
            .join(format!("table-{task}-{dataset:016x}-{codec:016x}-{network:016x}"))
    }

    /// Loads the cached table for these inputs, checking its recorded
    /// hashes; a mismatch is `CacheCorrupt`.
    pub fn load(
        &self,
        dataset: &[LabeledCloud],
        codec: &CodecConfig,
        task: &TaskModel,
        levels: CandidateLevels,
    ) -> Result<RateLossTable> {
        let (dh, ch, nh) = (dataset_hash(dataset), codec.hash(), task.weights_hash());
        let table = RateLossTable::load(&self.stem(task.kind(), dh, ch, nh))?;
        let m = table.meta();
        if m.dataset_hash != hex(dh)
            || m.codec_hash != hex(ch)
            || m.network_hash != hex(nh)
            || m.levels != levels
            || m.task != task.kind()
            || m.max_depth != codec.max_depth
        {
            return Err(Error::CacheCorrupt("cached table hashes do not match inputs".into()));
        }
        Ok(table)
    }

    pub fn load_or_build(
        &self,
        dataset: &[LabeledCloud],
        codec: &CodecConfig,
        task: &TaskModel,
        levels: CandidateLevels,
    ) -> Result<(RateLossTable, CacheStatus)> {
        let stem = self.stem(task.kind(), dataset_hash(dataset), codec.hash(), task.weights_hash());
        let status = match self.load(dataset, codec, task, levels) {
            Ok(t) => return Ok((t, CacheStatus::Hit)),
            Err(Error::Io { .. }) if !stem.with_extension("json").exists() => CacheStatus::Built,
            Err(_) => CacheStatus::Rebuilt,
        };
        let table = build_rate_loss_table(dataset, codec, task, levels)?;
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        table.save(&stem)?;
        Ok((table, status))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_dataset, generate_shape, DatasetConfig};

    fn small_dataset(per_class: usize, seed: u64) -> Vec<LabeledCloud> {
        generate_dataset(&DatasetConfig {
            per_class,
            points: 256,
            seed,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    fn constant_classifier(classes: usize, bias: &[f64]) -> TaskNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PointNet::new(&[3, 4], &[4, classes], &mut rng);
        for l in net.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        net.head_layers[0].bias.assign(&Array1::from(bias.to_vec()));
        TaskNetwork::from_pointnet(net).unwrap()
    }

    #[test]
    fn certain_correct_output_has_vanishing_loss() {
        let net = constant_classifier(3, &[0.0, 60.0, 0.0]);
        let c = generate_shape(ShapeKind::Plane, 32, 1, 0.0).cloud;
        let out = net.task_loss(&c, 1);
        assert!(out.loss < 1e-20, "{}", out.loss);
        assert_eq!(out.score, 1.0);
        assert_eq!(net.task_loss(&c, 0).score, 0.0);
    }

    #[test]
    fn uniform_output_costs_ln_c() {
        for c in [2usize, 6] {
            let net = constant_classifier(c, &vec![0.0; c]);
            let cloud = generate_shape(ShapeKind::Torus, 32, 2, 0.0).cloud;
            let out = net.task_loss(&cloud, 0);
            assert!((out.loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        for y in 0..4 {
            let direct = -(logits[y].exp() / z).ln();
            assert!((cross_entropy(&logits, y) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = (0..4).map(|s| generate_shape(ShapeKind::Plane, 16, s, 0.0)).collect();
        let err = train_task_network(&data, &TaskTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidDataset(_)));
        assert!(matches!(train_task_network(&[], &TaskTrainConfig::default()), Err(Error::InvalidDataset(_))));
    }

    #[test]
    fn task_loss_is_permutation_invariant_and_raw_equals_identity_input() {
        let net = TaskNetwork::new(6, 4).unwrap();
        let c = generate_shape(ShapeKind::TwoSpheres, 64, 5, 0.01).cloud;
        let mut pts = c.points().to_vec();
        pts.reverse();
        pts.swap(3, 40);
        let shuffled = PointCloud::new(pts).unwrap();
        assert_eq!(net.task_loss(&c, 4), net.task_loss(&shuffled, 4));
        let (norm, _) = normalize(&c);
        assert_eq!(net.task_loss(&c, 4), net.task_loss(&norm, 4));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = small_dataset(8, 3);
        let cfg = TaskTrainConfig {
            epochs: 3,
            subset: 64,
            ..TaskTrainConfig::default()
        };
        let a = train_task_network(&data, &cfg).unwrap();
        let b = train_task_network(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.is_frozen());
        let untrained = TaskNetwork::new(6, cfg.seed).unwrap();
        let loss = |n: &TaskNetwork| {
            data.iter().map(|s| n.task_loss(&s.cloud, s.label).loss).sum::<f64>()
        };
        assert!(loss(&a) < loss(&untrained));
    }

    #[test]
    fn mean_iou_cases() {
        assert_eq!(mean_iou(&[0, 1, 2], &[0, 1, 2], 3), 1.0);
        assert_eq!(mean_iou(&[0, 0], &[1, 1], 3), 0.0);
        // part 0: inter 1, union 2; part 1: inter 1, union 2
        assert!((mean_iou(&[0, 0, 1], &[0, 1, 1], 3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn segmentation_backprop_matches_finite_differences() {
        let net = SegmentationNetwork::new(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_simple_fn((9, 3), || rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0);
        let y: Vec<usize> = (0..9).map(|i| i % PART_COUNT).collect();
        let loss = |n: &SegmentationNetwork| {
            let l = n.trace(&x).logits;
            l.rows()
                .into_iter()
                .zip(&y)
                .map(|(r, &t)| cross_entropy(r.as_slice().unwrap(), t))
                .sum::<f64>()
                / y.len() as f64
        };
        let mut grad = net.zero_grad();
        net.backward(&net.trace(&x), &y, &mut grad);
        let analytic: Vec<f64> = grad
            .encoder
            .point_layers
            .iter()
            .chain(&grad.head)
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut idx = 0;
        let n_layers = net.encoder.point_layers.len() + net.head.len();
        for li in 0..n_layers {
            let size = {
                let l = net.layers()[li];
                l.weight.len() + l.bias.len()
            };
            for j in 0..size {
                let perturb = |delta: f64| {
                    let mut m = net.clone();
                    let l = if li < m.encoder.point_layers.len() {
                        &mut m.encoder.point_layers[li]
                    } else {
                        &mut m.head[li - net.encoder.point_layers.len()]
                    };
                    let wl = l.weight.len();
                    if j < wl {
                        l.weight.as_slice_mut().unwrap()[j] += delta;
                    } else {
                        l.bias[j - wl] += delta;
                    }
                    loss(&m)
                };
                let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                let a = analytic[idx];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
                idx += 1;
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn model_blob_round_trip_and_hash() {
        let data = small_dataset(2, 5);
        let cfg = TaskTrainConfig {
            epochs: 1,
            subset: 32,
            ..TaskTrainConfig::default()
        };
        for kind in [TaskKind::Classification, TaskKind::Segmentation] {
            let m = TaskModel::train(kind, &data, &cfg).unwrap();
            let back = TaskModel::from_bytes(&m.to_bytes()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.weights_hash(), m.weights_hash());
            let mut bytes = m.to_bytes();
            bytes.pop();
            assert!(matches!(TaskModel::from_bytes(&bytes), Err(Error::CorruptModel(_))));
            bytes[0] = b'X';
            assert!(matches!(TaskModel::from_bytes(&bytes), Err(Error::CorruptModel(_))));
        }
    }

    fn tiny_table() -> (Vec<LabeledCloud>, CodecConfig, TaskModel, CandidateLevels) {
        let data = small_dataset(2, 9);
        let model = TaskModel::train(
            TaskKind::Classification,
            &data,
            &TaskTrainConfig {
                epochs: 1,
                subset: 32,
                ..TaskTrainConfig::default()
            },
        )
        .unwrap();
        (data, CodecConfig::new(6).unwrap(), model, CandidateLevels::new(2, 6).unwrap())
    }

    #[test]
    fn table_bpp_strictly_increases_and_matches_prefixes() {
        let (data, codec, model, levels) = tiny_table();
        let table = build_rate_loss_table(&data, &codec, &model, levels).unwrap();
        assert_eq!(table.len(), data.len());
        assert_eq!(table.k(), 5);
        for (i, s) in data.iter().enumerate() {
            let stream = codec.encode(&s.cloud).unwrap();
            for (k, level) in levels.iter().enumerate() {
                let expect = 8.0 * stream.prefix_payload_len(level) as f64 / s.cloud.len() as f64;
                assert_eq!(table.row(i)[k].bpp, expect);
            }
            assert!(table.bpp_vec(i).windows(2).all(|w| w[0] < w[1]));
            assert!(table.loss_vec(i).iter().all(|&l| l >= 0.0));
        }
    }

    #[test]
    fn table_rejects_unfrozen_network() {
        let (data, codec, _, levels) = tiny_table();
        let model = TaskModel::Classification(TaskNetwork::new(6, 0).unwrap());
        assert!(matches!(
            build_rate_loss_table(&data, &codec, &model, levels),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let (data, codec, model, levels) = tiny_table();
        let table = build_rate_loss_table(&data, &codec, &model, levels).unwrap();
        let back = RateLossTable::from_csv(&table.to_csv(), table.meta().clone()).unwrap();
        assert_eq!(back, table);

        let csv = table.to_csv();
        let missing: String = csv.lines().take(csv.lines().count() - 1).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            RateLossTable::from_csv(&missing, table.meta().clone()),
            Err(Error::CacheCorrupt(_))
        ));
        let mut dup = csv.clone();
        dup.push_str(csv.lines().nth(1).unwrap());
        assert!(matches!(
            RateLossTable::from_csv(&dup, table.meta().clone()),
            Err(Error::CacheCorrupt(_))
        ));
    }

    #[test]
    fn table_mismatch_on_incomplete_rows() {
        let (data, codec, model, levels) = tiny_table();
        let table = build_rate_loss_table(&data, &codec, &model, levels).unwrap();
        let mut rows = table.rows().to_vec();
        rows[1].pop();
        assert!(matches!(
            RateLossTable::new(table.meta().clone(), rows),
            Err(Error::TableMismatch(_))
        ));
    }

    #[test]
    fn cache_hit_is_bit_identical_and_corruption_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TableCache::new(dir.path());
        let (data, codec, model, levels) = tiny_table();
        let (first, s1) = cache.load_or_build(&data, &codec, &model, levels).unwrap();
        assert_eq!(s1, CacheStatus::Built);
        let (second, s2) = cache.load_or_build(&data, &codec, &model, levels).unwrap();
        assert_eq!(s2, CacheStatus::Hit);
        assert_eq!(first, second);

        let stem = cache.stem(
            model.kind(),
            dataset_hash(&data),
            codec.hash(),
            model.weights_hash(),
        );
        let json = fs::read_to_string(stem.with_extension("json")).unwrap();
        let tampered = json.replace(&first.meta().network_hash, "0000000000000000");
        fs::write(stem.with_extension("json"), tampered).unwrap();
        assert!(matches!(
            cache.load(&data, &codec, &model, levels),
            Err(Error::CacheCorrupt(_))
        ));
        let (third, s3) = cache.load_or_build(&data, &codec, &model, levels).unwrap();
        assert_eq!(s3, CacheStatus::Rebuilt);
        assert_eq!(third, first);
    }
}
