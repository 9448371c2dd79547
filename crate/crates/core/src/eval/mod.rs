//! Depth-selection policies and their evaluation: oracle, fixed-depth and
//! learned policies, rate sweeps over lambda, selection histograms and
//! multi-task partition plans.

use serde::{Deserialize, Serialize};

use crate::codec::{bits_per_point, decode_cloud, truncate_stream, Bitstream, CodecConfig};
use crate::error::{Error, Result};
use crate::octree::{reconstruct, CandidateLevels, DepthLevel};
use crate::pointcloud::{LabeledCloud, PointCloud};
use crate::predictor::{predict_depth, predict_index, predictor_input, PredictorModel};
use crate::tasks::{RateLossTable, TaskModel};

/// Toy bpp values are roughly a hundred times the task losses, so nominal
/// lambdas are multiplied by this factor before use.
pub const LAMBDA_SCALE: f64 = 0.01;

/// Nominal sweep values, before [`LAMBDA_SCALE`].
pub const NOMINAL_SWEEP: [f64; 6] = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0];

pub fn default_sweep() -> Vec<f64> {
    NOMINAL_SWEEP.iter().map(|l| l * LAMBDA_SCALE).collect()
}

#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    Fixed(DepthLevel),
    /// Per-sample argmin of the objective at this lambda.
    Oracle(f64),
    Learned(&'a PredictorModel),
}

impl Policy<'_> {
    pub fn name(&self) -> String {
        match self {
            Policy::Fixed(d) => format!("fixed:{d}"),
            Policy::Oracle(_) => "oracle".into(),
            Policy::Learned(_) => "learned".into(),
        }
    }
}

/// Per-sample argmin of `lambda * bpp + loss`; ties go to the lower level.
pub fn oracle_indices(table: &RateLossTable, lambda: f64) -> Vec<usize> {
    (0..table.len())
        .map(|i| {
            let mut best = 0;
            for k in 1..table.k() {
                if table.objective(i, k, lambda) < table.objective(i, best, lambda) {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn oracle_select(table: &RateLossTable, lambda: f64) -> Vec<DepthLevel> {
    let levels = table.levels();
    oracle_indices(table, lambda).into_iter().map(|k| levels.level(k)).collect()
}

/// Candidate index chosen by `policy` for every sample.
pub fn select_indices(
    policy: &Policy<'_>,
    dataset: &[LabeledCloud],
    table: &RateLossTable,
) -> Result<Vec<usize>> {
    if dataset.len() != table.len() {
        return Err(Error::TableMismatch(format!(
            "table has {} samples, dataset has {}",
            table.len(),
            dataset.len()
        )));
    }
    let levels = table.levels();
    match policy {
        Policy::Fixed(d) => {
            let k = levels.index_of(*d).ok_or_else(|| {
                Error::InvalidConfig(format!("fixed level {d} is not a candidate in {levels}"))
            })?;
            Ok(vec![k; table.len()])
        }
        Policy::Oracle(lambda) => Ok(oracle_indices(table, *lambda)),
        Policy::Learned(model) => {
            if model.levels() != levels {
                return Err(Error::TableMismatch(format!(
                    "predictor levels {} differ from table levels {levels}",
                    model.levels()
                )));
            }
            Ok(dataset
                .iter()
                .map(|s| predict_index(model, &predictor_input(&s.cloud)))
                .collect())
        }
    }
}

/// Percentage of selections falling on each of `k` candidates.
pub fn histogram(indices: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i] += 1;
    }
    let n = indices.len().max(1) as f64;
    counts.into_iter().map(|c| 100.0 * c as f64 / n).collect()
}

pub fn selection_histogram(
    policy: &Policy<'_>,
    dataset: &[LabeledCloud],
    table: &RateLossTable,
) -> Result<Vec<f64>> {
    Ok(histogram(&select_indices(policy, dataset, table)?, table.k()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub lambda: f64,
    pub samples: usize,
    pub mean_bpp: f64,
    pub mean_loss: f64,
    /// Accuracy for classification, mean IoU for segmentation.
    pub metric: f64,
    pub mean_objective: f64,
    pub mean_depth: f64,
    pub levels: CandidateLevels,
    /// Percent of samples per candidate level, lowest level first.
    pub selection: Vec<f64>,
}

struct Outcome {
    index: usize,
    bpp: f64,
    loss: f64,
    score: f64,
}

fn summarize(name: String, lambda: f64, levels: CandidateLevels, rows: &[Outcome]) -> EvalReport {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&Outcome) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let indices: Vec<usize> = rows.iter().map(|o| o.index).collect();
    EvalReport {
        policy: name,
        lambda,
        samples: rows.len(),
        mean_bpp: mean(&|o| o.bpp),
        mean_loss: mean(&|o| o.loss),
        metric: mean(&|o| o.score),
        mean_objective: mean(&|o| lambda * o.bpp + o.loss),
        mean_depth: mean(&|o| levels.level(o.index).get() as f64),
        levels,
        selection: histogram(&indices, levels.len()),
    }
}

/// Runs the full path per sample: encode, select, truncate, decode the
/// prefix and evaluate the task on the reconstruction.
pub fn evaluate_policy(
    policy: &Policy<'_>,
    dataset: &[LabeledCloud],
    table: &RateLossTable,
    codec: &CodecConfig,
    task: &TaskModel,
    lambda: f64,
) -> Result<EvalReport> {
    let levels = table.levels();
    if levels.max().get() > codec.max_depth {
        return Err(Error::InvalidConfig(format!(
            "candidate levels {levels} exceed codec depth {}",
            codec.max_depth
        )));
    }
    let picks = select_indices(policy, dataset, table)?;
    let mut rows = Vec::with_capacity(dataset.len());
    for (sample, &index) in dataset.iter().zip(&picks) {
        let level = levels.level(index);
        let full = codec.encode(&sample.cloud)?;
        let prefix = truncate_stream(&full, level)?;
        let (tree, _) = decode_cloud(&prefix, level)?;
        let recon = reconstruct(&tree, level)?;
        let outcome = task.evaluate(&recon, &prefix.header().transform, sample);
        rows.push(Outcome {
            index,
            bpp: bits_per_point(prefix.payload_len(), prefix.header().point_count),
            loss: outcome.loss,
            score: outcome.score,
        });
    }
    Ok(summarize(policy.name(), lambda, levels, &rows))
}

/// Same report as [`evaluate_policy`], read from the precomputed table.
pub fn evaluate_on_table(
    policy: &Policy<'_>,
    dataset: &[LabeledCloud],
    table: &RateLossTable,
    lambda: f64,
) -> Result<EvalReport> {
    let picks = select_indices(policy, dataset, table)?;
    let rows: Vec<Outcome> = picks
        .iter()
        .enumerate()
        .map(|(i, &index)| {
            let e = table.row(i)[index];
            Outcome {
                index,
                bpp: e.bpp,
                loss: e.loss,
                score: e.score,
            }
        })
        .collect();
    Ok(summarize(policy.name(), lambda, table.levels(), &rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub lambda: f64,
    pub policy: String,
    pub mean_bpp: f64,
    pub metric: f64,
    pub objective: f64,
    pub mean_depth: f64,
}

impl From<&EvalReport> for RdRow {
    fn from(r: &EvalReport) -> Self {
        RdRow {
            lambda: r.lambda,
            policy: r.policy.clone(),
            mean_bpp: r.mean_bpp,
            metric: r.metric,
            objective: r.mean_objective,
            mean_depth: r.mean_depth,
        }
    }
}

/// Rows for the learned, oracle and every fixed policy at each lambda;
/// `learned[j]` is the predictor trained for `lambdas[j]`.
pub fn rd_sweep(
    lambdas: &[f64],
    dataset: &[LabeledCloud],
    table: &RateLossTable,
    learned: &[PredictorModel],
) -> Result<Vec<RdRow>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("lambda sweep is empty".into()));
    }
    if learned.len() != lambdas.len() {
        return Err(Error::InvalidConfig(format!(
            "{} predictors for {} lambda values",
            learned.len(),
            lambdas.len()
        )));
    }
    let mut rows = Vec::with_capacity(lambdas.len() * (table.k() + 2));
    for (&lambda, model) in lambdas.iter().zip(learned) {
        let mut policies = vec![Policy::Learned(model), Policy::Oracle(lambda)];
        policies.extend(table.levels().iter().map(Policy::Fixed));
        for p in &policies {
            rows.push(RdRow::from(&evaluate_on_table(p, dataset, table, lambda)?));
        }
    }
    Ok(rows)
}

pub const RD_CSV_HEADER: &str = "lambda,policy,mean_bpp,metric,objective,mean_depth";

pub fn rd_csv(rows: &[RdRow]) -> String {
    let mut out = String::from(RD_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:.6},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.lambda, r.policy, r.mean_bpp, r.metric, r.objective, r.mean_depth
        ));
    }
    out
}

/// Number of adjacent pairs where the sequence goes up.
pub fn increases(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedTask {
    pub task: String,
    pub depth: DepthLevel,
}

/// Which stream prefix each task consumes. Tasks are ordered by depth, cut
/// points are the distinct depths followed by the full depth reserved for
/// viewing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub tasks: Vec<PlannedTask>,
    pub cuts: Vec<DepthLevel>,
    pub human_depth: DepthLevel,
}

impl PartitionPlan {
    pub fn from_depths(tasks: Vec<(String, DepthLevel)>, max_depth: u32) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidConfig("a partition plan needs at least one task".into()));
        }
        let human = DepthLevel::new(max_depth)?;
        let mut planned: Vec<PlannedTask> = tasks
            .into_iter()
            .map(|(task, depth)| {
                if depth > human {
                    Err(Error::DepthOutOfRange {
                        depth: depth.get(),
                        max: max_depth,
                    })
                } else {
                    Ok(PlannedTask { task, depth })
                }
            })
            .collect::<Result<_>>()?;
        planned.sort_by_key(|t| t.depth);
        let mut cuts: Vec<DepthLevel> = planned.iter().map(|t| t.depth).collect();
        cuts.push(human);
        cuts.dedup();
        Ok(PartitionPlan {
            tasks: planned,
            cuts,
            human_depth: human,
        })
    }

    /// Container bytes per cut: the first piece carries the header and
    /// levels up to the first cut, each later piece only the levels added
    /// since the previous cut. The pieces concatenate to the full stream.
    pub fn split(&self, stream: &Bitstream) -> Result<Vec<Vec<u8>>> {
        if stream.max_depth() != self.human_depth.get() {
            return Err(Error::InvalidConfig(format!(
                "plan expects a depth-{} stream, got depth {}",
                self.human_depth,
                stream.max_depth()
            )));
        }
        let bytes = stream.to_bytes();
        let header = bytes.len() - stream.payload_len();
        let mut start = 0;
        let mut pieces = Vec::with_capacity(self.cuts.len());
        for &cut in &self.cuts {
            let end = header + stream.prefix_payload_len(cut);
            pieces.push(bytes[start..end].to_vec());
            start = end;
        }
        Ok(pieces)
    }

    /// Bytes a task receives beyond what shallower cuts already delivered.
    pub fn extra_bytes(&self, stream: &Bitstream, task: &str) -> Option<usize> {
        let t = self.tasks.iter().find(|t| t.task == task)?;
        let pos = self.cuts.iter().position(|&c| c == t.depth)?;
        let below = if pos == 0 {
            0
        } else {
            stream.prefix_payload_len(self.cuts[pos - 1])
        };
        Some(stream.prefix_payload_len(t.depth) - below)
    }
}

/// Plans the partition of `cloud`'s stream from each task's predictor.
pub fn plan_partition(
    tasks: &[(&PredictorModel, &str)],
    cloud: &PointCloud,
    max_depth: u32,
) -> Result<PartitionPlan> {
    let depths = tasks
        .iter()
        .map(|(model, name)| (name.to_string(), predict_depth(model, cloud)))
        .collect();
    PartitionPlan::from_depths(depths, max_depth)
}
