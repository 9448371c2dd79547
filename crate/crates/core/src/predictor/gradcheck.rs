//! Finite-difference check of the predictor's backward pass.
//!
//! Each weight is perturbed by `±FD_STEP` and only the part of the forward
//! pass downstream of that weight is recomputed. Weights whose perturbation
//! flips a ReLU or changes a max-pool winner are skipped, since the
//! objective is not differentiable there.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::{costs, gumbel_noise, gumbel_select_with_noise, open_uniforms, PredictorModel};
use crate::nn::{max_pool, relu, relu_vec, softmax, softmax_backward, PointNet, PointNetTrace};

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Fixed inputs, costs and Gumbel draws for a deterministic objective.
#[derive(Clone, Debug)]
pub struct GradCheckBatch {
    pub inputs: Vec<Array2<f64>>,
    pub bpp: Vec<Vec<f64>>,
    pub loss: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub tau: f64,
}

impl GradCheckBatch {
    /// Random points in `[-1, 1)^3`, increasing bpp, decreasing loss.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        samples: usize,
        points: usize,
        k: usize,
        tau: f64,
    ) -> Self {
        let mut b = GradCheckBatch {
            inputs: Vec::new(),
            bpp: Vec::new(),
            loss: Vec::new(),
            noise: Vec::new(),
            tau,
        };
        for _ in 0..samples {
            b.inputs.push(Array2::from_shape_simple_fn((points, 3), || {
                rng.random::<f64>() * 2.0 - 1.0
            }));
            let mut acc = 0.0;
            b.bpp.push((0..k).map(|_| { acc += rng.random_range(0.1..2.0); acc }).collect());
            let mut l = rng.random_range(1.0..3.0);
            b.loss.push((0..k).map(|_| { l *= rng.random_range(0.3..0.9); l }).collect());
            b.noise.push(
                open_uniforms(rng, k)
                    .into_iter()
                    .map(|e| gumbel_noise(e).expect("open interval"))
                    .collect(),
            );
        }
        b
    }

    fn costs(&self, lambda: f64) -> Vec<Vec<f64>> {
        self.bpp.iter().zip(&self.loss).map(|(b, l)| costs(b, l, lambda)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Weights skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub analytic_norm: f64,
}

fn objective(logits: &Array1<f64>, noise: &[f64], costs: &[f64], tau: f64) -> f64 {
    let p = softmax(logits.as_slice().unwrap());
    let sel = gumbel_select_with_noise(&p, tau, noise).expect("valid temperature");
    costs.iter().zip(&sel.relaxed).map(|(c, h)| c * h).sum()
}

/// Analytic gradient of the batch-mean relaxed objective.
fn analytic(net: &PointNet, batch: &GradCheckBatch, costs: &[Vec<f64>]) -> Vec<f64> {
    let mut grad = net.zero_grad();
    for ((x, noise), c) in batch.inputs.iter().zip(&batch.noise).zip(costs) {
        let trace = net.forward_trace(x);
        let p = softmax(trace.logits.as_slice().unwrap());
        let sel = gumbel_select_with_noise(&p, batch.tau, noise).expect("valid temperature");
        let d = softmax_backward(&p, &sel.probs_grad(c));
        net.backward(&trace, &Array1::from(d), &mut grad);
    }
    grad.scale(1.0 / batch.inputs.len() as f64);
    grad.layers()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum Param {
    Point { layer: usize, row: usize, col: Option<usize> },
    Head { layer: usize, row: usize, col: Option<usize> },
}

fn params(net: &PointNet, head_only: bool) -> Vec<(usize, Param)> {
    let mut out = Vec::new();
    let mut flat = 0;
    let mut push = |layer: usize, rows: usize, cols: usize, head: bool, out: &mut Vec<_>| {
        let make = |row, col| {
            if head {
                Param::Head { layer, row, col }
            } else {
                Param::Point { layer, row, col }
            }
        };
        for r in 0..rows {
            for c in 0..cols {
                if head || !head_only {
                    out.push((flat, make(r, Some(c))));
                }
                flat += 1;
            }
        }
        for r in 0..rows {
            if head || !head_only {
                out.push((flat, make(r, None)));
            }
            flat += 1;
        }
    };
    for (l, d) in net.point_layers.iter().enumerate() {
        push(l, d.outputs(), d.inputs(), false, &mut out);
    }
    for (l, d) in net.head_layers.iter().enumerate() {
        push(l, d.outputs(), d.inputs(), true, &mut out);
    }
    out
}

struct Base {
    trace: PointNetTrace,
    /// Post-ReLU output of every point layer.
    acts: Vec<Array2<f64>>,
}

fn flipped(base: f64, new: f64) -> bool {
    (base > 0.0) != (new > 0.0)
}

struct Perturb<'a> {
    net: &'a PointNet,
    base: &'a Base,
}

impl Perturb<'_> {
    fn logits(&self, param: Param, delta: f64) -> Option<Array1<f64>> {
        let t = &self.base.trace;
        match param {
            Param::Head { layer, row, col } => {
                let mut z = t.head_pre[layer].clone();
                z[row] += delta * col.map_or(1.0, |j| t.head_inputs[layer][j]);
                self.head_from_pre(layer, z)
            }
            Param::Point { layer, row, col } => {
                let last = self.net.point_layers.len() - 1;
                let input = &t.point_inputs[layer];
                let pre = &t.point_pre[layer];
                let m = pre.nrows();
                let mut act = Array1::zeros(m);
                for r in 0..m {
                    let z = pre[[r, row]] + delta * col.map_or(1.0, |j| input[[r, j]]);
                    if flipped(pre[[r, row]], z) {
                        return None;
                    }
                    act[r] = z.max(0.0);
                }
                if layer == last {
                    let (winner, best) = act.iter().enumerate().fold(
                        (0, f64::NEG_INFINITY),
                        |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                    );
                    if winner != t.argmax[row] {
                        return None;
                    }
                    let df = best - t.feature[row];
                    let w = &self.net.head_layers[0].weight;
                    let z = &t.head_pre[0] + &(w.column(row).to_owned() * df);
                    return self.head_from_pre(0, z);
                }
                let dact = &act - &self.base.acts[layer].column(row);
                let next = &self.net.point_layers[layer + 1];
                let mut z = t.point_pre[layer + 1].clone();
                for r in 0..m {
                    if dact[r] != 0.0 {
                        z.row_mut(r).scaled_add(dact[r], &next.weight.column(row));
                    }
                }
                self.points_from(layer + 1, z)
            }
        }
    }

    /// Continues from the pre-activation `z` of point layer `layer`.
    fn points_from(&self, layer: usize, mut z: Array2<f64>) -> Option<Array1<f64>> {
        let t = &self.base.trace;
        let mut l = layer;
        loop {
            if z.iter().zip(t.point_pre[l].iter()).any(|(&a, &b)| flipped(b, a)) {
                return None;
            }
            let a = relu(z);
            if l + 1 == self.net.point_layers.len() {
                let (argmax, feature) = max_pool(&a);
                if argmax != t.argmax {
                    return None;
                }
                let z0 = self.net.head_layers[0].forward_vec(&feature);
                return self.head_from_pre(0, z0);
            }
            l += 1;
            z = self.net.point_layers[l].forward(&a);
        }
    }

    fn head_from_pre(&self, layer: usize, mut z: Array1<f64>) -> Option<Array1<f64>> {
        let t = &self.base.trace;
        let last = self.net.head_layers.len() - 1;
        let mut l = layer;
        while l < last {
            if z.iter().zip(t.head_pre[l].iter()).any(|(&a, &b)| flipped(b, a)) {
                return None;
            }
            l += 1;
            z = self.net.head_layers[l].forward_vec(&relu_vec(z));
        }
        Some(z)
    }
}

fn run(model: &PredictorModel, batch: &GradCheckBatch, lambda: f64, head_only: bool) -> GradCheckReport {
    let net = model.pointnet();
    let costs = batch.costs(lambda);
    let grad = analytic(net, batch, &costs);
    let bases: Vec<Base> = batch
        .inputs
        .iter()
        .map(|x| {
            let trace = net.forward_trace(x);
            let last = trace.point_pre.len() - 1;
            let mut acts: Vec<Array2<f64>> = trace.point_inputs[1..].to_vec();
            acts.push(relu(trace.point_pre[last].clone()));
            Base { trace, acts }
        })
        .collect();
    let n = batch.inputs.len() as f64;
    let eval = |param: Param, delta: f64| -> Option<f64> {
        let mut total = 0.0;
        for (s, base) in bases.iter().enumerate() {
            let logits = Perturb { net, base }.logits(param, delta)?;
            total += objective(&logits, &batch.noise[s], &costs[s], batch.tau);
        }
        Some(total / n)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        analytic_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
    };
    for (flat, param) in params(net, head_only) {
        let (Some(plus), Some(minus)) = (eval(param, FD_STEP), eval(param, -FD_STEP)) else {
            report.skipped += 1;
            continue;
        };
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = grad[flat];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    report
}

/// Compares the analytic gradient of the batch-mean relaxed objective with
/// central finite differences over every weight.
pub fn gradient_check(model: &PredictorModel, batch: &GradCheckBatch, lambda: f64) -> GradCheckReport {
    run(model, batch, lambda, false)
}

/// Same as [`gradient_check`] over the head weights only.
pub fn gradient_check_head(
    model: &PredictorModel,
    batch: &GradCheckBatch,
    lambda: f64,
) -> GradCheckReport {
    run(model, batch, lambda, true)
}
