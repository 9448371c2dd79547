//! Minimal dense layers with hand-written backpropagation, a max-pooled
//! point network, and Adam.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`, row-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).unwrap();
        Dense {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || normal.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    /// Row-wise affine map of a batch `n x in`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn relu(mut a: Array2<f64>) -> Array2<f64> {
    a.mapv_inplace(|v| v.max(0.0));
    a
}

pub fn relu_vec(mut a: Array1<f64>) -> Array1<f64> {
    a.mapv_inplace(|v| v.max(0.0));
    a
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gradient of a softmax output `p` mapped back to its logits.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - dot)).collect()
}

/// Index of the first maximal element.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Shared per-point MLP (affine + ReLU per layer), coordinate-wise max-pool,
/// then a fully connected head with ReLU between layers and raw logits out.
#[derive(Clone, Debug, PartialEq)]
pub struct PointNet {
    pub point_layers: Vec<Dense>,
    pub head_layers: Vec<Dense>,
}

/// Activations recorded by [`PointNet::forward_trace`] for backpropagation.
#[derive(Clone, Debug)]
pub struct PointNetTrace {
    /// Input to each point layer; `point_inputs[0]` is the coordinate matrix.
    pub point_inputs: Vec<Array2<f64>>,
    pub point_pre: Vec<Array2<f64>>,
    /// Winning point per pooled feature.
    pub argmax: Vec<usize>,
    pub feature: Array1<f64>,
    pub head_inputs: Vec<Array1<f64>>,
    pub head_pre: Vec<Array1<f64>>,
    pub logits: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointNetGrad {
    pub point_layers: Vec<Dense>,
    pub head_layers: Vec<Dense>,
}

impl PointNet {
    pub fn new<R: Rng + ?Sized>(point_widths: &[usize], head_widths: &[usize], rng: &mut R) -> Self {
        if !head_widths.is_empty() {
            assert_eq!(point_widths.last(), head_widths.first(), "pooled width feeds the head");
        }
        PointNet {
            point_layers: point_widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect(),
            head_layers: head_widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.point_layers.last().map_or(0, Dense::outputs)
    }

    /// Width of the head output, or of the pooled feature when there is no head.
    pub fn output_width(&self) -> usize {
        self.head_layers.last().map_or(self.feature_width(), Dense::outputs)
    }

    /// `(inputs, outputs)` of every layer, point layers first.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers().map(|l| (l.inputs(), l.outputs())).collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.point_layers.iter().chain(&self.head_layers)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.point_layers.iter_mut().chain(self.head_layers.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    pub fn point_features(&self, points: &Array2<f64>) -> Array2<f64> {
        let mut a = points.clone();
        for layer in &self.point_layers {
            a = relu(layer.forward(&a));
        }
        a
    }

    /// Coordinate-wise max over the per-point features.
    pub fn pooled_feature(&self, points: &Array2<f64>) -> Array1<f64> {
        let a = self.point_features(points);
        a.fold_axis(Axis(0), f64::NEG_INFINITY, |&m, &v| m.max(v))
    }

    pub fn head(&self, feature: &Array1<f64>) -> Array1<f64> {
        let mut h = feature.clone();
        let last = self.head_layers.len().saturating_sub(1);
        for (i, layer) in self.head_layers.iter().enumerate() {
            h = layer.forward_vec(&h);
            if i < last {
                h = relu_vec(h);
            }
        }
        h
    }

    pub fn logits(&self, points: &Array2<f64>) -> Array1<f64> {
        self.head(&self.pooled_feature(points))
    }

    pub fn forward_trace(&self, points: &Array2<f64>) -> PointNetTrace {
        let mut point_inputs = Vec::with_capacity(self.point_layers.len());
        let mut point_pre = Vec::with_capacity(self.point_layers.len());
        let mut a = points.clone();
        for layer in &self.point_layers {
            let z = layer.forward(&a);
            point_inputs.push(a);
            a = relu(z.clone());
            point_pre.push(z);
        }
        let (argmax, feature) = max_pool(&a);
        let mut head_inputs = Vec::with_capacity(self.head_layers.len());
        let mut head_pre = Vec::with_capacity(self.head_layers.len());
        let mut h = feature.clone();
        let last = self.head_layers.len().saturating_sub(1);
        for (i, layer) in self.head_layers.iter().enumerate() {
            let z = layer.forward_vec(&h);
            head_inputs.push(h);
            h = if i < last { relu_vec(z.clone()) } else { z.clone() };
            head_pre.push(z);
        }
        PointNetTrace {
            point_inputs,
            point_pre,
            argmax,
            feature,
            head_inputs,
            head_pre,
            logits: h,
        }
    }

    pub fn zero_grad(&self) -> PointNetGrad {
        PointNetGrad {
            point_layers: self
                .point_layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
            head_layers: self
                .head_layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    /// Head-only backward pass; returns the gradient w.r.t. the pooled feature.
    pub fn backward_head(
        &self,
        trace: &PointNetTrace,
        dlogits: &Array1<f64>,
        grad: &mut PointNetGrad,
    ) -> Array1<f64> {
        let mut dz = dlogits.clone();
        for i in (0..self.head_layers.len()).rev() {
            let layer = &self.head_layers[i];
            let g = &mut grad.head_layers[i];
            let input = &trace.head_inputs[i];
            g.weight += &outer(&dz, input);
            g.bias += &dz;
            let mut dinput = layer.weight.t().dot(&dz);
            if i > 0 {
                let pre = &trace.head_pre[i - 1];
                dinput.zip_mut_with(pre, |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            dz = dinput;
        }
        dz
    }

    /// Accumulates parameter gradients for `dlogits` into `grad`.
    pub fn backward(&self, trace: &PointNetTrace, dlogits: &Array1<f64>, grad: &mut PointNetGrad) {
        let dfeature = self.backward_head(trace, dlogits, grad);
        let last = self.point_layers.len() - 1;
        // Only the winning point of each pooled feature receives gradient, so
        // the last point layer is handled row by row.
        let layer = &self.point_layers[last];
        let input = &trace.point_inputs[last];
        let pre = &trace.point_pre[last];
        let g = &mut grad.point_layers[last];
        let mut da = Array2::<f64>::zeros(input.raw_dim());
        for (f, (&p, &d)) in trace.argmax.iter().zip(dfeature.iter()).enumerate() {
            if d == 0.0 || pre[[p, f]] <= 0.0 {
                continue;
            }
            g.weight.row_mut(f).scaled_add(d, &input.row(p));
            g.bias[f] += d;
            if last > 0 {
                da.row_mut(p).scaled_add(d, &layer.weight.row(f));
            }
        }
        if last > 0 {
            self.backward_points_from(trace, last - 1, da, grad);
        }
    }

    /// Dense backward through point layers `0..=top`, given the gradient
    /// w.r.t. the activated output of layer `top`.
    pub fn backward_points_from(
        &self,
        trace: &PointNetTrace,
        top: usize,
        mut da: Array2<f64>,
        grad: &mut PointNetGrad,
    ) {
        for i in (0..=top).rev() {
            let mut dz = da;
            dz.zip_mut_with(&trace.point_pre[i], |d, &z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
            let g = &mut grad.point_layers[i];
            g.weight += &dz.t().dot(&trace.point_inputs[i]);
            g.bias += &dz.sum_axis(Axis(0));
            if i == 0 {
                break;
            }
            da = dz.dot(&self.point_layers[i].weight);
        }
    }
}

impl PointNetGrad {
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.point_layers.iter().chain(&self.head_layers)
    }

    pub fn scale(&mut self, s: f64) {
        for l in self.point_layers.iter_mut().chain(self.head_layers.iter_mut()) {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn add(&mut self, other: &PointNetGrad) {
        for (a, b) in self
            .point_layers
            .iter_mut()
            .chain(self.head_layers.iter_mut())
            .zip(other.layers())
        {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn max_pool(a: &Array2<f64>) -> (Vec<usize>, Array1<f64>) {
    let mut idx = vec![0usize; a.ncols()];
    let mut best = Array1::from_elem(a.ncols(), f64::NEG_INFINITY);
    for (r, row) in a.outer_iter().enumerate() {
        for (f, &v) in row.iter().enumerate() {
            if v > best[f] {
                best[f] = v;
                idx[f] = r;
            }
        }
    }
    (idx, best)
}

pub(crate) fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Rows of `points` as an `n x 3` matrix.
pub fn coords_matrix(points: &[crate::pointcloud::Point3]) -> Array2<f64> {
    let mut m = Array2::zeros((points.len(), 3));
    for (mut row, p) in m.outer_iter_mut().zip(points) {
        row[0] = p.x;
        row[1] = p.y;
        row[2] = p.z;
    }
    m
}

/// Adam over a fixed list of parameter slices.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Steps a [`PointNet`] with a matching gradient.
    pub fn step_pointnet(&mut self, net: &mut PointNet, grad: &PointNetGrad) {
        let mut params: Vec<&mut [f64]> = Vec::new();
        for l in net.layers_mut() {
            params.push(l.weight.as_slice_mut().expect("standard layout"));
            params.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        let grads: Vec<&[f64]> = grad
            .layers()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect();
        self.step(&mut params, &grads);
    }
}

// ---------------------------------------------------------------------------
// Weight blobs
// ---------------------------------------------------------------------------

/// Appends `u32` layer shapes followed by all weights and biases as LE f64.
pub(crate) fn write_layers(out: &mut Vec<u8>, layers: &[&Dense]) {
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
        out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
    }
    for l in layers {
        for v in l.weight.iter().chain(l.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct BlobReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> BlobReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BlobReader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptModel("unexpected end of model blob".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn read_layers(&mut self) -> Result<Vec<Dense>> {
        let count = self.u32()? as usize;
        if count == 0 || count > 64 {
            return Err(Error::CorruptModel(format!("implausible layer count {count}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let (i, o) = (self.u32()? as usize, self.u32()? as usize);
            if i == 0 || o == 0 || i > 1 << 16 || o > 1 << 16 {
                return Err(Error::CorruptModel(format!("bad layer shape {i}x{o}")));
            }
            shapes.push((i, o));
        }
        let mut layers = Vec::with_capacity(count);
        for (i, o) in shapes {
            let mut l = Dense::zeros(i, o);
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = self.f64()?;
                if !v.is_finite() {
                    return Err(Error::CorruptModel("non-finite weight".into()));
                }
            }
            layers.push(l);
        }
        Ok(layers)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::CorruptModel("trailing bytes in model blob".into()))
        }
    }
}
