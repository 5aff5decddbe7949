use serde::{Deserialize, Serialize};

use super::graph::{LayerKind, LayerParams, ModelGraph, Shape};
use crate::error::{Error, Result};

/// Channel-major (`[c][y][x]`) dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values for shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Flattened activations of feature map `j`.
    pub fn channel(&self, j: usize) -> &[f64] {
        let s = self.shape.spatial();
        &self.data[j * s..(j + 1) * s]
    }

    pub fn channel_mut(&mut self, j: usize) -> &mut [f64] {
        let s = self.shape.spatial();
        &mut self.data[j * s..(j + 1) * s]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }
}

/// An input image with its label and group tag. Pixels are held channel-major
/// and clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub pixels: Tensor,
    pub label: usize,
    pub group_tag: String,
}

impl Example {
    pub fn new(mut pixels: Tensor, label: usize, group_tag: impl Into<String>) -> Self {
        for v in &mut pixels.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Example {
            pixels,
            label,
            group_tag: group_tag.into(),
        }
    }
}

/// Per-layer activations (and, once computed, gradients of `p`) for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub model_hash: String,
    pub activations: Vec<Tensor>,
    /// `∂p/∂a` for every node, same shapes as `activations`.
    pub gradients: Option<Vec<Tensor>>,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub target_class: usize,
    /// Probability of `target_class`.
    pub p: f64,
}

impl ActivationTrace {
    pub fn activation(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn gradient(&self, layer: usize) -> Option<&Tensor> {
        self.gradients.as_ref().map(|g| &g[layer])
    }
}

/// Scalar the backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Softmax probability of a class.
    Probability(usize),
    /// Cross-entropy loss `-ln p_label`.
    CrossEntropy(usize),
}

/// Per-feature-map multiplicative mask applied to one node's output.
#[derive(Debug, Clone, Copy)]
pub struct Mask<'a> {
    pub layer: usize,
    pub z: &'a [f64],
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl ModelGraph {
    fn check_input(&self, pixels: &Tensor) -> Result<()> {
        let expected = self.input_shape();
        if pixels.shape != expected || pixels.data.len() != expected.len() {
            return Err(Error::ShapeMismatch {
                layer: self.node(self.input_index()).id.clone(),
                expected: expected.to_string(),
                actual: pixels.shape.to_string(),
            });
        }
        Ok(())
    }

    fn check_mask(&self, mask: &Mask<'_>) -> Result<()> {
        let n = self.node(mask.layer).channels;
        if mask.z.len() != n {
            return Err(Error::InvalidArgument(format!(
                "mask for `{}` has {} entries, layer has {n} feature maps",
                self.node(mask.layer).id,
                mask.z.len()
            )));
        }
        if let Some(v) = mask.z.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "mask value {v} outside [0, 1]"
            )));
        }
        Ok(())
    }

    /// Evaluates node `i` from already computed node outputs.
    fn eval_node(&self, i: usize, acts: &[Tensor]) -> Tensor {
        let node = self.node(i);
        let shape = node.shape();
        let ins = self.inputs_of(i);
        let mut out = Tensor::zeros(shape);
        match node.kind {
            LayerKind::Input => unreachable!("input is seeded, not evaluated"),
            LayerKind::Conv {
                kernel,
                stride,
                padding,
            } => {
                let p = self.params(i).expect("validated conv params");
                conv_forward(&acts[ins[0]], p, kernel, stride, padding, &mut out);
            }
            LayerKind::Relu => {
                for (o, &x) in out.data.iter_mut().zip(&acts[ins[0]].data) {
                    *o = x.max(0.0);
                }
            }
            LayerKind::PoolMax { size, stride } => {
                pool_forward(&acts[ins[0]], size, stride, true, &mut out);
            }
            LayerKind::PoolAvg { size, stride } => {
                pool_forward(&acts[ins[0]], size, stride, false, &mut out);
            }
            LayerKind::GlobalAvgPool => {
                let x = &acts[ins[0]];
                for c in 0..shape.channels {
                    let ch = x.channel(c);
                    out.data[c] = ch.iter().sum::<f64>() / ch.len() as f64;
                }
            }
            LayerKind::Dense => {
                let p = self.params(i).expect("validated dense params");
                let x = &acts[ins[0]].data;
                for (o, (row, b)) in out
                    .data
                    .iter_mut()
                    .zip(p.weight.chunks_exact(x.len()).zip(&p.bias))
                {
                    *o = b + dot(row, x);
                }
            }
            LayerKind::Add => {
                let (a, b) = (&acts[ins[0]].data, &acts[ins[1]].data);
                for (o, (x, y)) in out.data.iter_mut().zip(a.iter().zip(b)) {
                    *o = x + y;
                }
            }
            LayerKind::Softmax => {
                out.data = softmax(&acts[ins[0]].data);
            }
        }
        out
    }

    /// Forward pass from node `start` onward, reusing `acts[..start]`.
    fn propagate(&self, acts: &mut Vec<Tensor>, start: usize, mask: Option<Mask<'_>>) {
        for i in start..self.len() {
            let mut t = self.eval_node(i, acts);
            if let Some(m) = mask.filter(|m| m.layer == i) {
                apply_mask(&mut t, m.z);
            }
            if acts.len() > i {
                acts[i] = t;
            } else {
                acts.push(t);
            }
        }
    }

    fn run(&self, pixels: &Tensor, mask: Option<Mask<'_>>) -> Result<Vec<Tensor>> {
        self.check_input(pixels)?;
        if let Some(m) = &mask {
            self.check_mask(m)?;
        }
        // the input is always node 0: every other node needs an earlier producer
        let mut input = pixels.clone();
        if let Some(m) = mask.filter(|m| m.layer == 0) {
            apply_mask(&mut input, m.z);
        }
        let mut acts = Vec::with_capacity(self.len());
        acts.push(input);
        self.propagate(&mut acts, 1, mask);
        Ok(acts)
    }

    fn make_trace(&self, acts: Vec<Tensor>, target: Option<usize>) -> Result<ActivationTrace> {
        let probabilities = acts[self.output_index()].data.clone();
        let predicted_class = argmax(&probabilities);
        let target_class = target.unwrap_or(predicted_class);
        if target_class >= probabilities.len() {
            return Err(Error::OutOfRange {
                index: target_class,
                len: probabilities.len(),
            });
        }
        Ok(ActivationTrace {
            model_hash: self.hash().to_string(),
            p: probabilities[target_class],
            activations: acts,
            gradients: None,
            probabilities,
            predicted_class,
            target_class,
        })
    }

    /// Runs inference and records every node's output. `target` selects the
    /// class whose probability becomes `p`; `None` uses the argmax class.
    pub fn forward(&self, example: &Example, target: Option<usize>) -> Result<ActivationTrace> {
        let acts = self.run(&example.pixels, None)?;
        self.make_trace(acts, target)
    }

    /// Forward pass plus `∂p/∂a` for every node.
    pub fn trace(&self, example: &Example, target: Option<usize>) -> Result<ActivationTrace> {
        let mut trace = self.forward(example, target)?;
        trace.gradients = Some(self.backward_feature_gradients(&trace)?);
        Ok(trace)
    }

    /// Target-class probability with feature map `j` of `layer` scaled by `z[j]`.
    pub fn masked_forward(
        &self,
        example: &Example,
        layer: &str,
        z: &[f64],
        target: Option<usize>,
    ) -> Result<f64> {
        let layer = self.layer_index(layer)?;
        let mask = Mask { layer, z };
        let acts = self.run(&example.pixels, Some(mask))?;
        let probs = &acts[self.output_index()].data;
        let t = match target {
            Some(t) => t,
            None => argmax(&self.run(&example.pixels, None)?[self.output_index()].data),
        };
        probs
            .get(t)
            .copied()
            .ok_or(Error::OutOfRange { index: t, len: probs.len() })
    }

    /// Like [`masked_forward`](Self::masked_forward) but reuses the trace's
    /// activations upstream of the masked layer. Targets the trace's class.
    pub fn masked_forward_from_trace(
        &self,
        trace: &ActivationTrace,
        layer: usize,
        z: &[f64],
    ) -> Result<f64> {
        self.check_trace(trace)?;
        let mask = Mask { layer, z };
        self.check_mask(&mask)?;
        Ok(self.masked_activations_from_trace(trace, mask)[self.output_index()].data
            [trace.target_class])
    }

    /// All node outputs under a mask, recomputing only from the masked layer on.
    pub fn masked_activations_from_trace(&self, trace: &ActivationTrace, mask: Mask<'_>) -> Vec<Tensor> {
        let mut own = trace.activations[mask.layer].clone();
        apply_mask(&mut own, mask.z);
        self.resume(&trace.activations, mask.layer, own)
    }

    /// Node outputs with `layer`'s output replaced by `value`; upstream
    /// activations come from the trace, downstream ones are recomputed.
    pub fn forward_with_override(
        &self,
        trace: &ActivationTrace,
        layer: usize,
        value: Tensor,
    ) -> Result<Vec<Tensor>> {
        self.check_trace(trace)?;
        if layer >= self.len() || value.shape != self.node(layer).shape() || value.data.len() != value.shape.len() {
            return Err(Error::ShapeMismatch {
                layer: self.nodes().get(layer).map(|n| n.id.clone()).unwrap_or_default(),
                expected: self.nodes().get(layer).map(|n| n.shape().to_string()).unwrap_or_default(),
                actual: value.shape.to_string(),
            });
        }
        Ok(self.resume(&trace.activations, layer, value))
    }

    fn resume(&self, upstream: &[Tensor], layer: usize, value: Tensor) -> Vec<Tensor> {
        let mut acts: Vec<Tensor> = upstream[..layer].to_vec();
        acts.push(value);
        self.propagate(&mut acts, layer + 1, None);
        acts
    }

    pub(crate) fn check_trace(&self, trace: &ActivationTrace) -> Result<()> {
        if trace.model_hash != self.hash() {
            return Err(Error::TraceMismatch(format!(
                "trace was produced by model {}, not {}",
                short(&trace.model_hash),
                short(self.hash())
            )));
        }
        if trace.activations.len() != self.len()
            || trace
                .activations
                .iter()
                .zip(self.nodes())
                .any(|(t, n)| t.shape != n.shape() || t.data.len() != t.shape.len())
        {
            return Err(Error::TraceMismatch("activation shapes differ from the model".into()));
        }
        Ok(())
    }

    /// Exact reverse-mode gradients of the trace's `p` with respect to every
    /// node output, evaluated at the unmasked activations.
    pub fn backward_feature_gradients(&self, trace: &ActivationTrace) -> Result<Vec<Tensor>> {
        self.check_trace(trace)?;
        Ok(self.backward(
            &trace.activations,
            Objective::Probability(trace.target_class),
            None,
        ))
    }

    /// Gradient of the cross-entropy loss at `label` with respect to the input pixels.
    pub fn input_gradient(&self, example: &Example, label: usize) -> Result<Tensor> {
        if label >= self.num_classes() {
            return Err(Error::OutOfRange {
                index: label,
                len: self.num_classes(),
            });
        }
        let acts = self.run(&example.pixels, None)?;
        let mut grads = self.backward(&acts, Objective::CrossEntropy(label), None);
        Ok(grads.swap_remove(self.input_index()))
    }

    /// Loss value and parameter gradients for one example, used by training.
    pub fn loss_and_param_grads(
        &self,
        example: &Example,
        label: usize,
        grads: &mut [Option<LayerParams>],
    ) -> Result<f64> {
        let acts = self.run(&example.pixels, None)?;
        let p = acts[self.output_index()].data[label];
        self.backward(&acts, Objective::CrossEntropy(label), Some(grads));
        Ok(-p.max(f64::MIN_POSITIVE).ln())
    }

    /// Reverse sweep. Returns `∂objective/∂(output of node)` for every node and
    /// optionally accumulates parameter gradients into `param_grads`.
    pub(crate) fn backward(
        &self,
        acts: &[Tensor],
        objective: Objective,
        mut param_grads: Option<&mut [Option<LayerParams>]>,
    ) -> Vec<Tensor> {
        let mut grads: Vec<Tensor> = self.nodes().iter().map(|n| Tensor::zeros(n.shape())).collect();
        let out = self.output_index();
        let probs = &acts[out].data;
        let logits_grad: Vec<f64> = match objective {
            Objective::Probability(t) => {
                grads[out].data[t] = 1.0;
                probs
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| probs[t] * (if i == t { 1.0 } else { 0.0 } - s))
                    .collect()
            }
            Objective::CrossEntropy(label) => {
                if probs[label] > 0.0 {
                    grads[out].data[label] = -1.0 / probs[label];
                }
                probs
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| s - if i == label { 1.0 } else { 0.0 })
                    .collect()
            }
        };
        let logits = self.inputs_of(out)[0];
        for (g, v) in grads[logits].data.iter_mut().zip(logits_grad) {
            *g += v;
        }

        for i in (0..self.len()).rev() {
            if i == out || i == self.input_index() {
                continue;
            }
            let node = self.node(i);
            let ins = self.inputs_of(i);
            let gy = std::mem::replace(&mut grads[i], Tensor::zeros(node.shape()));
            match node.kind {
                LayerKind::Input | LayerKind::Softmax => {}
                LayerKind::Conv {
                    kernel,
                    stride,
                    padding,
                } => {
                    let p = self.params(i).expect("validated conv params");
                    let pg = param_grads.as_deref_mut().and_then(|g| g[i].as_mut());
                    conv_backward(&acts[ins[0]], p, kernel, stride, padding, &gy, &mut grads[ins[0]], pg);
                }
                LayerKind::Relu => {
                    let x = &acts[ins[0]].data;
                    let gx = &mut grads[ins[0]].data;
                    for k in 0..x.len() {
                        if x[k] > 0.0 {
                            gx[k] += gy.data[k];
                        }
                    }
                }
                LayerKind::PoolMax { size, stride } => {
                    pool_backward(&acts[ins[0]], size, stride, true, &gy, &mut grads[ins[0]]);
                }
                LayerKind::PoolAvg { size, stride } => {
                    pool_backward(&acts[ins[0]], size, stride, false, &gy, &mut grads[ins[0]]);
                }
                LayerKind::GlobalAvgPool => {
                    let gx = &mut grads[ins[0]];
                    let s = gx.shape.spatial();
                    for c in 0..gy.shape.channels {
                        let g = gy.data[c] / s as f64;
                        for v in gx.channel_mut(c) {
                            *v += g;
                        }
                    }
                }
                LayerKind::Dense => {
                    let p = self.params(i).expect("validated dense params");
                    let x = &acts[ins[0]].data;
                    let gx = &mut grads[ins[0]].data;
                    for (row, g) in p.weight.chunks_exact(x.len()).zip(&gy.data) {
                        for (gxk, w) in gx.iter_mut().zip(row) {
                            *gxk += g * w;
                        }
                    }
                    if let Some(pg) = param_grads.as_deref_mut().and_then(|g| g[i].as_mut()) {
                        for ((grow, gb), g) in pg
                            .weight
                            .chunks_exact_mut(x.len())
                            .zip(pg.bias.iter_mut())
                            .zip(&gy.data)
                        {
                            *gb += g;
                            for (gw, xk) in grow.iter_mut().zip(x) {
                                *gw += g * xk;
                            }
                        }
                    }
                }
                LayerKind::Add => {
                    for &src in ins {
                        for (gx, g) in grads[src].data.iter_mut().zip(&gy.data) {
                            *gx += g;
                        }
                    }
                }
            }
            grads[i] = gy;
        }
        grads
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

fn apply_mask(t: &mut Tensor, z: &[f64]) {
    for (j, &zj) in z.iter().enumerate() {
        for v in t.channel_mut(j) {
            *v *= zj;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_forward(x: &Tensor, p: &LayerParams, k: usize, stride: usize, pad: usize, out: &mut Tensor) {
    let (ic, ih, iw) = (x.shape.channels, x.shape.height as isize, x.shape.width as isize);
    let (oc, oh, ow) = (out.shape.channels, out.shape.height, out.shape.width);
    for o in 0..oc {
        let bias = p.bias[o];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for c in 0..ic {
                    let wbase = (o * ic + c) * k * k;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= iw {
                                continue;
                            }
                            acc += p.weight[wbase + ky * k + kx]
                                * x.data[(c * ih as usize + iy as usize) * iw as usize + ix as usize];
                        }
                    }
                }
                out.data[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    p: &LayerParams,
    k: usize,
    stride: usize,
    pad: usize,
    gy: &Tensor,
    gx: &mut Tensor,
    mut pg: Option<&mut LayerParams>,
) {
    let (ic, ih, iw) = (x.shape.channels, x.shape.height as isize, x.shape.width as isize);
    let (oc, oh, ow) = (gy.shape.channels, gy.shape.height, gy.shape.width);
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy.data[(o * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                if let Some(pg) = pg.as_deref_mut() {
                    pg.bias[o] += g;
                }
                for c in 0..ic {
                    let wbase = (o * ic + c) * k * k;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= iw {
                                continue;
                            }
                            let xi = (c * ih as usize + iy as usize) * iw as usize + ix as usize;
                            gx.data[xi] += g * p.weight[wbase + ky * k + kx];
                            if let Some(pg) = pg.as_deref_mut() {
                                pg.weight[wbase + ky * k + kx] += g * x.data[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pool_forward(x: &Tensor, size: usize, stride: usize, max: bool, out: &mut Tensor) {
    let (h, w) = (x.shape.height, x.shape.width);
    let (oh, ow) = (out.shape.height, out.shape.width);
    for c in 0..out.shape.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                for ky in 0..size {
                    for kx in 0..size {
                        let v = x.data[(c * h + oy * stride + ky) * w + ox * stride + kx];
                        if max {
                            acc = acc.max(v);
                        } else {
                            acc += v;
                        }
                    }
                }
                if !max {
                    acc /= (size * size) as f64;
                }
                out.data[(c * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

fn pool_backward(x: &Tensor, size: usize, stride: usize, max: bool, gy: &Tensor, gx: &mut Tensor) {
    let (h, w) = (x.shape.height, x.shape.width);
    let (oh, ow) = (gy.shape.height, gy.shape.width);
    for c in 0..gy.shape.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy.data[(c * oh + oy) * ow + ox];
                if max {
                    // first maximal element takes the gradient
                    let mut best = None;
                    let mut best_v = f64::NEG_INFINITY;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = (c * h + oy * stride + ky) * w + ox * stride + kx;
                            if x.data[idx] > best_v {
                                best_v = x.data[idx];
                                best = Some(idx);
                            }
                        }
                    }
                    if let Some(idx) = best {
                        gx.data[idx] += g;
                    }
                } else {
                    let share = g / (size * size) as f64;
                    for ky in 0..size {
                        for kx in 0..size {
                            gx.data[(c * h + oy * stride + ky) * w + ox * stride + kx] += share;
                        }
                    }
                }
            }
        }
    }
}
