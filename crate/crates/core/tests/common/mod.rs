//! Independent reference implementations used by the integration suites.
#![allow(dead_code)]

use datapath_core::nnet::{ActivationTrace, Example, LayerKind, LayerParams, ModelBuilder, ModelGraph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small random CNN: conv/relu stem, optional residual block, a pooling
/// stage, a second conv/relu, global pooling and a dense head.
pub fn random_net(seed: u64) -> ModelGraph {
    let mut r = rng(seed);
    let channels = r.random_range(1..=2);
    let side = r.random_range(6..=8);
    let n1 = r.random_range(2..=6);
    let n2 = r.random_range(2..=8);
    let classes = r.random_range(2..=4);
    let mut b = ModelBuilder::new("input", Shape::new(channels, side, side));
    b.group(&["stem"]);
    b.conv("c1", "input", n1, 3, 1, 1);
    let mut last = b.relu("r1", "c1");
    if r.random_bool(0.6) {
        b.group(&["block"]);
        b.conv("b1", &last, n1, 3, 1, 1);
        b.relu("b1r", "b1");
        b.conv("b2", "b1r", n1, 3, 1, 1);
        b.add("badd", "b2", &last);
        last = b.relu("bout", "badd");
    }
    b.group(&["down"]);
    last = if r.random_bool(0.5) {
        b.max_pool("pool", &last, 2, 2)
    } else {
        b.avg_pool("pool", &last, 2, 2)
    };
    b.conv("c2", &last, n2, 3, 1, 1);
    b.relu("r2", "c2");
    b.group(&["head"]);
    b.global_avg_pool("gap", "r2");
    b.dense("fc", "gap", classes);
    b.softmax("prob", "fc");
    let mut m = b.build().unwrap();
    m.update_params(|_, p: &mut LayerParams| {
        for w in &mut p.weight {
            *w = r.random_range(-0.6..0.6);
        }
        for v in &mut p.bias {
            *v = r.random_range(-0.1..0.1);
        }
    })
    .unwrap();
    m
}

pub fn random_example(model: &ModelGraph, seed: u64) -> Example {
    let mut r = rng(seed);
    let shape = model.input_shape();
    let px = (0..shape.len()).map(|_| r.random_range(0.0..1.0)).collect();
    Example::new(Tensor::from_vec(shape, px).unwrap(), 0, "normal")
}

/// Signature of every piecewise-linear branch taken: relu input signs and
/// max-pool winners. Equal signatures mean no kink lies between two runs.
pub fn branch_signature(model: &ModelGraph, acts: &[Tensor]) -> Vec<usize> {
    let mut sig = Vec::new();
    for (i, node) in model.nodes().iter().enumerate() {
        match node.kind {
            LayerKind::Relu => {
                let input = &acts[model.inputs_of(i)[0]];
                sig.extend(input.data.iter().map(|&v| usize::from(v > 0.0)));
            }
            LayerKind::PoolMax { size, stride } => {
                let input = &acts[model.inputs_of(i)[0]];
                let s = input.shape;
                for c in 0..node.channels {
                    for oy in 0..node.height {
                        for ox in 0..node.width {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for dy in 0..size {
                                for dx in 0..size {
                                    let (y, x) = (oy * stride + dy, ox * stride + dx);
                                    let v = input.data[(c * s.height + y) * s.width + x];
                                    if v > best.0 {
                                        best = (v, dy * size + dx);
                                    }
                                }
                            }
                            sig.push(best.1);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    sig
}

/// Relative error with a small floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub struct FdCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

pub const FD_STEP: f64 = 1e-5;

/// Central differences of the trace's target probability with respect to
/// random elements of `layer`'s output, compared with the trace gradients.
pub fn check_feature_gradients(model: &ModelGraph, trace: &ActivationTrace, layer: usize, samples: usize, seed: u64) -> FdCheck {
    let grads = trace.gradients.as_ref().expect("trace with gradients");
    let mut r = rng(seed);
    let len = trace.activations[layer].data.len();
    let mut out = FdCheck {
        checked: 0,
        skipped: 0,
        worst: 0.0,
    };
    for _ in 0..samples {
        let k = r.random_range(0..len);
        let run = |delta: f64| {
            let mut v = trace.activations[layer].clone();
            v.data[k] += delta;
            model.forward_with_override(trace, layer, v).unwrap()
        };
        let (plus, minus) = (run(FD_STEP), run(-FD_STEP));
        if branch_signature(model, &plus) != branch_signature(model, &minus) {
            out.skipped += 1;
            continue;
        }
        let out_idx = model.output_index();
        let t = trace.target_class;
        let fd = (plus[out_idx].data[t] - minus[out_idx].data[t]) / (2.0 * FD_STEP);
        out.worst = out.worst.max(rel_err(grads[layer].data[k], fd));
        out.checked += 1;
    }
    out
}

/// Central differences of the cross-entropy loss with respect to input pixels.
pub fn check_input_gradient(model: &ModelGraph, example: &Example, label: usize, samples: usize, seed: u64) -> FdCheck {
    let g = model.input_gradient(example, label).unwrap();
    let mut r = rng(seed);
    let mut out = FdCheck {
        checked: 0,
        skipped: 0,
        worst: 0.0,
    };
    for _ in 0..samples {
        let k = r.random_range(0..g.data.len());
        let run = |delta: f64| {
            let mut e = example.clone();
            e.pixels.data[k] += delta;
            model.forward(&e, Some(label)).unwrap()
        };
        let (plus, minus) = (run(FD_STEP), run(-FD_STEP));
        if branch_signature(model, &plus.activations) != branch_signature(model, &minus.activations) {
            out.skipped += 1;
            continue;
        }
        let fd = (-plus.p.ln() + minus.p.ln()) / (2.0 * FD_STEP);
        out.worst = out.worst.max(rel_err(g.data[k], fd));
        out.checked += 1;
    }
    out
}

/// Dense QP `z (Q + λI) zᵀ − 2 bᵀz` from contribution rows.
pub struct DenseQp {
    pub h: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl DenseQp {
    pub fn from_rows(rows: &[Vec<f64>], lambda: f64) -> Self {
        let n = rows[0].len();
        let mut h = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        for c in rows {
            let q: f64 = c.iter().sum();
            for i in 0..n {
                b[i] += q * c[i];
                for j in 0..n {
                    h[i][j] += c[i] * c[j];
                }
            }
        }
        for (i, row) in h.iter_mut().enumerate() {
            row[i] += lambda;
        }
        DenseQp { h, b }
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let n = z.len();
        let mut f = 0.0;
        for i in 0..n {
            for j in 0..n {
                f += z[i] * self.h[i][j] * z[j];
            }
            f -= 2.0 * self.b[i] * z[i];
        }
        f
    }
}

fn gauss_solve(mut a: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (rhs[i] - s) / a[i][i];
    }
    Some(x)
}

/// Exhaustive active-set oracle: every variable is at 0, at 1, or free; the
/// free block solves its stationarity system. Returns the best box-feasible
/// candidate.
pub fn qp_oracle(qp: &DenseQp) -> (f64, Vec<f64>) {
    let n = qp.b.len();
    let mut best = (f64::INFINITY, vec![0.0; n]);
    let mut state = vec![0u8; n];
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut z: Vec<f64> = state.iter().map(|&s| if s == 1 { 1.0 } else { 0.0 }).collect();
        let feasible = if free.is_empty() {
            true
        } else {
            let a: Vec<Vec<f64>> = free.iter().map(|&i| free.iter().map(|&j| qp.h[i][j]).collect()).collect();
            let rhs: Vec<f64> = free
                .iter()
                .map(|&i| qp.b[i] - (0..n).filter(|&j| state[j] == 1).map(|j| qp.h[i][j]).sum::<f64>())
                .collect();
            match gauss_solve(a, rhs) {
                Some(x) if x.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)) => {
                    for (&i, v) in free.iter().zip(x) {
                        z[i] = v.clamp(0.0, 1.0);
                    }
                    true
                }
                _ => false,
            }
        };
        if feasible {
            let f = qp.objective(&z);
            if f < best.0 {
                best = (f, z);
            }
        }
        // next assignment in base 3
        let mut i = 0;
        while i < n && state[i] == 2 {
            state[i] = 0;
            i += 1;
        }
        if i == n {
            break;
        }
        state[i] += 1;
    }
    best
}

/// Brute-force subset objective `(p − p_F)² + λ|F|²` over all subsets of a
/// layer's feature maps. Returns `(best objective, objective of each mask)`.
pub fn subset_objectives(model: &ModelGraph, trace: &ActivationTrace, layer: usize, lambda: f64) -> Vec<f64> {
    let n = model.node(layer).channels;
    (0..1usize << n)
        .map(|mask| {
            let z: Vec<f64> = (0..n).map(|j| ((mask >> j) & 1) as f64).collect();
            let pm = model.masked_forward_from_trace(trace, layer, &z).unwrap();
            let size = mask.count_ones() as f64;
            (trace.p - pm).powi(2) + lambda * size * size
        })
        .collect()
}

/// Optimal printing-neatly cost by trying every subset of break positions.
pub fn segmentation_oracle(widths: &[f64], cuts: &[bool], line_width: f64, lambda: f64) -> f64 {
    let m = widths.len();
    if m == 0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for mask in 0..1u32 << (m - 1) {
        let mut cost = 0.0;
        let mut used = 0.0;
        let mut ok = true;
        for i in 0..m {
            used += widths[i];
            if used > line_width {
                ok = false;
                break;
            }
            if i + 1 < m && mask >> i & 1 == 1 {
                cost += line_width - used + if cuts[i] { lambda } else { 0.0 };
                used = 0.0;
            }
        }
        if ok && cost < best {
            best = cost;
        }
    }
    best
}
