use serde::Serialize;

use crate::error::{Error, Result};
use crate::nnet::{dot, ActivationTrace, ModelGraph};

/// Box-constrained quadratic relaxation of critical-feature-map selection at
/// one layer:
///
/// ```text
/// minimize  z (Q + λI) zᵀ − 2 Σ_k q_k (c_k · z)   subject to  0 ≤ z ≤ 1
/// Q = Σ_k c_kᵀ c_k
/// ```
///
/// where `c_k` holds the per-feature-map contributions `a_j · ∂p/∂a_j` of
/// example `k` and `q_k = Σ_j c_k[j]`. `Q` is never materialized: it is kept
/// as the list of rank-1 factors `c_k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticProgram {
    pub n: usize,
    pub lambda: f64,
    pub contributions: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
}

/// Default penalty weight for a layer with `n` feature maps.
pub fn default_lambda(n: usize) -> f64 {
    0.1 / (n * n) as f64
}

impl QuadraticProgram {
    /// Builds the program from per-example contribution vectors.
    pub fn from_contributions(contributions: Vec<Vec<f64>>, lambda: f64) -> Result<Self> {
        let n = contributions.first().map(Vec::len).unwrap_or(0);
        if n == 0 {
            return Err(Error::InvalidArgument("quadratic program has no variables".into()));
        }
        if contributions.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument("contribution vectors differ in length".into()));
        }
        if contributions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quadratic program contributions".into()));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let totals = contributions.iter().map(|c| c.iter().sum()).collect();
        Ok(QuadraticProgram {
            n,
            lambda,
            contributions,
            totals,
        })
    }

    /// Contribution vector of the first (or only) example.
    pub fn q_vec(&self) -> &[f64] {
        &self.contributions[0]
    }

    /// `q = Σ_j q_j` for the first (or only) example.
    pub fn q_sum(&self) -> f64 {
        self.totals[0]
    }

    pub fn examples(&self) -> usize {
        self.contributions.len()
    }

    /// Aggregated linear coefficient `b = Σ_k q_k c_k`.
    pub fn linear(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.n];
        for (c, q) in self.contributions.iter().zip(&self.totals) {
            for (bj, cj) in b.iter_mut().zip(c) {
                *bj += q * cj;
            }
        }
        b
    }

    /// `(Q + λI) v`.
    pub fn hessian_product(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|x| self.lambda * x).collect();
        for c in &self.contributions {
            let s = dot(c, v);
            if s != 0.0 {
                for (o, cj) in out.iter_mut().zip(c) {
                    *o += s * cj;
                }
            }
        }
        out
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let quad: f64 = self.contributions.iter().map(|c| dot(c, z).powi(2)).sum::<f64>()
            + self.lambda * dot(z, z);
        quad - 2.0 * dot(&self.linear(), z)
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let hz = self.hessian_product(z);
        hz.iter()
            .zip(self.linear())
            .map(|(h, b)| 2.0 * (h - b))
            .collect()
    }

    /// Dense `Q` (without the λ term); for inspection and small problems.
    pub fn q_matrix(&self) -> Vec<Vec<f64>> {
        let mut q = vec![vec![0.0; self.n]; self.n];
        for c in &self.contributions {
            for i in 0..self.n {
                for j in 0..self.n {
                    q[i][j] += c[i] * c[j];
                }
            }
        }
        q
    }
}

/// Per-feature-map contributions `a_j · ∂p/∂a_j` of one trace at `layer`.
pub fn contributions(model: &ModelGraph, trace: &ActivationTrace, layer: usize) -> Result<Vec<f64>> {
    let grads = trace
        .gradients
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("trace has no gradients".into()))?;
    if layer >= model.len() {
        return Err(Error::OutOfRange {
            index: layer,
            len: model.len(),
        });
    }
    let a = &trace.activations[layer];
    let g = &grads[layer];
    if a.shape != g.shape {
        return Err(Error::TraceMismatch("gradient shape differs from activation".into()));
    }
    Ok((0..a.shape.channels)
        .map(|j| dot(a.channel(j), g.channel(j)))
        .collect())
}

/// Builds the (set-form) program for `layer` from traces with gradients.
pub fn build_qp(
    model: &ModelGraph,
    traces: &[ActivationTrace],
    layer: &str,
    lambda: Option<f64>,
) -> Result<QuadraticProgram> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no traces".into()));
    }
    let idx = model.layer_index(layer)?;
    let n = model.node(idx).channels;
    let mut rows = Vec::with_capacity(traces.len());
    for t in traces {
        model.check_trace(t)?;
        rows.push(contributions(model, t, idx)?);
    }
    QuadraticProgram::from_contributions(rows, lambda.unwrap_or_else(|| default_lambda(n)))
}

/// Exact prediction drop under a mask and its first-order estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaylorGap {
    /// `p(x) − p(x; z)`
    pub exact: f64,
    /// `Σ_j (1 − z_j) a_j · ∂p/∂a_j`
    pub linear: f64,
}

pub fn taylor_gap(model: &ModelGraph, trace: &ActivationTrace, layer: &str, z: &[f64]) -> Result<TaylorGap> {
    let idx = model.layer_index(layer)?;
    let c = contributions(model, trace, idx)?;
    let masked = model.masked_forward_from_trace(trace, idx, z)?;
    let linear = c.iter().zip(z).map(|(cj, zj)| (1.0 - zj) * cj).sum();
    Ok(TaylorGap {
        exact: trace.p - masked,
        linear,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_example_construction() {
        let qp = QuadraticProgram::from_contributions(vec![vec![1.0, 0.0]], 0.1).unwrap();
        assert_eq!(qp.q_matrix(), vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(qp.q_sum(), 1.0);
        assert_eq!(qp.linear(), vec![1.0, 0.0]);
        assert_eq!(default_lambda(2), 0.025);
    }

    #[test]
    fn duplicated_examples_double_the_terms() {
        let c = vec![0.3, -0.2, 0.7];
        let one = QuadraticProgram::from_contributions(vec![c.clone()], 0.0).unwrap();
        let two = QuadraticProgram::from_contributions(vec![c.clone(), c], 0.0).unwrap();
        for (a, b) in one.q_matrix().iter().flatten().zip(two.q_matrix().iter().flatten()) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in one.linear().iter().zip(two.linear()) {
            assert_eq!(2.0 * a, b);
        }
    }

    #[test]
    fn objective_matches_literal_evaluation() {
        let c = vec![0.4, -1.3, 0.25];
        let lambda = 0.05;
        let qp = QuadraticProgram::from_contributions(vec![c.clone()], lambda).unwrap();
        let q: f64 = c.iter().sum();
        for z in [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.2, 0.9, 0.5], [1.0, 0.0, 0.33]] {
            // z (Q + λI) zᵀ − 2 q (c · z), written out term by term
            let mut lit = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let m = c[i] * c[j] + if i == j { lambda } else { 0.0 };
                    lit += z[i] * m * z[j];
                }
            }
            lit -= 2.0 * q * (c[0] * z[0] + c[1] * z[1] + c[2] * z[2]);
            assert!((qp.objective(&z) - lit).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let qp = QuadraticProgram::from_contributions(vec![vec![0.4, -1.3, 0.25], vec![1.0, 0.5, 0.0]], 0.02)
            .unwrap();
        let z = [0.3, 0.6, 0.1];
        let g = qp.gradient(&z);
        for j in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += 1e-6;
            zm[j] -= 1e-6;
            let fd = (qp.objective(&zp) - qp.objective(&zm)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            QuadraticProgram::from_contributions(vec![vec![f64::NAN]], 0.1),
            Err(Error::NonFinite(_))
        ));
        assert!(QuadraticProgram::from_contributions(vec![vec![]], 0.1).is_err());
        assert!(QuadraticProgram::from_contributions(vec![vec![1.0]], -1.0).is_err());
    }
}
