//! Projected Newton method for the box-constrained program in [`super::qp`].
//!
//! Each iteration splits the variables into a binding set (at a bound with the
//! gradient pushing outward) and a free set. Free variables take a Newton step
//! computed by conjugate gradients on the factored Hessian, binding ones a
//! steepest-descent step; the combined step is projected back onto the box
//! and backtracked until the Armijo condition holds.

use serde::{Deserialize, Serialize};

use super::qp::QuadraticProgram;
use crate::error::{Error, Result};
use crate::nnet::dot;

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Projected-gradient tolerance, relative to the gradient scale of the
    /// problem at the starting point.
    pub tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 200,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub z: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Infinity norm of `z − P(z − ∇f)` at the returned point.
    pub projected_gradient_norm: f64,
    pub converged: bool,
    /// Objective after every accepted iteration, starting point first.
    pub history: Vec<f64>,
}

fn project(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn projected_gradient_norm(z: &[f64], g: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .map(|(zi, gi)| (zi - project(zi - gi)).abs())
        .fold(0.0, f64::max)
}

/// `H_FF x = rhs` restricted to `free`, where `H = 2(Q + λI)`.
fn conjugate_gradient(qp: &QuadraticProgram, free: &[usize], rhs: &[f64]) -> Vec<f64> {
    let n = qp.n;
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut full = vec![0.0; n];
        for (k, &i) in free.iter().enumerate() {
            full[i] = v[k];
        }
        let h = qp.hessian_product(&full);
        free.iter().map(|&i| 2.0 * h[i]).collect()
    };
    let m = free.len();
    let mut x = vec![0.0; m];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let stop = rr * 1e-28;
    for _ in 0..(2 * m + 10) {
        if rr <= stop || rr == 0.0 {
            break;
        }
        let hp = apply(&p);
        let curv = dot(&p, &hp);
        if curv <= 0.0 {
            break;
        }
        let alpha = rr / curv;
        for k in 0..m {
            x[k] += alpha * p[k];
            r[k] -= alpha * hp[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..m {
            p[k] = r[k] + beta * p[k];
        }
    }
    x
}

/// Minimizes the program over `[0, 1]^n`, starting from `z = 1`.
pub fn solve(qp: &QuadraticProgram, opts: &SolverOptions) -> Result<SolveReport> {
    if qp.n == 0 {
        return Err(Error::InvalidArgument("empty quadratic program".into()));
    }
    if qp.contributions.iter().flatten().any(|v| !v.is_finite())
        || !qp.lambda.is_finite()
        || qp.totals.iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("quadratic program".into()));
    }
    if opts.max_iterations == 0 || !(opts.tolerance > 0.0 && opts.tolerance.is_finite()) {
        return Err(Error::InvalidArgument(
            "solver needs max_iterations >= 1 and a positive tolerance".into(),
        ));
    }

    let n = qp.n;
    let mut z = vec![1.0; n];
    let mut f = qp.objective(&z);
    let mut g = qp.gradient(&z);
    let linear = qp.linear();
    let scale = g
        .iter()
        .chain(&linear)
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let tol = opts.tolerance * scale;
    let mut history = vec![f];
    let mut pg = projected_gradient_norm(&z, &g);
    let mut iterations = 0;

    while pg > tol && iterations < opts.max_iterations {
        iterations += 1;
        let eps = pg.min(1e-3);
        let binding: Vec<bool> = (0..n)
            .map(|i| (z[i] <= eps && g[i] > 0.0) || (z[i] >= 1.0 - eps && g[i] < 0.0))
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !binding[i]).collect();

        let mut d: Vec<f64> = g.iter().map(|gi| -gi).collect();
        if !free.is_empty() {
            let rhs: Vec<f64> = free.iter().map(|&i| -g[i]).collect();
            let step = conjugate_gradient(qp, &free, &rhs);
            if dot(&step, &rhs) > 0.0 {
                for (k, &i) in free.iter().enumerate() {
                    d[i] = step[k];
                }
            }
        }

        let accepted = line_search(qp, &z, f, &g, &d).or_else(|| {
            // Newton direction failed to descend; fall back to the projected gradient path.
            let steepest: Vec<f64> = g.iter().map(|gi| -gi).collect();
            line_search(qp, &z, f, &g, &steepest)
        });
        match accepted {
            Some((z_new, f_new)) => {
                z = z_new;
                f = f_new;
                history.push(f);
            }
            None => break,
        }
        g = qp.gradient(&z);
        pg = projected_gradient_norm(&z, &g);
    }

    Ok(SolveReport {
        converged: pg <= tol,
        objective: f,
        projected_gradient_norm: pg,
        iterations,
        history,
        z,
    })
}

fn line_search(qp: &QuadraticProgram, z: &[f64], f: f64, g: &[f64], d: &[f64]) -> Option<(Vec<f64>, f64)> {
    let mut alpha = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let cand: Vec<f64> = z.iter().zip(d).map(|(zi, di)| project(zi + alpha * di)).collect();
        let decrease: f64 = g.iter().zip(cand.iter().zip(z)).map(|(gi, (c, zi))| gi * (c - zi)).sum();
        if decrease < 0.0 {
            let f_new = qp.objective(&cand);
            if f_new <= f + ARMIJO * decrease {
                return Some((cand, f_new));
            }
        } else if cand.as_slice() == z {
            return None;
        }
        alpha *= 0.5;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp(rows: Vec<Vec<f64>>, lambda: f64) -> QuadraticProgram {
        QuadraticProgram::from_contributions(rows, lambda).unwrap()
    }

    #[test]
    fn interior_stationary_point() {
        // 1.1 z1² + 0.1 z2² − 2 z1  →  z1 = 1/1.1, z2 = 0
        let r = solve(&qp(vec![vec![1.0, 0.0]], 0.1), &SolverOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.z[0] - 1.0 / 1.1).abs() < 1e-9, "{:?}", r.z);
        assert!(r.z[1].abs() < 1e-9);
    }

    #[test]
    fn zero_contributions_give_zero() {
        let r = solve(&qp(vec![vec![0.0; 5]], 0.004), &SolverOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.z.iter().all(|v| v.abs() < 1e-12), "{:?}", r.z);
    }

    #[test]
    fn lower_bound_is_active() {
        // c = [1, -0.5], q = 0.5: f = 1.01 z1² + 0.25 z2² − z1 z2 + 0.01 z2² − z1 + 0.5 z2.
        // At z2 = 0 the gradient in z2 is −z1 + 0.5 > 0, so z2 stays on the bound
        // and z1 = 1 / 2.02.
        let r = solve(&qp(vec![vec![1.0, -0.5]], 0.01), &SolverOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.z[1], 0.0);
        assert!((r.z[0] - 1.0 / 2.02).abs() < 1e-12, "{:?}", r.z);
    }

    #[test]
    fn history_never_increases() {
        let rows = vec![vec![0.5, -0.2, 0.9, 0.1, -0.7], vec![0.3, 0.3, -0.4, 0.8, 0.2]];
        let r = solve(&qp(rows, 0.004), &SolverOptions::default()).unwrap();
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.z.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn iteration_cap_is_respected() {
        let rows = vec![vec![0.5, -0.2, 0.9, 0.1, -0.7]];
        let opts = SolverOptions {
            max_iterations: 1,
            tolerance: 1e-12,
        };
        let r = solve(&qp(rows, 0.004), &opts).unwrap();
        assert!(r.iterations <= 1);
    }

    #[test]
    fn rejects_invalid_options() {
        let p = qp(vec![vec![1.0]], 0.1);
        let opts = SolverOptions {
            max_iterations: 0,
            tolerance: 1e-6,
        };
        assert!(solve(&p, &opts).is_err());
        let mut bad = p.clone();
        bad.lambda = f64::INFINITY;
        assert!(matches!(solve(&bad, &SolverOptions::default()), Err(Error::NonFinite(_))));
    }
}
