use serde::{Deserialize, Serialize};

use crate::diffmath::{pairwise_sq_dist_raw, Tensor};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    /// Entropic regularization ε (> 0).
    pub eps: f64,
    pub max_iter: usize,
    /// L1 marginal violation at which iterations stop.
    pub tol: f64,
    /// Warm start by annealing ε geometrically down from the cost diameter.
    pub eps_scaling: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            eps: 0.5,
            max_iter: 500,
            tol: 1e-6,
            eps_scaling: true,
        }
    }
}

impl SinkhornOptions {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }
}

/// Entropic coupling between two empirical measures under squared Euclidean cost.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportPlan {
    pub plan: Tensor,
    /// Transport cost `Σ π_ij ‖x_i − y_j‖²`.
    pub cost: f64,
    /// `ε·KL(π ‖ a⊗b)`.
    pub entropic_term: f64,
    /// Dual value of the entropic problem, `OT_ε = cost + entropic_term` at the optimum.
    pub ot_eps: f64,
    pub eps: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub marginal_error: f64,
}

/// Converged dual potentials of one entropic OT problem.
pub(crate) struct Solution {
    pub cost: Tensor,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub log_a: Vec<f64>,
    pub log_b: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub violation: f64,
}

impl Solution {
    pub fn dual_value(&self, a: &[f64], b: &[f64]) -> f64 {
        let fa: f64 = a
            .iter()
            .zip(&self.f)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, f)| w * f)
            .sum();
        let gb: f64 = b
            .iter()
            .zip(&self.g)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, g)| w * g)
            .sum();
        fa + gb
    }
}

/// `out_i = −ε · LSE_j(log_w_j + (h_j − C_ij)/ε)` over rows of an n×m cost.
fn softmin_rows(
    eps: f64,
    cost: &[f64],
    n: usize,
    m: usize,
    h: &[f64],
    log_w: &[f64],
    out: &mut [f64],
) {
    let inv = 1.0 / eps;
    let shift: Vec<f64> = log_w.iter().zip(h).map(|(l, h)| l + h * inv).collect();
    let mut buf = vec![0.0; m];
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let row = &cost[i * m..(i + 1) * m];
        let mut mx = f64::NEG_INFINITY;
        for ((b, s), c) in buf.iter_mut().zip(&shift).zip(row) {
            *b = s - c * inv;
            mx = mx.max(*b);
        }
        let s: f64 = buf.iter().map(|v| (v - mx).exp()).sum();
        *o = -eps * (mx + s.ln());
    }
}

fn validate(a: &EmpiricalMeasure, b: &EmpiricalMeasure, eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!(
            "entropic regularization must be positive, got {eps}"
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|x| if *x > 0.0 { x.ln() } else { f64::NEG_INFINITY })
        .collect()
}

/// Orders a pair so that `(a, b)` and `(b, a)` run the same arithmetic.
fn canonical_first(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> bool {
    use std::cmp::Ordering;
    let key = |m: &EmpiricalMeasure| (m.len(), m.weights().to_vec(), m.points().data().to_vec());
    let (ka, kb) = (key(a), key(b));
    let ord = ka.0.cmp(&kb.0).then_with(|| {
        ka.1.iter()
            .chain(&ka.2)
            .zip(kb.1.iter().chain(&kb.2))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    ord != Ordering::Greater
}

/// Log-domain Sinkhorn with alternating potential updates.
///
/// The pair is solved in a canonical order and swapped back, so the
/// problem `(b, a)` returns exactly the transposed solution of `(a, b)`.
pub(crate) fn solve(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    opts: &SinkhornOptions,
) -> Result<Solution> {
    validate(a, b, opts.eps)?;
    if canonical_first(a, b) {
        return solve_ordered(a, b, opts);
    }
    let s = solve_ordered(b, a, opts)?;
    Ok(Solution {
        cost: crate::diffmath::transpose_raw(&s.cost),
        f: s.g,
        g: s.f,
        log_a: s.log_b,
        log_b: s.log_a,
        ..s
    })
}

fn solve_ordered(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    opts: &SinkhornOptions,
) -> Result<Solution> {
    let (n, m) = (a.len(), b.len());
    let cost = pairwise_sq_dist_raw(a.points(), b.points());
    let cost_t = crate::diffmath::transpose_raw(&cost);
    let (log_a, log_b) = (log_weights(a.weights()), log_weights(b.weights()));

    let c_max = cost.data().iter().copied().fold(0.0, f64::max);
    let mut schedule = vec![];
    if opts.eps_scaling {
        let mut e = c_max;
        while e > opts.eps {
            schedule.push(e);
            e *= 0.5;
        }
    }
    schedule.push(opts.eps);

    let (mut f, mut g) = (vec![0.0; n], vec![0.0; m]);
    let mut ft = vec![0.0; n];
    softmin_rows(schedule[0], cost.data(), n, m, &g, &log_b, &mut f);
    softmin_rows(schedule[0], cost_t.data(), m, n, &f, &log_a, &mut g);
    let mut iterations = 1;
    for &e in schedule
        .iter()
        .skip(1)
        .take(schedule.len().saturating_sub(2))
    {
        if iterations >= opts.max_iter {
            break;
        }
        softmin_rows(e, cost.data(), n, m, &g, &log_b, &mut f);
        softmin_rows(e, cost_t.data(), m, n, &f, &log_a, &mut g);
        iterations += 1;
    }

    let eps = opts.eps;
    if schedule.len() > 1 && iterations < opts.max_iter {
        softmin_rows(eps, cost.data(), n, m, &g, &log_b, &mut f);
        softmin_rows(eps, cost_t.data(), m, n, &f, &log_a, &mut g);
        iterations += 1;
    }
    // After a g-update the column marginals are exact; the row marginals
    // of the plan are a_i·exp((f_i − ft_i)/ε).
    let mut converged = false;
    let mut violation;
    loop {
        softmin_rows(eps, cost.data(), n, m, &g, &log_b, &mut ft);
        violation = marginal_violation(a.weights(), &f, &ft, eps);
        if violation < opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        std::mem::swap(&mut f, &mut ft);
        softmin_rows(eps, cost_t.data(), m, n, &f, &log_a, &mut g);
        iterations += 1;
    }
    Ok(Solution {
        cost,
        f,
        g,
        log_a,
        log_b,
        iterations,
        converged,
        violation,
    })
}

fn marginal_violation(w: &[f64], pot: &[f64], pot_t: &[f64], eps: f64) -> f64 {
    w.iter()
        .zip(pot.iter().zip(pot_t))
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, (p, q))| (w * ((p - q) / eps).exp() - w).abs())
        .sum()
}

/// Entropic OT between `a` and `b` with squared Euclidean ground cost.
///
/// Non-convergence within `max_iter` is reported through
/// [`TransportPlan::converged`], never as an error.
pub fn sinkhorn_ot(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    opts: &SinkhornOptions,
) -> Result<TransportPlan> {
    let sol = solve(a, b, opts)?;
    Ok(plan_from(&sol, a.weights(), b.weights(), opts.eps))
}

pub(crate) fn plan_from(sol: &Solution, a: &[f64], b: &[f64], eps: f64) -> TransportPlan {
    let (n, m) = (a.len(), b.len());
    let c = sol.cost.data();
    let mut plan = vec![0.0; n * m];
    let (mut cost, mut ent) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..m {
            let s = (sol.f[i] + sol.g[j] - c[i * m + j]) / eps;
            let p = (sol.log_a[i] + sol.log_b[j] + s).exp();
            plan[i * m + j] = p;
            if p > 0.0 {
                cost += p * c[i * m + j];
                ent += eps * p * s;
            }
        }
    }
    TransportPlan {
        plan: Tensor::matrix(n, m, plan).expect("n×m"),
        cost,
        entropic_term: ent,
        ot_eps: sol.dual_value(a, b),
        eps,
        iterations_used: sol.iterations,
        converged: sol.converged,
        marginal_error: sol.violation,
    }
}

/// Entropic OT value `OT_ε(a, b)`, entropic term included.
pub fn ot_eps(a: &EmpiricalMeasure, b: &EmpiricalMeasure, opts: &SinkhornOptions) -> Result<f64> {
    Ok(solve(a, b, opts)?.dual_value(a.weights(), b.weights()))
}

/// Entropic self-transport `OT_ε(a, a)`.
///
/// Uses the averaged symmetric update `f ← ½(f + softmin_ε(f))`, one kernel
/// pass per iteration, with the same annealing and stopping rule as [`ot_eps`].
pub fn ot_eps_self(a: &EmpiricalMeasure, opts: &SinkhornOptions) -> Result<f64> {
    validate(a, a, opts.eps)?;
    let n = a.len();
    let cost = pairwise_sq_dist_raw(a.points(), a.points());
    let log_a = log_weights(a.weights());
    let c_max = cost.data().iter().copied().fold(0.0, f64::max);
    let mut schedule = vec![];
    if opts.eps_scaling {
        let mut e = c_max;
        while e > opts.eps {
            schedule.push(e);
            e *= 0.5;
        }
    }
    schedule.push(opts.eps);

    let mut f = vec![0.0; n];
    let mut ft = vec![0.0; n];
    let mut iterations = 0;
    for &e in &schedule[..schedule.len() - 1] {
        if iterations >= opts.max_iter {
            break;
        }
        softmin_rows(e, cost.data(), n, n, &f, &log_a, &mut ft);
        f.iter_mut().zip(&ft).for_each(|(f, t)| *f = 0.5 * (*f + t));
        iterations += 1;
    }
    loop {
        softmin_rows(opts.eps, cost.data(), n, n, &f, &log_a, &mut ft);
        // row marginals of the symmetric plan are a_i·exp((f_i − ft_i)/ε)
        if marginal_violation(a.weights(), &f, &ft, opts.eps) < opts.tol
            || iterations >= opts.max_iter
        {
            break;
        }
        f.iter_mut().zip(&ft).for_each(|(f, t)| *f = 0.5 * (*f + t));
        iterations += 1;
    }
    Ok(2.0
        * a.weights()
            .iter()
            .zip(&f)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, f)| w * f)
            .sum::<f64>())
}

/// Debiased Sinkhorn divergence `OT_ε(a,b) − ½OT_ε(a,a) − ½OT_ε(b,b)`.
pub fn sinkhorn_divergence(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    opts: &SinkhornOptions,
) -> Result<f64> {
    validate(a, b, opts.eps)?;
    let aa = ot_eps_self(a, opts)?;
    if a.points() == b.points() && a.weights() == b.weights() {
        return Ok(0.0);
    }
    let ab = ot_eps(a, b, opts)?;
    let bb = ot_eps_self(b, opts)?;
    Ok(ab - 0.5 * (aa + bb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(rows: &[[f64; 2]]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_pair_forced_coupling() {
        let a = cloud(&[[0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0]]);
        for eps in [1e-3, 0.1, 10.0] {
            let p = sinkhorn_ot(&a, &b, &SinkhornOptions::with_eps(eps)).unwrap();
            assert!((p.cost - 1.0).abs() < 1e-12);
            assert!((p.plan.data()[0] - 1.0).abs() < 1e-12);
            assert!(p.converged);
        }
    }

    #[test]
    fn self_coupling_is_near_diagonal() {
        let a = cloud(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]);
        let p = sinkhorn_ot(&a, &a, &SinkhornOptions::with_eps(0.1)).unwrap();
        for i in 0..3 {
            assert!(p.plan.at2(i, i) > 1.0 / 3.0 - 1e-6);
        }
        assert!(p.cost < 1e-6);
    }

    #[test]
    fn two_point_clouds_match_brute_force() {
        let a = cloud(&[[0.0, 0.0], [1.0, 0.0]]);
        let b = cloud(&[[0.0, 1.0], [1.0, 1.0]]);
        // identity permutation costs 1, the swap costs 3; minimum 1
        let p = sinkhorn_ot(
            &a,
            &b,
            &SinkhornOptions {
                eps: 1e-3,
                max_iter: 5000,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((p.cost - 1.0).abs() < 1e-2, "{}", p.cost);
        assert!(p.converged);
    }

    #[test]
    fn non_positive_eps_is_an_error() {
        let a = cloud(&[[0.0, 0.0]]);
        assert!(sinkhorn_ot(&a, &a, &SinkhornOptions::with_eps(0.0)).is_err());
        assert!(sinkhorn_ot(&a, &a, &SinkhornOptions::with_eps(-1.0)).is_err());
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let pts = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 5.0, 1.0]).unwrap();
        let a = EmpiricalMeasure::new(pts, vec![0.8, 0.1, 0.1]).unwrap();
        let b = cloud(&[[0.2, 1.0], [1.0, 1.0], [4.0, 0.0]]);
        let p = sinkhorn_ot(
            &a,
            &b,
            &SinkhornOptions {
                eps: 1e-3,
                max_iter: 2,
                tol: 1e-12,
                eps_scaling: false,
            },
        )
        .unwrap();
        assert!(!p.converged);
        assert_eq!(p.iterations_used, 2);
    }

    #[test]
    fn symmetric_self_transport_matches_general_solver() {
        let a = cloud(&[[0.0, 0.3], [1.0, -0.2], [0.5, 0.5], [2.0, 1.0]]);
        for eps in [0.5, 1.0, 2.0] {
            let opts = SinkhornOptions {
                eps,
                max_iter: 20_000,
                tol: 1e-9,
                eps_scaling: true,
            };
            let general = sinkhorn_ot(&a, &a, &opts).unwrap();
            assert!(general.converged, "eps {eps}");
            assert!(
                (ot_eps_self(&a, &opts).unwrap() - general.ot_eps).abs() < 1e-8,
                "eps {eps}"
            );
        }
    }

    #[test]
    fn divergence_vanishes_on_identical_inputs() {
        let a = cloud(&[[0.0, 0.3], [1.0, -0.2], [0.5, 0.5]]);
        assert_eq!(
            sinkhorn_divergence(&a, &a, &SinkhornOptions::default()).unwrap(),
            0.0
        );
    }
}
