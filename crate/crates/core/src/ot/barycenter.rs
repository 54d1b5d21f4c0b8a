use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sinkhorn::{plan_from, solve, SinkhornOptions};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarycenterOptions {
    /// Number of free support points.
    pub k: usize,
    pub sinkhorn: SinkhornOptions,
    pub outer_iters: usize,
    /// Stop once no support point moves more than this.
    pub tol: f64,
    pub seed: u64,
    /// Solve the per-measure transport problems on the rayon pool.
    pub parallel: bool,
}

impl Default for BarycenterOptions {
    fn default() -> Self {
        Self {
            k: 32,
            sinkhorn: SinkhornOptions::default(),
            outer_iters: 50,
            tol: 1e-4,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BarycenterResult {
    /// Uniformly weighted support.
    pub measure: EmpiricalMeasure,
    /// Weighted entropic OT objective `Σ λ_s OT_ε(bary, μ_s)` per accepted iterate.
    pub objective_trace: Vec<f64>,
    /// Weighted transport-cost part `Σ λ_s ⟨π_s, C_s⟩` per accepted iterate.
    pub transport_cost_trace: Vec<f64>,
    /// Largest support-point displacement of each accepted update.
    pub support_shift_trace: Vec<f64>,
    pub converged: bool,
}

const ACCEPT_SLACK: f64 = 1e-6;

/// Free-support Wasserstein-2 barycenter by alternating entropic transport
/// and barycentric projection of the support.
pub fn free_support_barycenter(
    measures: &[EmpiricalMeasure],
    weights: Option<&[f64]>,
    opts: &BarycenterOptions,
) -> Result<BarycenterResult> {
    let first = measures
        .first()
        .ok_or_else(|| Error::invalid("no measures given"))?;
    let d = first.dim();
    if measures.iter().any(|m| m.dim() != d) {
        return Err(Error::invalid("all measures must share a dimension"));
    }
    if opts.k == 0 {
        return Err(Error::invalid("barycenter support size must be at least 1"));
    }
    let s = measures.len();
    let lambda: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != s
                || w.iter().any(|x| !(*x >= 0.0))
                || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(Error::invalid(
                    "barycenter weights must be convex and match the measure count",
                ));
            }
            w.to_vec()
        }
        None => vec![1.0 / s as f64; s],
    };

    let mut support = initial_support(measures, opts.k, opts.seed)?;
    let evaluate = |support: &Tensor| -> Result<(f64, f64, Vec<Tensor>)> {
        let bary = EmpiricalMeasure::uniform(support.clone())?;
        let solve_one = |m: &EmpiricalMeasure| -> Result<(f64, f64, Tensor)> {
            let sol = solve(&bary, m, &opts.sinkhorn)?;
            let tp = plan_from(&sol, bary.weights(), m.weights(), opts.sinkhorn.eps);
            Ok((tp.ot_eps, tp.cost, tp.plan))
        };
        let parts: Vec<Result<(f64, f64, Tensor)>> = if opts.parallel {
            measures.par_iter().map(solve_one).collect()
        } else {
            measures.iter().map(solve_one).collect()
        };
        let (mut obj, mut cost, mut plans) = (0.0, 0.0, Vec::with_capacity(s));
        for (l, part) in lambda.iter().zip(parts) {
            let (o, c, p) = part?;
            obj += l * o;
            cost += l * c;
            plans.push(p);
        }
        Ok((obj, cost, plans))
    };

    let (mut obj, cost, mut plans) = evaluate(&support)?;
    let mut result = BarycenterResult {
        measure: EmpiricalMeasure::uniform(support.clone())?,
        objective_trace: vec![obj],
        transport_cost_trace: vec![cost],
        support_shift_trace: vec![],
        converged: false,
    };
    for _ in 0..opts.outer_iters {
        let next = project(&plans, measures, &lambda, opts.k, d);
        let shift = (0..opts.k)
            .map(|i| {
                next.row(i)
                    .iter()
                    .zip(support.row(i))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        let (new_obj, new_cost, new_plans) = evaluate(&next)?;
        if new_obj > obj + ACCEPT_SLACK * obj.abs().max(1.0) {
            break;
        }
        support = next;
        obj = new_obj;
        plans = new_plans;
        result.objective_trace.push(new_obj);
        result.transport_cost_trace.push(new_cost);
        result.support_shift_trace.push(shift);
        if shift < opts.tol {
            result.converged = true;
            break;
        }
    }
    result.measure = EmpiricalMeasure::uniform(support)?;
    Ok(result)
}

/// k points drawn uniformly from the distinct pooled input locations
/// (without replacement when possible). Coincident support points receive
/// identical plan rows and could never separate, hence the deduplication.
fn initial_support(measures: &[EmpiricalMeasure], k: usize, seed: u64) -> Result<Tensor> {
    let mut pool: Vec<&[f64]> = measures
        .iter()
        .flat_map(|m| (0..m.len()).map(move |i| m.point(i)))
        .collect();
    pool.sort_by(|x, y| {
        x.iter()
            .zip(y.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    pool.dedup();
    let d = measures[0].dim();
    let mut rng = seeded_rng(seed);
    let picks: Vec<usize> = if k <= pool.len() {
        index::sample(&mut rng, pool.len(), k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..pool.len())).collect()
    };
    let data = picks
        .iter()
        .flat_map(|&i| pool[i].iter().copied())
        .collect();
    Tensor::matrix(k, d, data)
}

/// Each support point moves to the λ-weighted average of its row-normalized
/// plan applied to the target points.
fn project(
    plans: &[Tensor],
    measures: &[EmpiricalMeasure],
    lambda: &[f64],
    k: usize,
    d: usize,
) -> Tensor {
    let mut out = vec![0.0; k * d];
    for ((plan, m), l) in plans.iter().zip(measures).zip(lambda) {
        let n = m.len();
        for i in 0..k {
            let row = &plan.data()[i * n..(i + 1) * n];
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                continue;
            }
            for (j, p) in row.iter().enumerate() {
                let w = l * p / mass;
                for (o, y) in out[i * d..(i + 1) * d].iter_mut().zip(m.point(j)) {
                    *o += w * y;
                }
            }
        }
    }
    Tensor::matrix(k, d, out).expect("k×d")
}
