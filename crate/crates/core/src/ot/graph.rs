//! Differentiable Sinkhorn losses built from [`Graph`] primitives.
//!
//! Gradients come from differentiating a fixed number of unrolled
//! symmetric Sinkhorn iterations.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnrolledSinkhorn {
    pub eps: f64,
    pub iters: usize,
}

impl Default for UnrolledSinkhorn {
    fn default() -> Self {
        Self {
            eps: 0.5,
            iters: 50,
        }
    }
}

/// A point cloud living in a graph: an n×d node plus constant weights.
#[derive(Clone, Debug)]
pub struct CloudNode {
    pub points: NodeId,
    pub weights: Vec<f64>,
}

impl CloudNode {
    pub fn uniform(points: NodeId, n: usize) -> Self {
        Self {
            points,
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Embeds a fixed measure as constants.
    pub fn constant(g: &mut Graph, m: &EmpiricalMeasure) -> Self {
        Self {
            points: g.constant(m.points().clone()),
            weights: m.weights().to_vec(),
        }
    }
}

fn log_weight_node(g: &mut Graph, w: &[f64]) -> Result<NodeId> {
    if w.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::invalid(
            "differentiable Sinkhorn needs strictly positive weights",
        ));
    }
    Ok(g.constant(Tensor::vector(w.iter().map(|x| x.ln()).collect())))
}

/// `−ε · LSE_j(log_w_j + (h_j − C_ij)/ε)` along rows of `cost`.
fn softmin(g: &mut Graph, eps: f64, cost: NodeId, h: Option<NodeId>, log_w: NodeId) -> NodeId {
    let diff = match h {
        Some(h) => g.sub(h, cost),
        None => g.neg(cost),
    };
    let scaled = g.scale(diff, 1.0 / eps);
    let shifted = g.add(scaled, log_w);
    let lse = g.logsumexp(shifted, 1, false);
    g.scale(lse, -eps)
}

fn average(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let s = g.add(a, b);
    g.scale(s, 0.5)
}

/// Unrolled `OT_ε(x, y)` (entropic term included) as a scalar node.
pub fn ot_eps_node(
    g: &mut Graph,
    x: &CloudNode,
    y: &CloudNode,
    opts: &UnrolledSinkhorn,
) -> Result<NodeId> {
    if !(opts.eps > 0.0) {
        return Err(Error::invalid("entropic regularization must be positive"));
    }
    let eps = opts.eps;
    let cost = g.pairwise_sq_dist(x.points, y.points);
    let cost_t = g.pairwise_sq_dist(y.points, x.points);
    let log_a = log_weight_node(g, &x.weights)?;
    let log_b = log_weight_node(g, &y.weights)?;
    let mut f = softmin(g, eps, cost, None, log_b);
    let mut h = softmin(g, eps, cost_t, None, log_a);
    for _ in 0..opts.iters {
        let ft = softmin(g, eps, cost, Some(h), log_b);
        let ht = softmin(g, eps, cost_t, Some(f), log_a);
        f = average(g, f, ft);
        h = average(g, h, ht);
    }
    let f_fin = softmin(g, eps, cost, Some(h), log_b);
    let h_fin = softmin(g, eps, cost_t, Some(f), log_a);
    let a = g.constant(Tensor::vector(x.weights.clone()));
    let b = g.constant(Tensor::vector(y.weights.clone()));
    let fa = g.mul(f_fin, a);
    let hb = g.mul(h_fin, b);
    let sf = g.sum(fa);
    let sh = g.sum(hb);
    Ok(g.add(sf, sh))
}

/// Debiased Sinkhorn divergence node. `self_x`/`self_y` may supply
/// precomputed `OT_ε(x,x)` / `OT_ε(y,y)` nodes.
pub fn sinkhorn_divergence_node(
    g: &mut Graph,
    x: &CloudNode,
    y: &CloudNode,
    opts: &UnrolledSinkhorn,
    self_x: Option<NodeId>,
    self_y: Option<NodeId>,
) -> Result<NodeId> {
    let xy = ot_eps_node(g, x, y, opts)?;
    let xx = match self_x {
        Some(n) => n,
        None => ot_eps_node(g, x, x, opts)?,
    };
    let yy = match self_y {
        Some(n) => n,
        None => ot_eps_node(g, y, y, opts)?,
    };
    let selfs = g.add(xx, yy);
    let half = g.scale(selfs, 0.5);
    Ok(g.sub(xy, half))
}

/// Average Sinkhorn divergence between a fixed barycenter and each domain's
/// features: `(1/S) Σ_s S_ε(bary, Z_s)`.
///
/// The barycenter enters as constants, so gradients reach only the domain
/// feature nodes.
pub fn barycenter_loss(
    g: &mut Graph,
    domain_features: &[CloudNode],
    bary: &EmpiricalMeasure,
    opts: &UnrolledSinkhorn,
) -> Result<NodeId> {
    if domain_features.is_empty() {
        return Err(Error::invalid("barycenter loss needs at least one domain"));
    }
    let b = CloudNode::constant(g, bary);
    let bb = ot_eps_node(g, &b, &b, opts)?;
    let mut terms = vec![];
    for z in domain_features {
        terms.push(sinkhorn_divergence_node(g, &b, z, opts, Some(bb), None)?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t);
    }
    Ok(g.scale(total, 1.0 / domain_features.len() as f64))
}
