//! Entropic optimal transport under squared Euclidean cost.

mod assignment;
mod barycenter;
mod graph;
mod sinkhorn;

pub use assignment::{exact_ot, exact_w1, solve_assignment};
pub use barycenter::{free_support_barycenter, BarycenterOptions, BarycenterResult};
pub use graph::{
    barycenter_loss, ot_eps_node, sinkhorn_divergence_node, CloudNode, UnrolledSinkhorn,
};
pub use sinkhorn::{
    ot_eps, ot_eps_self, sinkhorn_divergence, sinkhorn_ot, SinkhornOptions, TransportPlan,
};
