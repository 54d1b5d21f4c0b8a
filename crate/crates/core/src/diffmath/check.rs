use super::graph::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};

/// Largest relative disagreement between reverse-mode gradients and central
/// differences, over every coordinate of every requires-grad input.
///
/// Relative error per coordinate is `|fd − ad| / (|ad| + 1e-8)`.
pub fn finite_diff_check(graph: &Graph, output: NodeId, at: &Bindings, step: f64) -> Result<f64> {
    let (_, grads) = graph.value_and_grad(at, output)?;
    let eval = |b: &Bindings| -> Result<f64> {
        let v = graph
            .evaluate(b, output)?
            .item()
            .ok_or_else(|| Error::invalid("finite-difference target must be scalar"))?;
        if !v.is_finite() {
            return Err(Error::Numerical(
                "non-finite function value in finite differences".into(),
            ));
        }
        Ok(v)
    };
    let mut worst = 0.0f64;
    let mut probe = at.clone();
    for (id, ad) in &grads {
        for k in 0..ad.numel() {
            let orig = at[id].data()[k];
            probe.get_mut(id).expect("bound").data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).expect("bound").data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).expect("bound").data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = ad.data()[k];
            worst = worst.max((fd - a).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}
