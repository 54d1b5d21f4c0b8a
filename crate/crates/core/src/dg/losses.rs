use crate::diffmath::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = nodes
        .split_first()
        .ok_or_else(|| Error::invalid("no domains given"))?;
    Ok(rest.iter().fold(first, |acc, n| g.add(acc, *n)))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)` (n×C).
pub fn cross_entropy(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    classes: usize,
) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let y = g.constant(one_hot(labels, classes)?);
    let logp = g.log_softmax(logits, 1);
    let picked = g.mul(logp, y);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / labels.len() as f64))
}

/// `L_c`: per-domain mean cross-entropy, summed over domains.
pub fn classification_loss(
    g: &mut Graph,
    logits: &[NodeId],
    labels: &[Vec<usize>],
    classes: usize,
) -> Result<NodeId> {
    if logits.len() != labels.len() {
        return Err(Error::invalid("one label vector per domain is required"));
    }
    let terms = logits
        .iter()
        .zip(labels)
        .map(|(l, y)| cross_entropy(g, *l, y, classes))
        .collect::<Result<Vec<_>>>()?;
    sum_nodes(g, &terms)
}

/// `L_r`: per-domain mean of `‖x − x̂‖²`, summed over domains.
pub fn reconstruction_loss(
    g: &mut Graph,
    inputs: &[NodeId],
    reconstructions: &[NodeId],
    counts: &[usize],
) -> Result<NodeId> {
    if inputs.len() != reconstructions.len() || inputs.len() != counts.len() {
        return Err(Error::invalid(
            "inputs, reconstructions and counts must align",
        ));
    }
    let mut terms = vec![];
    for ((x, r), n) in inputs.iter().zip(reconstructions).zip(counts) {
        if *n == 0 {
            return Err(Error::invalid("reconstruction loss of an empty batch"));
        }
        let diff = g.sub(*x, *r);
        let sq = g.square(diff);
        let s = g.sum(sq);
        terms.push(g.scale(s, 1.0 / *n as f64));
    }
    sum_nodes(g, &terms)
}
