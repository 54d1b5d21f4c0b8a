use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::losses::{classification_loss, reconstruction_loss};
use super::model::{Model, Optimizer, CLASSIFIER, DECODER, ENCODER};
use super::EncoderUpdate;
use crate::derive_seed;
use crate::diffmath::{Bindings, Gradients, Graph, NodeId, ParamId, Tensor, Trace};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::mi::{mi_coefficients, mi_surrogate_loss, noise_like, Encoder, MiOptions};
use crate::ot::{
    free_support_barycenter, ot_eps_node, sinkhorn_divergence_node, BarycenterOptions, CloudNode,
    SinkhornOptions, UnrolledSinkhorn,
};

/// Graph input holding the barycenter support inside a training step. It is
/// bound as a differentiable leaf and detached before use, so any gradient
/// reaching it would expose a leak through the barycenter.
pub const BARYCENTER_SUPPORT: ParamId = ParamId(100);

#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSettings {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub delta: f64,
    /// Unrolled Sinkhorn iterations inside `L_wb`.
    pub sinkhorn_iters: usize,
    /// Outer iterations of the free-support barycenter solver.
    pub barycenter_iters: usize,
    pub encoder_update: EncoderUpdate,
    pub num_eigen: usize,
    pub parallel: bool,
}

impl Default for StepSettings {
    fn default() -> Self {
        Self {
            alpha: 5e-4,
            beta: 1e-3,
            epsilon: 0.5,
            delta: 0.1,
            sinkhorn_iters: 50,
            barycenter_iters: 20,
            encoder_update: EncoderUpdate::Objective,
            num_eigen: 6,
            parallel: false,
        }
    }
}

/// Loss values observed during one step. `l_aux` is `L_r` for the
/// auto-encoder variants and a Gaussian upper-bound estimate of `L_i`
/// for the MI variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub l_c: f64,
    pub l_wb: Option<f64>,
    pub l_aux: Option<f64>,
}

struct Forward {
    g: Graph,
    xs: Vec<NodeId>,
    zs: Vec<NodeId>,
    l_c: NodeId,
}

fn forward_common(model: &Model, batches: &[DomainBatch]) -> Result<Forward> {
    if batches.is_empty() {
        return Err(Error::invalid("a step needs at least one domain batch"));
    }
    if batches
        .iter()
        .any(|b| b.labels.is_empty() || b.labels.len() != b.x.rows())
    {
        return Err(Error::invalid(
            "every domain batch needs matching, non-empty features and labels",
        ));
    }
    let mut g = Graph::new();
    let (mut xs, mut zs, mut logits) = (vec![], vec![], vec![]);
    for b in batches {
        let x = g.constant(b.x.clone());
        let z = model.encode(&mut g, x);
        logits.push(model.logits(&mut g, z));
        xs.push(x);
        zs.push(z);
    }
    let labels: Vec<Vec<usize>> = batches.iter().map(|b| b.labels.clone()).collect();
    let l_c = classification_loss(&mut g, &logits, &labels, model.arch.classes)?;
    Ok(Forward { g, xs, zs, l_c })
}

/// `(1/S) Σ_s S_ε(bary, Z_s)` with the barycenter support read from
/// [`BARYCENTER_SUPPORT`] through a detach.
pub fn barycenter_alignment_loss(
    g: &mut Graph,
    zs: &[NodeId],
    counts: &[usize],
    k: usize,
    settings: &StepSettings,
) -> Result<NodeId> {
    let opts = UnrolledSinkhorn {
        eps: settings.epsilon,
        iters: settings.sinkhorn_iters,
    };
    let leaf = g.input(BARYCENTER_SUPPORT, true);
    let support = g.detach(leaf);
    let bary = CloudNode::uniform(support, k);
    let bb = ot_eps_node(g, &bary, &bary, &opts)?;
    let mut total = None;
    for (z, n) in zs.iter().zip(counts) {
        let cloud = CloudNode::uniform(*z, *n);
        let t = sinkhorn_divergence_node(g, &bary, &cloud, &opts, Some(bb), None)?;
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t),
        });
    }
    let total = total.ok_or_else(|| Error::invalid("no domains given"))?;
    Ok(g.scale(total, 1.0 / zs.len() as f64))
}

fn features(trace: &Trace, zs: &[NodeId]) -> Vec<Tensor> {
    zs.iter().map(|z| trace.value(*z).clone()).collect()
}

/// Free-support barycenter of the current (detached) feature clouds with
/// `k` equal to the largest batch.
pub fn feature_barycenter(
    feats: &[Tensor],
    settings: &StepSettings,
    seed: u64,
) -> Result<EmpiricalMeasure> {
    let clouds = feats
        .iter()
        .map(|f| EmpiricalMeasure::uniform(f.clone()))
        .collect::<Result<Vec<_>>>()?;
    let k = feats.iter().map(|f| f.rows()).max().unwrap_or(1);
    let opts = BarycenterOptions {
        k,
        sinkhorn: SinkhornOptions::with_eps(settings.epsilon),
        outer_iters: settings.barycenter_iters,
        tol: 1e-4,
        seed,
        parallel: settings.parallel,
    };
    Ok(free_support_barycenter(&clouds, None, &opts)?.measure)
}

fn restrict(grads: &Gradients, ids: &[ParamId], terms: &[(f64, &Gradients)]) -> Gradients {
    let mut out = Gradients::new();
    for id in ids {
        let mut acc: Option<Tensor> = None;
        for (w, gr) in terms {
            if *w == 0.0 {
                continue;
            }
            let Some(t) = gr.get(id) else { continue };
            acc = Some(match acc {
                None if *w == 1.0 => t.clone(),
                None => t.map(|v| w * v),
                Some(a) => a.zip_with(t, |x, y| x + w * y),
            });
        }
        let base = grads.get(id).map(|t| Tensor::zeros(t.shape()));
        if let Some(t) = acc.or(base) {
            out.insert(*id, t);
        }
    }
    out
}

/// Plain cross-entropy step on encoder and classifier.
pub fn erm_step(
    model: &mut Model,
    opt: &mut Optimizer,
    batches: &[DomainBatch],
) -> Result<StepRecord> {
    let fw = forward_common(model, batches)?;
    let trace = fw.g.forward(&model.params)?;
    let gc = fw.g.backward(&trace, fw.l_c)?;
    let ids: Vec<ParamId> = ENCODER.iter().chain(&CLASSIFIER).copied().collect();
    let update = restrict(&gc, &ids, &[(1.0, &gc)]);
    opt.apply(&mut model.params, &update)?;
    Ok(StepRecord {
        l_c: trace.scalar(fw.l_c),
        l_wb: None,
        l_aux: None,
    })
}

/// Adds the barycenter loss when `alpha > 0`; returns the loss node and
/// the support to bind under [`BARYCENTER_SUPPORT`].
fn add_alignment(
    fw: &mut Forward,
    model: &Model,
    batches: &[DomainBatch],
    settings: &StepSettings,
    seed: u64,
) -> Result<Option<(NodeId, Tensor)>> {
    if settings.alpha == 0.0 {
        return Ok(None);
    }
    let trace = fw.g.forward(&model.params)?;
    let bary = feature_barycenter(&features(&trace, &fw.zs), settings, seed)?;
    let counts: Vec<usize> = batches.iter().map(|b| b.labels.len()).collect();
    let node = barycenter_alignment_loss(&mut fw.g, &fw.zs, &counts, bary.len(), settings)?;
    Ok(Some((node, bary.points().clone())))
}

fn bindings_with(model: &Model, wb: &Option<(NodeId, Tensor)>) -> Bindings {
    let mut b = model.params.clone();
    if let Some((_, support)) = wb {
        b.insert(BARYCENTER_SUPPORT, support.clone());
    }
    b
}

/// One WBAE update: `θ_c ← ∇L_c`, `θ_d ← ∇L_r`,
/// `θ_e ← ∇(L_c + αL_wb + βL_r)`.
pub fn wbae_step(
    model: &mut Model,
    opt: &mut Optimizer,
    batches: &[DomainBatch],
    settings: &StepSettings,
    seed: u64,
) -> Result<StepRecord> {
    let mut fw = forward_common(model, batches)?;
    let wb = add_alignment(&mut fw, model, batches, settings, derive_seed(seed, 1))?;
    let mut recon = vec![];
    for z in fw.zs.clone() {
        recon.push(model.decode(&mut fw.g, z)?);
    }
    let counts: Vec<usize> = batches.iter().map(|b| b.labels.len()).collect();
    let l_r = reconstruction_loss(&mut fw.g, &fw.xs, &recon, &counts)?;
    let bindings = bindings_with(model, &wb);
    let trace = fw.g.forward(&bindings)?;
    let gc = fw.g.backward(&trace, fw.l_c)?;
    let gr = fw.g.backward(&trace, l_r)?;
    let gwb = match &wb {
        Some((n, _)) => fw.g.backward(&trace, *n)?,
        None => Gradients::new(),
    };
    let mut update = restrict(&gc, &CLASSIFIER, &[(1.0, &gc)]);
    update.extend(restrict(&gr, &DECODER, &[(1.0, &gr)]));
    update.extend(restrict(
        &gc,
        &ENCODER,
        &[(1.0, &gc), (settings.alpha, &gwb), (settings.beta, &gr)],
    ));
    opt.apply(&mut model.params, &update)?;
    Ok(StepRecord {
        l_c: trace.scalar(fw.l_c),
        l_wb: wb.as_ref().map(|(n, _)| trace.scalar(*n)),
        l_aux: Some(trace.scalar(l_r)),
    })
}

/// `−Σ_s [½ ln det Σ_s − d′ ln δ]`, the negated Gaussian upper bound on
/// `I(X; Z_noise)` per domain, from the noisy feature covariance.
pub fn gaussian_mi_loss_bound(noisy: &[Tensor], delta: f64) -> Option<f64> {
    let mut total = 0.0;
    for z in noisy {
        let (n, d) = (z.rows(), z.cols());
        if n <= d {
            return None;
        }
        let m = DMatrix::from_row_slice(n, d, z.data());
        let mean = m.row_mean();
        let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        let chol = cov.cholesky()?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        total += 0.5 * log_det - d as f64 * delta.ln();
    }
    Some(-total)
}

/// One WBMI update. The classifier follows `∇L_c`; the encoder follows
/// `∇(L_c + αL_wb + βL_i)` or, under [`EncoderUpdate::Algorithm1`],
/// `α∇L_wb + β∇L_i`.
pub fn wbmi_step(
    model: &mut Model,
    opt: &mut Optimizer,
    batches: &[DomainBatch],
    settings: &StepSettings,
    seed: u64,
) -> Result<StepRecord> {
    if !(settings.delta > 0.0) {
        return Err(Error::invalid(
            "WBMI needs delta > 0; mutual information of a noiseless encoder diverges",
        ));
    }
    let mut fw = forward_common(model, batches)?;
    let wb = add_alignment(&mut fw, model, batches, settings, derive_seed(seed, 1))?;
    let l_i = if settings.beta != 0.0 {
        let trace = fw.g.forward(&bindings_with(model, &wb))?;
        let opts = MiOptions {
            delta: settings.delta,
            num_eigen: settings.num_eigen,
            ..MiOptions::default()
        };
        let (mut nodes, mut coefs, mut noisy) = (vec![], vec![], vec![]);
        for (s, z) in fw.zs.clone().into_iter().enumerate() {
            let clean = trace.value(z);
            let noise = noise_like(clean, settings.delta, derive_seed(seed, 10 + s as u64))?;
            let zn = clean.zip_with(&noise, |a, b| a + b);
            coefs.push(mi_coefficients(&zn, &noise, &opts)?);
            let nn = fw.g.constant(noise);
            nodes.push(fw.g.add(z, nn));
            noisy.push(zn);
        }
        Some((
            mi_surrogate_loss(&mut fw.g, &nodes, &coefs)?,
            gaussian_mi_loss_bound(&noisy, settings.delta),
        ))
    } else {
        None
    };
    let bindings = bindings_with(model, &wb);
    let trace = fw.g.forward(&bindings)?;
    let gc = fw.g.backward(&trace, fw.l_c)?;
    let gwb = match &wb {
        Some((n, _)) => fw.g.backward(&trace, *n)?,
        None => Gradients::new(),
    };
    let gi = match l_i {
        Some((n, _)) => fw.g.backward(&trace, n)?,
        None => Gradients::new(),
    };
    let c_weight = match settings.encoder_update {
        EncoderUpdate::Objective => 1.0,
        EncoderUpdate::Algorithm1 => 0.0,
    };
    let mut update = restrict(&gc, &CLASSIFIER, &[(1.0, &gc)]);
    update.extend(restrict(
        &gc,
        &ENCODER,
        &[
            (c_weight, &gc),
            (settings.alpha, &gwb),
            (settings.beta, &gi),
        ],
    ));
    opt.apply(&mut model.params, &update)?;
    Ok(StepRecord {
        l_c: trace.scalar(fw.l_c),
        l_wb: wb.as_ref().map(|(n, _)| trace.scalar(*n)),
        l_aux: l_i.and_then(|(_, bound)| bound),
    })
}
