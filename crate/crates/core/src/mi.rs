//! Mutual-information gradients for noisy encoders.
//!
//! For `Z = f_θ(X) + δN` the conditional entropy `H(Z|X)` does not depend
//! on θ, so `∇_θ I(X;Z) = ∇_θ H(Z) = −E[(s(Z) − s(Z|X))ᵀ ∂Z/∂θ]` where
//! `s` is the marginal score (estimated with a spectral Stein estimator) and
//! `s(z|x) = −(z − f(x))/δ²` the analytic conditional score. Subtracting the
//! conditional score leaves the expectation unchanged and cancels most of the
//! noise in the sample average.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{pairwise_sq_dist_raw, Bindings, Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::{derive_seed, seeded_rng};

/// Adds i.i.d. `δ·N(0,1)` noise to every entry.
pub fn add_noise(features: &Tensor, delta: f64, seed: u64) -> Result<Tensor> {
    Ok(features.zip_with(&noise_like(features, delta, seed)?, |a, b| a + b))
}

/// The `δ·N(0,1)` tensor [`add_noise`] would add.
pub fn noise_like(features: &Tensor, delta: f64, seed: u64) -> Result<Tensor> {
    if !(delta >= 0.0) {
        return Err(Error::invalid(format!(
            "noise scale must be nonnegative, got {delta}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let data = (0..features.numel())
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            delta * e
        })
        .collect();
    Tensor::new(features.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    /// `"median"`: median pairwise distance of the samples.
    Named(MedianTag),
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianTag {
    Median,
}

impl Bandwidth {
    pub const MEDIAN: Bandwidth = Bandwidth::Named(MedianTag::Median);
}

impl Default for Bandwidth {
    fn default() -> Self {
        Self::MEDIAN
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiOptions {
    pub delta: f64,
    pub num_eigen: usize,
    pub bandwidth: Bandwidth,
    /// Added to the kernel diagonal before the eigendecomposition.
    pub jitter: f64,
}

impl Default for MiOptions {
    fn default() -> Self {
        Self {
            delta: 0.1,
            num_eigen: 6,
            bandwidth: Bandwidth::MEDIAN,
            jitter: 1e-6,
        }
    }
}

/// Nyström eigenfunction expansion of the score `∇ log q` fitted to a sample.
#[derive(Clone, Debug)]
pub struct ScoreEstimate {
    samples: Tensor,
    /// M×J eigenvectors scaled by `√M/λ_j`.
    coef: DMatrix<f64>,
    /// J×d expansion coefficients.
    beta: DMatrix<f64>,
    pub num_eigen: usize,
    pub bandwidth: f64,
}

impl ScoreEstimate {
    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    fn kernel_rows(&self, z: &Tensor) -> DMatrix<f64> {
        let sq = pairwise_sq_dist_raw(z, &self.samples);
        let s2 = self.bandwidth * self.bandwidth;
        DMatrix::from_row_slice(z.rows(), self.samples.rows(), sq.data())
            .map(|v| (-v / (2.0 * s2)).exp())
    }

    /// Scores at every row of `z` (n×d).
    pub fn eval_batch(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 2 || z.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "expected n×{} query points",
                self.dim()
            )));
        }
        let psi = self.kernel_rows(z) * &self.coef;
        let out = psi * &self.beta;
        let d = self.dim();
        let data = (0..z.rows())
            .flat_map(|i| (0..d).map(move |k| (i, k)))
            .map(|(i, k)| out[(i, k)])
            .collect();
        Tensor::matrix(z.rows(), d, data)
    }

    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, z.len(), z.to_vec())?;
        Ok(self.eval_batch(&t)?.into_data())
    }
}

fn median_distance(x: &Tensor) -> f64 {
    let n = x.rows();
    let sq = pairwise_sq_dist_raw(x, x);
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| sq.data()[i * n + j].sqrt())
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Top-`j` eigenpairs of a symmetric PSD matrix, descending. Large matrices
/// use orthogonal subspace iteration with Rayleigh-Ritz extraction.
fn top_eigen(k: &DMatrix<f64>, j: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = k.nrows();
    let take = |vals: &nalgebra::DVector<f64>, vecs: &DMatrix<f64>, j: usize| {
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|a, b| vals[*b].total_cmp(&vals[*a]));
        let v: Vec<f64> = order[..j].iter().map(|&i| vals[i]).collect();
        let u = DMatrix::from_fn(vecs.nrows(), j, |r, c| vecs[(r, order[c])]);
        (v, u)
    };
    if n <= 300 {
        let eig = SymmetricEigen::new(k.clone());
        return take(&eig.eigenvalues, &eig.eigenvectors, j);
    }
    let p = (j + 10).min(n);
    let mut rng = seeded_rng(0x5eed);
    let mut q = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    q = q.qr().q();
    let mut prev = vec![0.0; j];
    for _ in 0..500 {
        let y = k * &q;
        q = y.qr().q();
        let small = q.transpose() * k * &q;
        let eig = SymmetricEigen::new(0.5 * (&small + small.transpose()));
        let (vals, _) = take(&eig.eigenvalues, &eig.eigenvectors, j);
        let change = vals
            .iter()
            .zip(&prev)
            .map(|(a, b)| ((a - b) / a.abs().max(1e-300)).abs())
            .fold(0.0, f64::max);
        prev = vals;
        if change < 1e-12 {
            break;
        }
    }
    let small = q.transpose() * k * &q;
    let eig = SymmetricEigen::new(0.5 * (&small + small.transpose()));
    let (vals, w) = take(&eig.eigenvalues, &eig.eigenvectors, j);
    (vals, &q * w)
}

/// Spectral Stein estimate of the score of the distribution behind `samples` (n×d).
pub fn ssge_score(
    samples: &Tensor,
    num_eigen: usize,
    bandwidth: Bandwidth,
) -> Result<ScoreEstimate> {
    ssge_score_with_jitter(samples, num_eigen, bandwidth, MiOptions::default().jitter)
}

pub fn ssge_score_with_jitter(
    samples: &Tensor,
    num_eigen: usize,
    bandwidth: Bandwidth,
    jitter: f64,
) -> Result<ScoreEstimate> {
    if samples.rank() != 2 {
        return Err(Error::invalid("samples must be an n×d matrix"));
    }
    let (m, d) = (samples.rows(), samples.cols());
    if num_eigen < 1 || m <= num_eigen {
        return Err(Error::invalid(format!(
            "need n > num_eigen ≥ 1, got n={m}, num_eigen={num_eigen}"
        )));
    }
    let sigma = match bandwidth {
        Bandwidth::Named(MedianTag::Median) => median_distance(samples),
        Bandwidth::Fixed(s) => s,
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::SingularKernel(format!(
            "kernel bandwidth {sigma} is degenerate (duplicate samples?); pass a fixed bandwidth or add jitter"
        )));
    }
    let s2 = sigma * sigma;
    let sq = pairwise_sq_dist_raw(samples, samples);
    let mut k = DMatrix::from_row_slice(m, m, sq.data()).map(|v| (-v / (2.0 * s2)).exp());
    for i in 0..m {
        k[(i, i)] += jitter;
    }
    let (vals, u) = top_eigen(&k, num_eigen);
    let smallest = vals[num_eigen - 1];
    if !(smallest > jitter * 1e-3) || !vals.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularKernel(format!(
            "kernel eigenvalue {smallest:e} is too small for {num_eigen} eigenfunctions; increase jitter or lower num_eigen"
        )));
    }
    let sqrt_m = (m as f64).sqrt();
    let coef = DMatrix::from_fn(m, num_eigen, |r, c| sqrt_m / vals[c] * u[(r, c)]);

    // β_j = −(1/M) Σ_m ∇ψ_j(x_m), with ∇_x k(x, x_i) = −(x − x_i)/σ² · k(x, x_i).
    let mut beta = DMatrix::zeros(num_eigen, d);
    let x = samples.data();
    for a in 0..m {
        for i in 0..m {
            let kai = k[(a, i)] - if a == i { jitter } else { 0.0 };
            if kai == 0.0 {
                continue;
            }
            for c in 0..d {
                let g = -(x[a * d + c] - x[i * d + c]) / s2 * kai;
                if g == 0.0 {
                    continue;
                }
                for jj in 0..num_eigen {
                    beta[(jj, c)] -= g * coef[(i, jj)] / m as f64;
                }
            }
        }
    }
    Ok(ScoreEstimate {
        samples: samples.clone(),
        coef,
        beta,
        num_eigen,
        bandwidth: sigma,
    })
}

/// Per-sample coefficients `c_m = ŝ(z_m) + n_m/δ`, where `z = f(x) + n`.
///
/// `(1/M) Σ_m ⟨c_m, Z_m⟩` with `c` held constant has gradient `∇_θ L_i`
/// (with `L_i = −I`) with respect to anything `Z` depends on.
pub fn mi_coefficients(noisy: &Tensor, noise: &Tensor, opts: &MiOptions) -> Result<Tensor> {
    if !(opts.delta > 0.0) {
        return Err(Error::invalid(
            "MI gradient needs delta > 0; a noiseless encoder has infinite mutual information",
        ));
    }
    let score = ssge_score_with_jitter(noisy, opts.num_eigen, opts.bandwidth, opts.jitter)?;
    let s = score.eval_batch(noisy)?;
    let d2 = opts.delta * opts.delta;
    Ok(s.zip_with(noise, |a, b| a + b / d2))
}

/// Adds `Σ_s (1/M_s) Σ_m ⟨c_{s,m}, Z_{s,m}⟩` to the graph.
pub fn mi_surrogate_loss(
    g: &mut Graph,
    noisy_features: &[NodeId],
    coefficients: &[Tensor],
) -> Result<NodeId> {
    if noisy_features.len() != coefficients.len() || noisy_features.is_empty() {
        return Err(Error::invalid(
            "one coefficient matrix per domain is required",
        ));
    }
    let mut total = None;
    for (z, c) in noisy_features.iter().zip(coefficients) {
        let cn = g.constant(c.clone());
        let prod = g.mul(*z, cn);
        let s = g.sum(prod);
        let term = g.scale(s, 1.0 / c.rows() as f64);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    Ok(total.expect("non-empty"))
}

/// Something that maps an input batch node to a feature node in a graph.
pub trait Encoder {
    fn encode(&self, g: &mut Graph, x: NodeId) -> NodeId;
    fn parameters(&self) -> Bindings;
}

#[derive(Clone, Debug)]
pub struct MiGradient {
    /// `∇ L_i` for every encoder parameter.
    pub grads: Gradients,
}

/// Gradient of `L_i = −Σ_s I(X_s; f(X_s) + δN)` with respect to the encoder
/// parameters, one batch per domain.
pub fn mige_gradient(
    encoder: &dyn Encoder,
    batches: &[Tensor],
    opts: &MiOptions,
    seed: u64,
) -> Result<MiGradient> {
    if !(opts.delta > 0.0) {
        return Err(Error::invalid(
            "MI gradient needs delta > 0; a noiseless encoder has infinite mutual information",
        ));
    }
    let params = encoder.parameters();
    let mut g = Graph::new();
    let mut noisy_nodes = vec![];
    let mut feats = vec![];
    for b in batches {
        let x = g.constant(b.clone());
        feats.push(encoder.encode(&mut g, x));
    }
    let trace = g.forward(&params)?;
    let mut coefs = vec![];
    for (s, z) in feats.iter().enumerate() {
        let clean = trace.value(*z);
        let noise = noise_like(clean, opts.delta, derive_seed(seed, s as u64))?;
        let noisy = clean.zip_with(&noise, |a, b| a + b);
        coefs.push(mi_coefficients(&noisy, &noise, opts)?);
        let n = g.constant(noise);
        noisy_nodes.push(g.add(*z, n));
    }
    let loss = mi_surrogate_loss(&mut g, &noisy_nodes, &coefs)?;
    let (_, grads) = g.value_and_grad(&params, loss)?;
    Ok(MiGradient { grads })
}

/// `I = ½ ln(1 + w²/δ²)` and `dI/dw = w/(w² + δ²)` for `Z = wX + δN`, `X, N ∼ N(0,1)`.
pub fn gaussian_mi_oracle(w: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    Ok((
        0.5 * (w * w / (delta * delta)).ln_1p(),
        w / (w * w + delta * delta),
    ))
}
