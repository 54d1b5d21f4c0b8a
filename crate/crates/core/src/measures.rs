//! Probability measures: weighted point clouds plus the Gaussian and
//! histogram families, where KL, L1, W2 and second moments have exact or
//! tightly controlled numeric values.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::seeded_rng;

const WEIGHT_TOL: f64 = 1e-9;

/// Weighted point cloud in R^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCloud")]
pub struct EmpiricalMeasure {
    points: Tensor,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: Tensor, weights: Vec<f64>) -> Result<Self> {
        if points.rank() != 2 {
            return Err(Error::invalid("points must be an n×d matrix"));
        }
        let n = points.rows();
        if n == 0 {
            return Err(Error::invalid("empirical measure needs at least one point"));
        }
        if weights.len() != n {
            return Err(Error::invalid(format!(
                "{} weights for {n} points",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::invalid(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        if !points.is_finite() {
            return Err(Error::invalid("points must be finite"));
        }
        Ok(Self { points, weights })
    }

    /// Uniform weights `1/n` over the given points.
    pub fn uniform(points: Tensor) -> Result<Self> {
        let n = points.rows();
        Self::new(points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::uniform(Tensor::from_rows(rows)?)
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: &[f64]) -> Self {
        Self {
            points: Tensor::matrix(1, x.len(), x.to_vec()).expect("1×d"),
            weights: vec![1.0],
        }
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - u).abs() <= WEIGHT_TOL)
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for (i, w) in self.weights.iter().enumerate() {
            for (k, x) in self.point(i).iter().enumerate() {
                m[k] += w * x;
            }
        }
        m
    }

    /// The same measure with every point shifted by `t`.
    pub fn translated(&self, t: &[f64]) -> Self {
        let d = self.dim();
        let data = self
            .points
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| x + t[k % d])
            .collect();
        Self {
            points: Tensor::new(self.points.shape().to_vec(), data).expect("same shape"),
            weights: self.weights.clone(),
        }
    }
}

/// Multivariate normal with symmetric positive-definite covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGaussian")]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

#[derive(Deserialize)]
struct RawCloud {
    points: Tensor,
    weights: Vec<f64>,
}

impl TryFrom<RawCloud> for EmpiricalMeasure {
    type Error = Error;

    fn try_from(r: RawCloud) -> Result<Self> {
        Self::new(r.points, r.weights)
    }
}

#[derive(Deserialize)]
struct RawHistogram {
    support: Tensor,
    probs: Vec<f64>,
}

impl TryFrom<RawHistogram> for HistogramMeasure {
    type Error = Error;

    fn try_from(r: RawHistogram) -> Result<Self> {
        Self::new(r.support, r.probs)
    }
}

#[derive(Deserialize)]
struct RawGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl TryFrom<RawGaussian> for GaussianMeasure {
    type Error = Error;

    fn try_from(r: RawGaussian) -> Result<Self> {
        Self::new(r.mean, r.cov)
    }
}

/// A Gaussian with its Cholesky factor precomputed, for repeated draws.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl Sampler for GaussianSampler {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn draw(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let d = self.mean.len();
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for i in 0..d {
            out[i] = self.mean[i] + (0..=i).map(|k| self.chol[(i, k)] * z[k]).sum::<f64>();
        }
    }
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::invalid(format!(
                "mean of length {d} with covariance {}×{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).amax() > 1e-10 {
            return Err(Error::NotPositiveDefinite(
                "covariance is not symmetric".into(),
            ));
        }
        let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "smallest eigenvalue {min_eig}"
            )));
        }
        Ok(Self { mean, cov })
    }

    /// One-dimensional N(mean, var).
    pub fn univariate(mean: f64, var: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
        )
    }

    /// N(mean, scale·I).
    pub fn isotropic(mean: &[f64], scale: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::identity(d, d) * scale,
        )
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov.clone()).eigenvalues.min()
    }

    /// Standard deviation of a univariate Gaussian.
    pub fn std_1d(&self) -> Option<f64> {
        (self.dim() == 1).then(|| self.cov[(0, 0)].sqrt())
    }

    pub fn density_1d(&self, x: f64) -> f64 {
        let s = self.cov[(0, 0)].sqrt();
        let z = (x - self.mean[0]) / s;
        (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    pub fn sampler(&self) -> GaussianSampler {
        GaussianSampler {
            mean: self.mean.clone(),
            chol: self.cholesky().expect("validated at construction"),
        }
    }

    fn cholesky(&self) -> Result<DMatrix<f64>> {
        self.cov
            .clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))
    }
}

/// Discrete distribution on a finite support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHistogram")]
pub struct HistogramMeasure {
    support: Tensor,
    probs: Vec<f64>,
}

impl HistogramMeasure {
    pub fn new(support: Tensor, probs: Vec<f64>) -> Result<Self> {
        if support.rank() != 2 || support.rows() != probs.len() || probs.is_empty() {
            return Err(Error::invalid("support must be k×d with k matching probs"));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("probabilities must be nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::invalid(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { support, probs })
    }

    /// Histogram on the 1-D grid `0, 1, …, k−1`.
    pub fn on_grid(probs: Vec<f64>) -> Result<Self> {
        let k = probs.len();
        Self::new(
            Tensor::matrix(k, 1, (0..k).map(|i| i as f64).collect())?,
            probs,
        )
    }

    pub fn support(&self) -> &Tensor {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn same_support(&self, other: &Self) -> bool {
        self.support.shape() == other.support.shape()
            && self.support.max_abs_diff(&other.support) <= 1e-12
    }
}

/// Finite mixture of Gaussians, used as a sampling substrate.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub components: Vec<GaussianMeasure>,
    pub weights: Vec<f64>,
}

/// Any of the supported measure families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Measure {
    Empirical(EmpiricalMeasure),
    Gaussian(GaussianMeasure),
    Histogram(HistogramMeasure),
}

impl From<EmpiricalMeasure> for Measure {
    fn from(m: EmpiricalMeasure) -> Self {
        Measure::Empirical(m)
    }
}

impl From<GaussianMeasure> for Measure {
    fn from(m: GaussianMeasure) -> Self {
        Measure::Gaussian(m)
    }
}

impl From<HistogramMeasure> for Measure {
    fn from(m: HistogramMeasure) -> Self {
        Measure::Histogram(m)
    }
}

/// Something that can produce i.i.d. draws in R^d.
pub trait Sampler {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut dyn RngCore, out: &mut [f64]);
}

impl Sampler for GaussianMeasure {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn draw(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        self.sampler().draw(rng, out);
    }
}

impl Sampler for GaussianMixture {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn draw(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let pick = WeightedIndex::new(&self.weights).expect("valid mixture weights");
        self.components[pick.sample(rng)].draw(rng, out);
    }
}

impl Sampler for EmpiricalMeasure {
    fn dim(&self) -> usize {
        self.points.cols()
    }

    fn draw(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let pick = WeightedIndex::new(&self.weights).expect("valid weights");
        out.copy_from_slice(self.point(pick.sample(rng)));
    }
}

impl Sampler for HistogramMeasure {
    fn dim(&self) -> usize {
        self.support.cols()
    }

    fn draw(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let pick = WeightedIndex::new(&self.probs).expect("valid probabilities");
        out.copy_from_slice(self.support.row(pick.sample(rng)));
    }
}

/// `n` i.i.d. draws from `g` with uniform weights, deterministic in `seed`.
pub fn sample(g: &GaussianMeasure, n: usize, seed: u64) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let sampler = g.sampler();
    let mut rng = seeded_rng(seed);
    let d = g.dim();
    let mut data = vec![0.0; n * d];
    for row in data.chunks_mut(d) {
        sampler.draw(&mut rng, row);
    }
    EmpiricalMeasure::uniform(Tensor::matrix(n, d, data)?)
}

/// Kullback–Leibler divergence `KL(p‖q)` in nats.
///
/// Histogram pairs where `q` vanishes on a bin charged by `p` return `+∞`.
pub fn kl_divergence(p: &Measure, q: &Measure) -> Result<f64> {
    match (p, q) {
        (Measure::Gaussian(p), Measure::Gaussian(q)) => kl_gaussian(p, q),
        (Measure::Histogram(p), Measure::Histogram(q)) => kl_histogram(p, q),
        _ => Err(Error::UnsupportedFamily(
            "KL needs two Gaussians or two histograms".into(),
        )),
    }
}

pub fn kl_gaussian(p: &GaussianMeasure, q: &GaussianMeasure) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::invalid("Gaussians of different dimension"));
    }
    let d = p.dim() as f64;
    let qc = q
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("q covariance".into()))?;
    let pc = p
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("p covariance".into()))?;
    let q_inv = qc.inverse();
    let dm = &q.mean - &p.mean;
    let trace = (&q_inv * &p.cov).trace();
    let maha = dm.dot(&(&q_inv * &dm));
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let kl = 0.5 * (trace + maha - d + logdet(&qc.l()) - logdet(&pc.l()));
    Ok(kl.max(0.0))
}

pub fn kl_histogram(p: &HistogramMeasure, q: &HistogramMeasure) -> Result<f64> {
    if !p.same_support(q) {
        return Err(Error::invalid("histograms must share the same support"));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

/// L1 distance `∫|p − q|`, in [0, 2].
///
/// Exact for histograms on a shared support; adaptive quadrature for
/// univariate Gaussians.
pub fn l1_distance(p: &Measure, q: &Measure) -> Result<f64> {
    match (p, q) {
        (Measure::Histogram(p), Measure::Histogram(q)) => {
            if !p.same_support(q) {
                return Err(Error::invalid("histograms must share the same support"));
            }
            Ok(p.probs
                .iter()
                .zip(&q.probs)
                .map(|(a, b)| (a - b).abs())
                .sum())
        }
        (Measure::Gaussian(p), Measure::Gaussian(q)) if p.dim() == 1 && q.dim() == 1 => {
            Ok(l1_gaussian_1d(p, q))
        }
        _ => Err(Error::UnsupportedFamily(
            "L1 is available for histogram pairs and univariate Gaussian pairs".into(),
        )),
    }
}

fn l1_gaussian_1d(p: &GaussianMeasure, q: &GaussianMeasure) -> f64 {
    let (m1, s1) = (p.mean[0], p.cov[(0, 0)].sqrt());
    let (m2, s2) = (q.mean[0], q.cov[(0, 0)].sqrt());
    if m1 == m2 && s1 == s2 {
        return 0.0;
    }
    // Density crossings split |p − q| into smooth pieces.
    let mut cuts = vec![];
    let a = 0.5 / (s2 * s2) - 0.5 / (s1 * s1);
    let b = m1 / (s1 * s1) - m2 / (s2 * s2);
    let c = m2 * m2 / (2.0 * s2 * s2) - m1 * m1 / (2.0 * s1 * s1) + (s2 / s1).ln();
    if a.abs() < 1e-14 {
        if b != 0.0 {
            cuts.push(-c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let r = disc.sqrt();
            cuts.push((-b - r) / (2.0 * a));
            cuts.push((-b + r) / (2.0 * a));
        }
    }
    let span = m1.abs().max(m2.abs()) + 40.0 * s1.max(s2);
    let mut edges = vec![-span];
    cuts.sort_by(f64::total_cmp);
    edges.extend(cuts.into_iter().filter(|x| x.abs() < span));
    edges.push(span);
    let f = |x: f64| (p.density_1d(x) - q.density_1d(x)).abs();
    let total: f64 = edges
        .windows(2)
        .map(|w| adaptive_simpson(&f, w[0], w[1], 1e-11, 60))
        .sum();
    total.clamp(0.0, 2.0)
}

pub(crate) fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    // Pre-split so narrow peaks inside a wide interval are not skipped.
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let (lo, hi) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            recurse(
                f,
                lo,
                hi,
                fa,
                fm,
                fb,
                simpson(fa, fm, fb, lo, hi),
                tol / pieces as f64,
                depth,
            )
        })
        .sum()
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub(crate) fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Closed-form (Bures–Wasserstein) W2 distance between Gaussians.
pub fn w2_gaussian(p: &GaussianMeasure, q: &GaussianMeasure) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::invalid("Gaussians of different dimension"));
    }
    let dm2 = (&p.mean - &q.mean).norm_squared();
    let r2 = sqrtm_psd(&q.cov);
    let cross = sqrtm_psd(&(&r2 * &p.cov * &r2));
    let tr = p.cov.trace() + q.cov.trace() - 2.0 * cross.trace();
    Ok((dm2 + tr.max(0.0)).sqrt())
}

/// `E‖x‖²` under the measure.
pub fn second_moment(m: &Measure) -> f64 {
    match m {
        Measure::Gaussian(g) => g.cov.trace() + g.mean.norm_squared(),
        Measure::Empirical(e) => weighted_sq_norm(e.points(), e.weights()),
        Measure::Histogram(h) => weighted_sq_norm(&h.support, &h.probs),
    }
}

fn weighted_sq_norm(points: &Tensor, weights: &[f64]) -> f64 {
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| w * points.row(i).iter().map(|x| x * x).sum::<f64>())
        .sum()
}
