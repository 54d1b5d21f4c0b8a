//! Numerical checks of the transport inequalities behind the
//! unseen-domain risk bound: regularity constants, the L1-to-W2 bound,
//! Monte-Carlo risks, the full bound report and the W1/W2 regime comparison.
//!
//! Every inequality returns signed slack (`rhs − lhs`).

mod regime;
mod report;
mod risk;
mod sweep;

pub use regime::{diameter, regime_compare, regime_sweep, RegimeRecord};
pub use report::{
    corollary1_report, gaussian_barycenter, theorem1_report, BoundConstants, BoundDomain,
    BoundReport, BoundSettings, CorollaryTerms,
};
pub use risk::{
    risk, sigma_estimate, Hypothesis, LinearRule, McEstimate, Side, SigmaEstimate, TruncatedLoss,
};
pub use sweep::{run_sweeps, SweepConfig, SweepOutcome, SweepSummary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{
    kl_divergence, kl_gaussian, l1_distance, second_moment, w2_gaussian, GaussianMeasure,
    HistogramMeasure, Measure,
};

/// Logarithm base of the log-density whose gradient defines regularity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Two,
    Natural,
}

impl LogBase {
    fn factor(self) -> f64 {
        match self {
            LogBase::Two => 1.0 / std::f64::consts::LN_2,
            LogBase::Natural => 1.0,
        }
    }
}

/// `‖∇ log p(x)‖ ≤ c1‖x‖ + c2` for all x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityConstants {
    pub c1: f64,
    pub c2: f64,
}

impl RegularityConstants {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !(c1 >= 0.0 && c2 >= 0.0) {
            return Err(Error::invalid(format!(
                "regularity constants must be nonnegative, got ({c1}, {c2})"
            )));
        }
        Ok(Self { c1, c2 })
    }

    /// Constants valid for every member of the family (componentwise max).
    pub fn worst_case(all: &[Self]) -> Self {
        all.iter().fold(Self { c1: 0.0, c2: 0.0 }, |acc, r| Self {
            c1: acc.c1.max(r.c1),
            c2: acc.c2.max(r.c2),
        })
    }
}

/// Base-2 regularity constants of a Gaussian.
pub fn regularity_constants_gaussian(g: &GaussianMeasure) -> Result<RegularityConstants> {
    regularity_constants_gaussian_in(g, LogBase::Two)
}

/// From `∇ log p = −Σ⁻¹(x − m)`: `c1 = 1/λ_min(Σ)`, `c2 = ‖Σ⁻¹m‖`, each
/// scaled by `1/ln 2` in base 2.
pub fn regularity_constants_gaussian_in(
    g: &GaussianMeasure,
    base: LogBase,
) -> Result<RegularityConstants> {
    let lmin = g.min_eigenvalue();
    if !(lmin > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "smallest eigenvalue {lmin}"
        )));
    }
    let inv = g
        .cov()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("covariance is singular".into()))?;
    let k = base.factor();
    RegularityConstants::new(k / lmin, k * (inv * g.mean()).norm())
}

/// Signed outcome of one inequality `lhs ≤ rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

impl InequalityCheck {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        let slack = if rhs == f64::INFINITY {
            f64::INFINITY
        } else {
            rhs - lhs
        };
        Self { lhs, rhs, slack }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Check {
    pub l1_actual: f64,
    pub bound: f64,
    pub w2: f64,
    pub slack: f64,
}

fn exact_w2(mu: &Measure, nu: &Measure) -> Result<f64> {
    match (mu, nu) {
        (Measure::Gaussian(p), Measure::Gaussian(q)) => w2_gaussian(p, q),
        (Measure::Histogram(p), Measure::Histogram(q)) => w2_histogram_1d(p, q),
        _ => Err(Error::UnsupportedFamily(
            "exact W2 needs two Gaussians or two 1-D histograms".into(),
        )),
    }
}

/// `‖μ − ν‖₁` against `sqrt(c1(√E‖u‖² + √E‖v‖²) + 2c2) · √W₂(μ,ν)`.
pub fn lemma3_bound(mu: &Measure, nu: &Measure, rc: &RegularityConstants) -> Result<Lemma3Check> {
    let l1 = l1_distance(mu, nu)?;
    let w2 = exact_w2(mu, nu)?;
    let scale = rc.c1 * (second_moment(mu).sqrt() + second_moment(nu).sqrt()) + 2.0 * rc.c2;
    let bound = scale.sqrt() * w2.sqrt();
    Ok(Lemma3Check {
        l1_actual: l1,
        bound,
        w2,
        slack: bound - l1,
    })
}

/// Symmetric KL against `2(c1/2·(√E‖u‖² + √E‖v‖²) + c2)·W₂`.
pub fn kl_to_w2_check(
    mu: &GaussianMeasure,
    nu: &GaussianMeasure,
    rc: &RegularityConstants,
) -> Result<InequalityCheck> {
    let kl = kl_gaussian(mu, nu)? + kl_gaussian(nu, mu)?;
    let (m, n) = (Measure::Gaussian(mu.clone()), Measure::Gaussian(nu.clone()));
    let rhs = 2.0
        * (0.5 * rc.c1 * (second_moment(&m).sqrt() + second_moment(&n).sqrt()) + rc.c2)
        * w2_gaussian(mu, nu)?;
    Ok(InequalityCheck::new(kl, rhs))
}

/// Pinsker: `‖p − q‖₁ ≤ sqrt(2·KL(p‖q))`.
pub fn pinsker_check(p: &Measure, q: &Measure) -> Result<InequalityCheck> {
    let l1 = l1_distance(p, q)?;
    let kl = kl_divergence(p, q)?;
    Ok(InequalityCheck::new(l1, (2.0 * kl).sqrt()))
}

/// Exact W2 between 1-D discrete distributions via the quantile coupling.
pub fn w2_histogram_1d(p: &HistogramMeasure, q: &HistogramMeasure) -> Result<f64> {
    if p.support().cols() != 1 || q.support().cols() != 1 {
        return Err(Error::UnsupportedFamily(
            "histogram W2 is implemented for 1-D supports only".into(),
        ));
    }
    let sorted = |h: &HistogramMeasure| {
        let mut v: Vec<(f64, f64)> = h
            .support()
            .data()
            .iter()
            .copied()
            .zip(h.probs().iter().copied())
            .filter(|(_, w)| *w > 0.0)
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (a, b) = (sorted(p), sorted(q));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    loop {
        let m = ra.min(rb);
        total += m * (a[i].0 - b[j].0).powi(2);
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            if i == a.len() {
                break;
            }
            ra = a[i].1;
        }
        if rb <= 1e-15 {
            j += 1;
            if j == b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    Ok(total.sqrt())
}

/// Jensen step: `Σλ W₂^{1/2} ≤ [Σλ W₂²]^{1/4}` for nonnegative `w2`.
pub fn jensen_check(lambda: &[f64], w2: &[f64]) -> Result<InequalityCheck> {
    check_convex(lambda, w2.len())?;
    let lhs = lambda.iter().zip(w2).map(|(l, w)| l * w.sqrt()).sum();
    let rhs = lambda
        .iter()
        .zip(w2)
        .map(|(l, w)| l * w * w)
        .sum::<f64>()
        .powf(0.25);
    Ok(InequalityCheck::new(lhs, rhs))
}

/// `(a + b)^{1/4} ≤ a^{1/4} + b^{1/4}` for `a, b ≥ 0`.
pub fn quarter_power_check(a: f64, b: f64) -> Result<InequalityCheck> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::invalid(
            "quarter-power check needs nonnegative inputs",
        ));
    }
    Ok(InequalityCheck::new(
        (a + b).powf(0.25),
        a.powf(0.25) + b.powf(0.25),
    ))
}

/// Single seen domain: `R_s + L·‖·‖₁ + σ`.
pub fn lemma1_rhs(risk_seen: f64, l: f64, l1: f64, sigma: f64) -> f64 {
    risk_seen + l * l1 + sigma
}

/// Convex combination over seen domains, assembled term by term.
pub fn lemma2_rhs(
    lambda: &[f64],
    risks: &[f64],
    l: f64,
    l1: &[f64],
    sigmas: &[f64],
) -> Result<f64> {
    check_convex(lambda, risks.len())?;
    if l1.len() != risks.len() || sigmas.len() != risks.len() {
        return Err(Error::invalid("per-domain inputs must have equal lengths"));
    }
    let dot = |v: &[f64]| lambda.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    Ok(dot(risks) + l * dot(l1) + dot(sigmas))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearInvertibility {
    /// Largest reconstruction error `max ‖x − s(f(x))‖` over the samples.
    pub delta: f64,
    /// `2·Q·K·δ`.
    pub extra_term: f64,
}

/// Extra bound term paid when `f` is only nearly invertible through `s`.
pub fn near_invertibility_slack(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    s: &dyn Fn(&[f64]) -> Vec<f64>,
    samples: &[Vec<f64>],
    k: f64,
    q: f64,
) -> Result<NearInvertibility> {
    if samples.is_empty() {
        return Err(Error::invalid(
            "near-invertibility needs at least one sample",
        ));
    }
    if !(k >= 0.0 && q >= 0.0) {
        return Err(Error::invalid("Lipschitz constants must be nonnegative"));
    }
    let mut delta: f64 = 0.0;
    for x in samples {
        let back = s(&f(x));
        if back.len() != x.len() {
            return Err(Error::invalid("reconstruction has the wrong dimension"));
        }
        let e = x
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        delta = delta.max(e);
    }
    Ok(NearInvertibility {
        delta,
        extra_term: 2.0 * q * k * delta,
    })
}

pub(crate) fn check_convex(lambda: &[f64], n: usize) -> Result<()> {
    if lambda.len() != n || n == 0 {
        return Err(Error::invalid(format!(
            "expected {n} convex weights, got {}",
            lambda.len()
        )));
    }
    if lambda.iter().any(|l| !(*l >= 0.0)) || (lambda.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("weights must be nonnegative and sum to one"));
    }
    Ok(())
}
