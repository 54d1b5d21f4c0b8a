use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::risk::{risk, sigma_estimate, Hypothesis, McEstimate, SigmaEstimate, TruncatedLoss};
use super::{check_convex, regularity_constants_gaussian_in, LogBase, RegularityConstants};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::measures::{second_moment, sqrtm_psd, w2_gaussian, GaussianMeasure, Measure};

/// One domain as seen in representation space: the pushforward law and
/// the domain's labeling function on that space.
pub struct BoundDomain<'a> {
    pub measure: GaussianMeasure,
    pub labeling: &'a dyn Hypothesis,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSettings {
    /// Loss bound L.
    pub l: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub log_base: LogBase,
}

impl BoundSettings {
    pub fn new(l: f64) -> Self {
        Self {
            l,
            n_mc: 100_000,
            seed: 0,
            log_base: LogBase::Two,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub l: f64,
    pub c: f64,
    pub lambda: Vec<f64>,
    pub regularity: RegularityConstants,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryTerms {
    /// `L·C·[Σλ W₂²(ref, seen_s)]^{1/4}`.
    pub seen_to_reference: f64,
    /// `L·C·[W₂²(unseen, ref)]^{1/4}`.
    pub reference_to_unseen: f64,
    /// The unsplit transport term of the theorem for the same inputs.
    pub theorem_transport: f64,
    /// `seen_to_reference + reference_to_unseen − theorem_transport`, never negative.
    pub split_excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs_risk: f64,
    pub lhs_stderr: f64,
    /// `Σλ R_s(h)`.
    pub term_risks: f64,
    /// `L·C·[Σλ W₂²]^{1/4}`, or the split sum for the corollary.
    pub term_transport: f64,
    /// `Σλ σ^{(u,s)}`.
    pub term_sigma: f64,
    pub rhs_total: f64,
    pub slack: f64,
    /// Combined Monte-Carlo standard error of `slack`.
    pub mc_stderr: f64,
    pub constants: BoundConstants,
    /// `W₂²(unseen, seen_s)` per seen domain.
    pub w2_squared: Vec<f64>,
    pub seen_risks: Vec<McEstimate>,
    pub sigmas: Vec<SigmaEstimate>,
    pub corollary: Option<CorollaryTerms>,
}

fn assemble(
    seen: &[BoundDomain],
    unseen: &BoundDomain,
    h: &dyn Hypothesis,
    lambda: &[f64],
    settings: &BoundSettings,
) -> Result<BoundReport> {
    check_convex(lambda, seen.len())?;
    let d = unseen.measure.dim();
    if seen.iter().any(|s| s.measure.dim() != d) {
        return Err(Error::invalid("all pushforwards must share a dimension"));
    }
    let loss = TruncatedLoss::new(settings.l)?;
    let mut rcs = vec![regularity_constants_gaussian_in(
        &unseen.measure,
        settings.log_base,
    )?];
    for s in seen {
        rcs.push(regularity_constants_gaussian_in(
            &s.measure,
            settings.log_base,
        )?);
    }
    let rc = RegularityConstants::worst_case(&rcs);
    let m2 = |g: &GaussianMeasure| second_moment(&Measure::Gaussian(g.clone())).sqrt();
    let mu = m2(&unseen.measure);
    let c = seen
        .iter()
        .map(|s| (rc.c1 * (mu + m2(&s.measure)) + 2.0 * rc.c2).sqrt())
        .fold(0.0, f64::max);
    let w2_squared = seen
        .iter()
        .map(|s| w2_gaussian(&unseen.measure, &s.measure).map(|w| w * w))
        .collect::<Result<Vec<_>>>()?;

    let u_sampler = unseen.measure.sampler();
    let lhs = risk(
        h,
        unseen.labeling,
        &u_sampler,
        &loss,
        settings.n_mc,
        derive_seed(settings.seed, 0),
    )?;
    let per_domain: Vec<Result<(McEstimate, SigmaEstimate)>> = seen
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sampler = s.measure.sampler();
            let r = risk(
                h,
                s.labeling,
                &sampler,
                &loss,
                settings.n_mc,
                derive_seed(settings.seed, 1 + 2 * i as u64),
            )?;
            let sig = sigma_estimate(
                unseen.labeling,
                s.labeling,
                &u_sampler,
                &sampler,
                &loss,
                settings.n_mc,
                derive_seed(settings.seed, 2 + 2 * i as u64),
            )?;
            Ok((r, sig))
        })
        .collect();
    let (mut seen_risks, mut sigmas) = (vec![], vec![]);
    for p in per_domain {
        let (r, s) = p?;
        seen_risks.push(r);
        sigmas.push(s);
    }
    let dot = |f: &dyn Fn(usize) -> f64| (0..seen.len()).map(|i| lambda[i] * f(i)).sum::<f64>();
    let term_risks = dot(&|i| seen_risks[i].value);
    let term_sigma = dot(&|i| sigmas[i].value);
    let term_transport = settings.l * c * dot(&|i| w2_squared[i]).powf(0.25);
    let var = lhs.stderr.powi(2)
        + dot(&|i| lambda[i] * (seen_risks[i].stderr.powi(2) + sigmas[i].stderr.powi(2)));
    let rhs_total = term_risks + term_transport + term_sigma;
    Ok(BoundReport {
        lhs_risk: lhs.value,
        lhs_stderr: lhs.stderr,
        term_risks,
        term_transport,
        term_sigma,
        rhs_total,
        slack: rhs_total - lhs.value,
        mc_stderr: var.sqrt(),
        constants: BoundConstants {
            l: settings.l,
            c,
            lambda: lambda.to_vec(),
            regularity: rc,
        },
        w2_squared,
        seen_risks,
        sigmas,
        corollary: None,
    })
}

/// Unseen-domain risk against the seen risks, the quarter-power transport
/// term and the combined-risk term. Pushforwards must be Gaussian so that
/// W₂ and second moments are exact.
pub fn theorem1_report(
    seen: &[BoundDomain],
    unseen: &BoundDomain,
    h: &dyn Hypothesis,
    lambda: &[f64],
    settings: &BoundSettings,
) -> Result<BoundReport> {
    assemble(seen, unseen, h, lambda, settings)
}

/// As [`theorem1_report`] with the transport term split through `reference`.
pub fn corollary1_report(
    seen: &[BoundDomain],
    unseen: &BoundDomain,
    h: &dyn Hypothesis,
    lambda: &[f64],
    reference: &GaussianMeasure,
    settings: &BoundSettings,
) -> Result<BoundReport> {
    let mut r = assemble(seen, unseen, h, lambda, settings)?;
    if reference.dim() != unseen.measure.dim() {
        return Err(Error::invalid(
            "reference must live in the representation space",
        ));
    }
    let lc = settings.l * r.constants.c;
    let to_seen: f64 = seen
        .iter()
        .zip(lambda)
        .map(|(s, l)| w2_gaussian(reference, &s.measure).map(|w| l * w * w))
        .sum::<Result<f64>>()?;
    let to_unseen = w2_gaussian(&unseen.measure, reference)?.powi(2);
    let seen_to_reference = lc * to_seen.powf(0.25);
    let reference_to_unseen = lc * to_unseen.powf(0.25);
    let theorem_transport = r.term_transport;
    r.term_transport = seen_to_reference + reference_to_unseen;
    r.rhs_total = r.term_risks + r.term_transport + r.term_sigma;
    r.slack = r.rhs_total - r.lhs_risk;
    r.corollary = Some(CorollaryTerms {
        seen_to_reference,
        reference_to_unseen,
        theorem_transport,
        split_excess: seen_to_reference + reference_to_unseen - theorem_transport,
    });
    Ok(r)
}

/// W₂ barycenter of Gaussians: mean `Σλ m_s`, covariance the fixed point of
/// `S = S^{-1/2} (Σλ (S^{1/2} Σ_s S^{1/2})^{1/2})² S^{-1/2}`.
pub fn gaussian_barycenter(gs: &[GaussianMeasure], lambda: &[f64]) -> Result<GaussianMeasure> {
    check_convex(lambda, gs.len())?;
    let d = gs[0].dim();
    if gs.iter().any(|g| g.dim() != d) {
        return Err(Error::invalid("all Gaussians must share a dimension"));
    }
    let mean = gs
        .iter()
        .zip(lambda)
        .fold(DVector::zeros(d), |acc, (g, l)| acc + g.mean() * *l);
    let mut s = gs
        .iter()
        .zip(lambda)
        .fold(DMatrix::zeros(d, d), |acc, (g, l)| acc + g.cov() * *l);
    for _ in 0..1000 {
        let root = sqrtm_psd(&s);
        let inv_root = root
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("barycenter covariance became singular".into()))?;
        let t = gs
            .iter()
            .zip(lambda)
            .fold(DMatrix::zeros(d, d), |acc, (g, l)| {
                acc + sqrtm_psd(&(&root * g.cov() * &root)) * *l
            });
        let next = &inv_root * &t * &t * &inv_root;
        let next = 0.5 * (&next + next.transpose());
        let change = (&next - &s).amax();
        s = next;
        if change < 1e-13 * s.amax().max(1.0) {
            break;
        }
    }
    GaussianMeasure::new(mean, s)
}
