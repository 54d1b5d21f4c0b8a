use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::regime::{regime_sweep, RegimeRecord};
use super::report::{corollary1_report, theorem1_report, BoundDomain, BoundSettings};
use super::risk::LinearRule;
use super::{
    jensen_check, kl_to_w2_check, lemma1_rhs, lemma2_rhs, lemma3_bound, pinsker_check,
    quarter_power_check, regularity_constants_gaussian_in, LogBase, RegularityConstants,
};
use crate::error::Result;
use crate::measures::{GaussianMeasure, HistogramMeasure, Measure};
use crate::{derive_seed, seeded_rng, Rng as CaseRng};

/// Exact-family inequalities must hold to this signed slack.
pub const EXACT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub cases: usize,
    pub seed: u64,
    /// Loss bound L.
    pub l: f64,
    pub n_mc: usize,
    pub log_base: LogBase,
    pub regime_cases: usize,
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            cases: 100,
            seed: 0,
            l: 1.0,
            n_mc: 100_000,
            log_base: LogBase::Two,
            regime_cases: 100,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub name: String,
    pub cases: usize,
    pub min_slack: f64,
    /// Smallest `slack + tolerance`; negative means a violation.
    pub min_margin: f64,
    pub monte_carlo: bool,
    pub failures: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub sweeps: Vec<SweepSummary>,
    pub regime: Vec<RegimeRecord>,
    pub regime_has_both_orderings: bool,
    pub regime_conditions_verified: bool,
    pub all_passed: bool,
}

/// (slack, tolerance) per case.
fn summarize(name: &str, monte_carlo: bool, cases: Vec<(f64, f64)>) -> SweepSummary {
    let min_slack = cases.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let min_margin = cases
        .iter()
        .map(|c| c.0 + c.1)
        .fold(f64::INFINITY, f64::min);
    let failures = cases.iter().filter(|c| !(c.0 + c.1 >= 0.0)).count();
    SweepSummary {
        name: name.into(),
        cases: cases.len(),
        min_slack,
        min_margin,
        monte_carlo,
        failures,
        passed: failures == 0,
    }
}

fn run_cases<T: Send>(
    cfg: &SweepConfig,
    tag: u64,
    f: impl Fn(&mut CaseRng) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let one = |i: usize| {
        f(&mut seeded_rng(derive_seed(
            derive_seed(cfg.seed, tag),
            i as u64,
        )))
    };
    if cfg.parallel {
        (0..cfg.cases).into_par_iter().map(one).collect()
    } else {
        (0..cfg.cases).map(one).collect()
    }
}

fn convex_weights(rng: &mut CaseRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn random_histogram(rng: &mut CaseRng, k: usize, allow_zeros: bool) -> HistogramMeasure {
    let mut p: Vec<f64> = (0..k)
        .map(|_| {
            if allow_zeros && rng.gen_bool(0.2) {
                0.0
            } else {
                Exp1.sample(rng)
            }
        })
        .collect();
    if p.iter().all(|x| *x == 0.0) {
        p[0] = 1.0;
    }
    let s: f64 = p.iter().sum();
    HistogramMeasure::on_grid(p.iter().map(|x| x / s).collect()).expect("normalized")
}

fn random_gaussian(rng: &mut CaseRng, d: usize) -> GaussianMeasure {
    let mean = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let cov = &a * a.transpose() + DMatrix::identity(d, d) * rng.gen_range(0.1..1.5);
    let cov = 0.5 * (&cov + cov.transpose());
    GaussianMeasure::new(mean, cov).expect("PD by construction")
}

fn random_rule(rng: &mut CaseRng, d: usize) -> LinearRule {
    LinearRule {
        w: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        b: rng.gen_range(-1.0..1.0),
    }
}

fn pair_constants(
    a: &GaussianMeasure,
    b: &GaussianMeasure,
    base: LogBase,
) -> Result<RegularityConstants> {
    Ok(RegularityConstants::worst_case(&[
        regularity_constants_gaussian_in(a, base)?,
        regularity_constants_gaussian_in(b, base)?,
    ]))
}

/// Randomized sweeps over every inequality in the bound chain plus the
/// W₁/W₂ regime comparison.
pub fn run_sweeps(cfg: &SweepConfig) -> Result<SweepOutcome> {
    let mut sweeps = vec![];

    let pinsker = run_cases(cfg, 1, |rng| {
        let k = rng.gen_range(2..=8);
        let p = Measure::Histogram(random_histogram(rng, k, true));
        let q = Measure::Histogram(random_histogram(rng, k, false));
        Ok((pinsker_check(&p, &q)?.slack, EXACT_TOL))
    })?;
    sweeps.push(summarize("pinsker", false, pinsker));

    let lemma3 = run_cases(cfg, 2, |rng| {
        let a = GaussianMeasure::univariate(rng.gen_range(-3.0..3.0), rng.gen_range(0.1..4.0))?;
        let b = GaussianMeasure::univariate(rng.gen_range(-3.0..3.0), rng.gen_range(0.1..4.0))?;
        let rc = pair_constants(&a, &b, cfg.log_base)?;
        Ok((
            lemma3_bound(&Measure::Gaussian(a), &Measure::Gaussian(b), &rc)?.slack,
            EXACT_TOL,
        ))
    })?;
    sweeps.push(summarize("lemma3", false, lemma3));

    let kl = run_cases(cfg, 3, |rng| {
        let d = rng.gen_range(1..=3);
        let (a, b) = (random_gaussian(rng, d), random_gaussian(rng, d));
        let rc = pair_constants(&a, &b, cfg.log_base)?;
        Ok((kl_to_w2_check(&a, &b, &rc)?.slack, EXACT_TOL))
    })?;
    sweeps.push(summarize("kl_to_w2", false, kl));

    let jensen = run_cases(cfg, 4, |rng| {
        let s = rng.gen_range(1..=6);
        let lambda = convex_weights(rng, s);
        let w: Vec<f64> = (0..s)
            .map(|_| 10f64.powf(rng.gen_range(-3.0..2.0)))
            .collect();
        Ok((jensen_check(&lambda, &w)?.slack, EXACT_TOL))
    })?;
    sweeps.push(summarize("jensen", false, jensen));

    let quarter = run_cases(cfg, 5, |rng| {
        let draw = |rng: &mut CaseRng| {
            if rng.gen_bool(0.1) {
                0.0
            } else {
                10f64.powf(rng.gen_range(-6.0..6.0))
            }
        };
        let (a, b) = (draw(rng), draw(rng));
        Ok((quarter_power_check(a, b)?.slack, EXACT_TOL))
    })?;
    sweeps.push(summarize("quarter_power", false, quarter));

    let convexity = run_cases(cfg, 6, |rng| {
        let s = rng.gen_range(1..=6);
        let lambda = convex_weights(rng, s);
        let r: Vec<f64> = (0..s).map(|_| rng.gen_range(0.0..1.0)).collect();
        let l1: Vec<f64> = (0..s).map(|_| rng.gen_range(0.0..2.0)).collect();
        let sig: Vec<f64> = (0..s).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mix: f64 = (0..s)
            .map(|i| lambda[i] * lemma1_rhs(r[i], cfg.l, l1[i], sig[i]))
            .sum();
        let direct = lemma2_rhs(&lambda, &r, cfg.l, &l1, &sig)?;
        Ok((-(mix - direct).abs(), 1e-12))
    })?;
    sweeps.push(summarize("lemma2_convexity", false, convexity));

    let settings = |seed: u64| BoundSettings {
        l: cfg.l,
        n_mc: cfg.n_mc,
        seed,
        log_base: cfg.log_base,
    };
    let bounds = run_cases(cfg, 7, |rng| {
        let s = rng.gen_range(1..=3);
        let d = rng.gen_range(1..=2);
        let seen_g: Vec<GaussianMeasure> = (0..s).map(|_| random_gaussian(rng, d)).collect();
        let unseen_g = random_gaussian(rng, d);
        let rules: Vec<LinearRule> = (0..=s).map(|_| random_rule(rng, d)).collect();
        let h = random_rule(rng, d);
        let lambda = convex_weights(rng, s);
        let reference = random_gaussian(rng, d);
        let seed = rng.gen();
        let seen: Vec<BoundDomain> = seen_g
            .iter()
            .zip(&rules)
            .map(|(g, r)| BoundDomain {
                measure: g.clone(),
                labeling: r,
            })
            .collect();
        let unseen = BoundDomain {
            measure: unseen_g,
            labeling: &rules[s],
        };
        let t = theorem1_report(&seen, &unseen, &h, &lambda, &settings(seed))?;
        let c = corollary1_report(&seen, &unseen, &h, &lambda, &reference, &settings(seed))?;
        let excess = c.corollary.as_ref().map_or(0.0, |k| k.split_excess);
        Ok((
            (t.slack, 3.0 * t.mc_stderr),
            (c.slack, 3.0 * c.mc_stderr),
            excess,
        ))
    })?;
    sweeps.push(summarize(
        "theorem1",
        true,
        bounds.iter().map(|b| b.0).collect(),
    ));
    sweeps.push(summarize(
        "corollary1",
        true,
        bounds.iter().map(|b| b.1).collect(),
    ));
    sweeps.push(summarize(
        "corollary_split",
        false,
        bounds.iter().map(|b| (b.2, EXACT_TOL)).collect(),
    ));

    let regime = regime_sweep(cfg.regime_cases, derive_seed(cfg.seed, 8))?;
    let both =
        regime.iter().any(|r| r.sqrt_w2_tighter) && regime.iter().any(|r| !r.sqrt_w2_tighter);
    let verified = regime.iter().all(|r| r.chain_holds && r.implication_holds);
    let all_passed = sweeps.iter().all(|s| s.passed) && verified;
    Ok(SweepOutcome {
        sweeps,
        regime,
        regime_has_both_orderings: both,
        regime_conditions_verified: verified,
        all_passed,
    })
}
