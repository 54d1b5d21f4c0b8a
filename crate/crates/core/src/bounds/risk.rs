use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::Sampler;
use crate::{derive_seed, seeded_rng};

/// A (labeling) function from R^d to real-valued outputs.
pub trait Hypothesis: Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> Hypothesis for F {
    fn predict(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Halfspace classifier `1[w·x + b > 0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRule {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Hypothesis for LinearRule {
    fn predict(&self, x: &[f64]) -> f64 {
        let s: f64 = self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b;
        if s > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// `loss(a, b) = min(L, |a − b|)`; with `L = 1` on integer labels this is the 0-1 loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedLoss {
    pub l: f64,
}

impl TruncatedLoss {
    pub fn new(l: f64) -> Result<Self> {
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::invalid(format!(
                "loss bound L must be positive and finite, got {l}"
            )));
        }
        Ok(Self { l })
    }

    pub fn eval(&self, a: f64, b: f64) -> f64 {
        (a - b).abs().min(self.l)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Monte-Carlo mean of `loss(h(x), h_ref(x))` over `x ∼ mu`.
pub fn risk(
    h: &dyn Hypothesis,
    h_ref: &dyn Hypothesis,
    mu: &dyn Sampler,
    loss: &TruncatedLoss,
    n_mc: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_mc < 1 {
        return Err(Error::invalid("n_mc must be at least 1"));
    }
    let mut rng = seeded_rng(seed);
    let mut x = vec![0.0; mu.dim()];
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n_mc {
        mu.draw(&mut rng, &mut x);
        let v = loss.eval(h.predict(&x), h_ref.predict(&x));
        sum += v;
        sq += v * v;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = if n_mc > 1 {
        ((sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        value: mean,
        stderr: (var / n).sqrt(),
        n: n_mc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Seen,
    Unseen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub value: f64,
    pub side: Side,
    pub stderr: f64,
}

/// `min(E_{μ_u}[ℓ(h_u, h_s)], E_{μ_s}[ℓ(h_u, h_s)])`. The side reported is
/// the seen domain whenever the two agree within their combined standard error.
pub fn sigma_estimate(
    h_u: &dyn Hypothesis,
    h_s: &dyn Hypothesis,
    mu_u: &dyn Sampler,
    mu_s: &dyn Sampler,
    loss: &TruncatedLoss,
    n_mc: usize,
    seed: u64,
) -> Result<SigmaEstimate> {
    let eu = risk(h_u, h_s, mu_u, loss, n_mc, derive_seed(seed, 1))?;
    let es = risk(h_u, h_s, mu_s, loss, n_mc, derive_seed(seed, 2))?;
    let tie = (eu.stderr.powi(2) + es.stderr.powi(2)).sqrt();
    let side = if es.value <= eu.value + tie {
        Side::Seen
    } else {
        Side::Unseen
    };
    let (value, stderr) = if eu.value < es.value {
        (eu.value, eu.stderr)
    } else {
        (es.value, es.stderr)
    };
    Ok(SigmaEstimate {
        value,
        side,
        stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{GaussianMeasure, GaussianMixture};

    fn zero_one() -> TruncatedLoss {
        TruncatedLoss::new(1.0).unwrap()
    }

    #[test]
    fn identical_hypotheses_have_zero_risk() {
        let g = GaussianMeasure::univariate(0.0, 1.0).unwrap().sampler();
        let h = LinearRule {
            w: vec![1.0],
            b: 0.0,
        };
        let r = risk(&h, &h, &g, &zero_one(), 1000, 1).unwrap();
        assert_eq!((r.value, r.stderr), (0.0, 0.0));
    }

    #[test]
    fn constant_disagreement() {
        let g = GaussianMeasure::univariate(0.0, 1.0).unwrap().sampler();
        let one = |_: &[f64]| 1.0;
        let zero = |_: &[f64]| 0.0;
        assert_eq!(
            risk(&one, &zero, &g, &zero_one(), 100, 0).unwrap().value,
            1.0
        );
        assert!(risk(&one, &zero, &g, &zero_one(), 0, 0).is_err());
    }

    #[test]
    fn half_mass_flip_on_symmetric_mixture() {
        let mix = GaussianMixture {
            components: vec![
                GaussianMeasure::univariate(-2.0, 1.0).unwrap(),
                GaussianMeasure::univariate(2.0, 1.0).unwrap(),
            ],
            weights: vec![0.5, 0.5],
        };
        let truth = LinearRule {
            w: vec![1.0],
            b: 0.0,
        };
        // always predicts 0, so it is wrong exactly on x > 0
        let h = |_: &[f64]| 0.0;
        let r = risk(&h, &truth, &mix, &zero_one(), 100_000, 3).unwrap();
        assert!((r.value - 0.5).abs() <= 3.0 * r.stderr, "{r:?}");
    }

    #[test]
    fn sigma_region_masses() {
        // uniform on [0,1): disagreement region [0, 0.3) for the unseen law
        // and [0, 0.1) for the seen law, via shifted uniforms
        struct Uniform(f64);
        impl Sampler for Uniform {
            fn dim(&self) -> usize {
                1
            }
            fn draw(&self, rng: &mut dyn rand::RngCore, out: &mut [f64]) {
                use rand::Rng;
                out[0] = rng.gen_range(0.0..1.0) + self.0;
            }
        }
        let h_u = |x: &[f64]| if x[0] < 0.3 { 1.0 } else { 0.0 };
        let h_s = |_: &[f64]| 0.0;
        let s = sigma_estimate(
            &h_u,
            &h_s,
            &Uniform(0.0),
            &Uniform(0.2),
            &zero_one(),
            100_000,
            4,
        )
        .unwrap();
        assert!((s.value - 0.1).abs() <= 4.0 * s.stderr, "{s:?}");
        assert_eq!(s.side, Side::Seen);

        let same = sigma_estimate(
            &h_s,
            &h_s,
            &Uniform(0.0),
            &Uniform(0.2),
            &zero_one(),
            100,
            4,
        )
        .unwrap();
        assert_eq!(same.value, 0.0);
        assert_eq!(same.side, Side::Seen);
    }
}
