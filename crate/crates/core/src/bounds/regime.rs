use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::Result;
use crate::measures::EmpiricalMeasure;
use crate::ot::{exact_ot, exact_w1};
use crate::seeded_rng;

/// Which of `W₁` and `√W₂` is the smaller controlling distance for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRecord {
    pub w1: f64,
    pub w2: f64,
    pub sqrt_w2: f64,
    pub diam: f64,
    /// `[Diam·W₁]^{1/4}`, an upper bound on `√W₂`.
    pub quarter_bound: f64,
    /// `Diam ≤ W₁³`, which forces `√W₂ ≤ W₁`.
    pub sufficient_condition_holds: bool,
    pub sqrt_w2_tighter: bool,
    /// `W₁ ≤ W₂` and `√W₂ ≤ [Diam·W₁]^{1/4}`.
    pub chain_holds: bool,
    /// The sufficient condition, when it holds, delivered `√W₂ ≤ W₁`.
    pub implication_holds: bool,
}

/// Largest distance between any two points of the given clouds.
pub fn diameter(clouds: &[&EmpiricalMeasure]) -> f64 {
    let pts: Vec<&[f64]> = clouds
        .iter()
        .flat_map(|c| (0..c.len()).map(move |i| c.point(i)))
        .collect();
    let mut best: f64 = 0.0;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            let d = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            best = best.max(d);
        }
    }
    best
}

const REL: f64 = 1e-12;

pub fn regime_compare(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    f_range_diameter: f64,
) -> Result<RegimeRecord> {
    let w1 = exact_w1(mu, nu)?;
    let w2 = exact_ot(mu, nu)?.sqrt();
    let sqrt_w2 = w2.sqrt();
    let diam = f_range_diameter;
    let quarter_bound = (diam * w1).powf(0.25);
    let sufficient = diam <= w1.powi(3);
    let tol = |x: f64| REL * x.abs().max(1.0);
    Ok(RegimeRecord {
        w1,
        w2,
        sqrt_w2,
        diam,
        quarter_bound,
        sufficient_condition_holds: sufficient,
        sqrt_w2_tighter: sqrt_w2 < w1,
        chain_holds: w1 <= w2 + tol(w2) && sqrt_w2 <= quarter_bound + tol(quarter_bound),
        implication_holds: !sufficient || sqrt_w2 <= w1 + tol(w1),
    })
}

fn cloud(rng: &mut impl Rng, n: usize, d: usize, scale: f64, shift: &[f64]) -> EmpiricalMeasure {
    let data = (0..n * d)
        .map(|k| shift[k % d] + scale * rng.gen_range(-1.0..1.0))
        .collect();
    EmpiricalMeasure::uniform(Tensor::matrix(n, d, data).expect("n×d")).expect("uniform cloud")
}

/// Random small cloud pairs over several orders of magnitude of spread and
/// separation, followed by one constructed far-apart pair found by doubling
/// a translation until `Diam ≤ W₁³`.
pub fn regime_sweep(cases: usize, seed: u64) -> Result<Vec<RegimeRecord>> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(cases + 1);
    for _ in 0..cases {
        let n = rng.gen_range(2..=6);
        let d = rng.gen_range(1..=3);
        let scale = 10f64.powf(rng.gen_range(-2.0..1.0));
        let sep = 10f64.powf(rng.gen_range(-2.0..1.5));
        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let shift: Vec<f64> = dir.iter().map(|x| sep * x / norm).collect();
        let a = cloud(&mut rng, n, d, scale, &vec![0.0; d]);
        let b = cloud(&mut rng, n, d, scale, &shift);
        out.push(regime_compare(&a, &b, diameter(&[&a, &b]))?);
    }
    let a = cloud(&mut rng, 4, 2, 0.5, &[0.0, 0.0]);
    let base = cloud(&mut rng, 4, 2, 0.5, &[0.0, 0.0]);
    let mut t = 1.0;
    loop {
        let b = base.translated(&[t, 0.0]);
        let rec = regime_compare(&a, &b, diameter(&[&a, &b]))?;
        if rec.sufficient_condition_holds || t > 1e6 {
            out.push(rec);
            break;
        }
        t *= 2.0;
    }
    Ok(out)
}
