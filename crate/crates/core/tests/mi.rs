use otdg::diffmath::{Bindings, Graph, NodeId, ParamId, Tensor};
use otdg::mi::{gaussian_mi_oracle, mige_gradient, ssge_score, Bandwidth, Encoder, MiOptions};
use otdg::seeded_rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// `f(x) = w·x` on scalar inputs.
struct Scalar(f64);

impl Encoder for Scalar {
    fn encode(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(ParamId(0));
        g.matmul(x, w)
    }
    fn parameters(&self) -> Bindings {
        Bindings::from([(ParamId(0), Tensor::matrix(1, 1, vec![self.0]).unwrap())])
    }
}

fn normal_column(n: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::matrix(
        n,
        1,
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )
    .unwrap()
}

/// dI/dw estimate (the estimator returns the gradient of −I).
fn mi_slope(w: f64, delta: f64, n: usize, seed: u64) -> f64 {
    let opts = MiOptions {
        delta,
        ..MiOptions::default()
    };
    let g = mige_gradient(&Scalar(w), &[normal_column(n, seed)], &opts, seed + 1000).unwrap();
    -g.grads[&ParamId(0)].data()[0]
}

fn score_mae(n: usize, seed: u64) -> f64 {
    let s = ssge_score(&normal_column(n, seed), 6, Bandwidth::MEDIAN).unwrap();
    let grid: Vec<f64> = (0..=40).map(|i| -2.0 + 0.1 * i as f64).collect();
    let est = s
        .eval_batch(&Tensor::matrix(grid.len(), 1, grid.clone()).unwrap())
        .unwrap();
    grid.iter()
        .zip(est.data())
        .map(|(z, e)| (e + z).abs())
        .sum::<f64>()
        / grid.len() as f64
}

#[test]
fn standard_normal_score_is_minus_identity() {
    let mae = score_mae(1000, 3);
    assert!(mae <= 0.15, "{mae}");
}

#[test]
fn shifted_scaled_normal_score() {
    let (m, sd) = (2.0, 0.5);
    let mut rng = seeded_rng(9);
    let dist = Normal::new(m, sd).unwrap();
    let x = Tensor::matrix(1000, 1, (0..1000).map(|_| dist.sample(&mut rng)).collect()).unwrap();
    let s = ssge_score(&x, 6, Bandwidth::MEDIAN).unwrap();
    let grid: Vec<f64> = (0..=20).map(|i| m - sd + 0.05 * i as f64).collect();
    let est = s
        .eval_batch(&Tensor::matrix(grid.len(), 1, grid.clone()).unwrap())
        .unwrap();
    let mae = grid
        .iter()
        .zip(est.data())
        .map(|(z, e)| (e + (z - m) / (sd * sd)).abs())
        .sum::<f64>()
        / grid.len() as f64;
    // scores are 1/σ² = 4 times steeper than the standard case
    assert!(mae <= 0.6, "{mae}");
}

#[test]
fn affine_two_dimensional_score() {
    // x = A e with A = diag(1, 2) rotated by 30°; score is −Σ⁻¹ x
    let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
    let a = [[c, -2.0 * s], [s, 2.0 * c]];
    let mut rng = seeded_rng(4);
    let n = 1500;
    let mut data = vec![];
    for _ in 0..n {
        let e: [f64; 2] = [
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        data.push(a[0][0] * e[0] + a[0][1] * e[1]);
        data.push(a[1][0] * e[0] + a[1][1] * e[1]);
    }
    let x = Tensor::matrix(n, 2, data).unwrap();
    let est = ssge_score(&x, 8, Bandwidth::MEDIAN).unwrap();
    // Σ = A Aᵀ
    let sig = [
        [
            a[0][0].powi(2) + a[0][1].powi(2),
            a[0][0] * a[1][0] + a[0][1] * a[1][1],
        ],
        [
            a[0][0] * a[1][0] + a[0][1] * a[1][1],
            a[1][0].powi(2) + a[1][1].powi(2),
        ],
    ];
    let det = sig[0][0] * sig[1][1] - sig[0][1] * sig[1][0];
    let inv = [
        [sig[1][1] / det, -sig[0][1] / det],
        [-sig[1][0] / det, sig[0][0] / det],
    ];
    let mut err = 0.0;
    let mut norm = 0.0;
    for i in 0..50 {
        let p = x.row(i);
        let got = est.eval(p).unwrap();
        for k in 0..2 {
            let want = -(inv[k][0] * p[0] + inv[k][1] * p[1]);
            err += (got[k] - want).abs();
            norm += want.abs();
        }
    }
    assert!(err / norm < 0.3, "relative L1 error {}", err / norm);
}

#[test]
fn gradient_matches_gaussian_oracle() {
    let (_, want) = gaussian_mi_oracle(1.0, 1.0).unwrap();
    let ests: Vec<f64> = (0..20).map(|s| mi_slope(1.0, 1.0, 2000, s)).collect();
    let mean = ests.iter().sum::<f64>() / ests.len() as f64;
    assert!((mean - want).abs() <= 0.2 * want, "{mean} vs {want}");
    assert!(
        (ests[0] - want).abs() <= 0.2 * want,
        "{} vs {want}",
        ests[0]
    );
    assert!(ests.iter().filter(|e| **e > 0.0).count() >= 18);
}

#[test]
fn gradient_vanishes_at_zero_weight() {
    let e = mi_slope(0.0, 1.0, 2000, 5);
    assert!(e.abs() <= 0.05, "{e}");
}

#[test]
fn gradient_sign_on_weight_grid() {
    for w in [0.25, 0.5, 1.0, 2.0] {
        let agree = (0..20)
            .filter(|&s| mi_slope(w, 1.0, 2000, 40 + s) > 0.0)
            .count();
        assert!(agree >= 18, "w = {w}: {agree}/20");
    }
    assert!(mi_slope(-1.0, 1.0, 2000, 3) < 0.0);
}

#[test]
fn score_error_shrinks_with_samples() {
    let median = |n| {
        let mut e: Vec<f64> = (0..10).map(|s| score_mae(n, 100 + s)).collect();
        e.sort_by(f64::total_cmp);
        0.5 * (e[4] + e[5])
    };
    let (a, b, c) = (median(250), median(1000), median(4000));
    assert!(a > b && b > c, "{a} {b} {c}");
}

#[test]
fn zero_noise_is_rejected() {
    let opts = MiOptions {
        delta: 0.0,
        ..MiOptions::default()
    };
    assert!(mige_gradient(&Scalar(1.0), &[normal_column(50, 0)], &opts, 0).is_err());
}
