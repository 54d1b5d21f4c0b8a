mod common;

use common::*;
use otdg::diffmath::{finite_diff_check, Bindings, Graph, ParamId, Tensor};
use otdg::measures::{sample, w2_gaussian, EmpiricalMeasure, GaussianMeasure};
use otdg::ot::*;
use rand::Rng;

#[test]
fn permutation_oracle_enumerates_all() {
    assert_eq!(permutations(5).len(), 120);
}

#[test]
fn exact_ot_equals_exhaustive_minimum() {
    let mut r = rng(3);
    for _ in 0..5 {
        let a = random_cloud(&mut r, 5, 2, 1.0);
        let b = random_cloud(&mut r, 5, 2, 1.0);
        let oracle = brute_force_ot(&a, &b, sq_dist);
        assert!((exact_ot(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn sinkhorn_cost_tracks_brute_force_at_small_eps() {
    let mut r = rng(17);
    let opts = SinkhornOptions {
        eps: 1e-3,
        max_iter: 20_000,
        tol: 1e-6,
        eps_scaling: true,
    };
    for _ in 0..40 {
        let n = r.gen_range(1..=6);
        let d = r.gen_range(1..=3);
        let a = random_cloud(&mut r, n, d, 1.0);
        let b = random_cloud(&mut r, n, d, 1.0);
        let oracle = brute_force_ot(&a, &b, sq_dist);
        let plan = sinkhorn_ot(&a, &b, &opts).unwrap();
        assert!(
            (plan.cost - oracle).abs() <= 0.02 * oracle,
            "{} vs {oracle}",
            plan.cost
        );
    }
}

#[test]
fn plans_satisfy_marginals() {
    let mut r = rng(5);
    for eps in [0.5, 0.05, 0.01] {
        let a = random_cloud(&mut r, 7, 2, 1.0);
        let w: Vec<f64> = {
            let raw: Vec<f64> = (0..5).map(|_| r.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        };
        let b = EmpiricalMeasure::new(random_cloud(&mut r, 5, 2, 1.0).points().clone(), w).unwrap();
        let opts = SinkhornOptions {
            eps,
            max_iter: 5000,
            ..Default::default()
        };
        let p = sinkhorn_ot(&a, &b, &opts).unwrap();
        assert!(p.converged);
        for i in 0..7 {
            let row: f64 = p.plan.row(i).iter().sum();
            assert!((row - a.weights()[i]).abs() <= opts.tol);
        }
        for j in 0..5 {
            let col: f64 = (0..7).map(|i| p.plan.at2(i, j)).sum();
            assert!((col - b.weights()[j]).abs() <= opts.tol);
        }
        assert!(p.cost >= 0.0);
        assert!((p.cost + p.entropic_term - p.ot_eps).abs() < 1e-5);
    }
}

#[test]
fn eps_gap_shrinks_monotonically() {
    let mut r = rng(23);
    for _ in 0..20 {
        let n = r.gen_range(2..=6);
        let a = random_cloud(&mut r, n, 2, 1.0);
        let b = random_cloud(&mut r, n, 2, 1.0);
        let exact = exact_ot(&a, &b).unwrap();
        let gaps: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&eps| {
                let opts = SinkhornOptions {
                    eps,
                    max_iter: 20_000,
                    tol: 1e-9,
                    eps_scaling: true,
                };
                (sinkhorn_ot(&a, &b, &opts).unwrap().cost - exact).abs()
            })
            .collect();
        assert!(
            gaps[1] <= gaps[0] + 1e-9 && gaps[2] <= gaps[1] + 1e-9,
            "{gaps:?}"
        );
    }
}

#[test]
fn divergence_symmetric_nonnegative_positive() {
    let mut r = rng(29);
    let opts = SinkhornOptions::with_eps(0.1);
    for _ in 0..100 {
        let (n, m) = (r.gen_range(1..8), r.gen_range(1..8));
        let a = random_cloud(&mut r, n, 2, 1.0);
        let b = random_cloud(&mut r, m, 2, 1.0);
        let ab = sinkhorn_divergence(&a, &b, &opts).unwrap();
        let ba = sinkhorn_divergence(&b, &a, &opts).unwrap();
        assert!((ab - ba).abs() <= 1e-8);
        assert!(ab > 0.0, "{ab}");
        assert!(sinkhorn_divergence(&a, &a, &opts).unwrap().abs() <= 1e-8);
    }
}

#[test]
fn divergence_recovers_gaussian_w2() {
    let p = GaussianMeasure::isotropic(&[0.0, 0.0], 1.0).unwrap();
    let q = GaussianMeasure::isotropic(&[3.0, 0.0], 1.0).unwrap();
    let w2 = w2_gaussian(&p, &q).unwrap().powi(2);
    let a = sample(&p, 2000, 1).unwrap();
    let b = sample(&q, 2000, 2).unwrap();
    let s = sinkhorn_divergence(&a, &b, &SinkhornOptions::with_eps(0.5)).unwrap();
    assert!((s - w2).abs() <= 0.1 * w2, "{s} vs {w2}");
}

#[test]
fn barycenter_of_single_measure_is_that_measure() {
    let mut r = rng(31);
    let a = random_cloud(&mut r, 16, 2, 1.0);
    let opts = BarycenterOptions {
        k: 16,
        sinkhorn: SinkhornOptions::with_eps(1e-3),
        ..Default::default()
    };
    let res = free_support_barycenter(&[a.clone()], None, &opts).unwrap();
    let s = sinkhorn_divergence(&res.measure, &a, &SinkhornOptions::with_eps(1e-2)).unwrap();
    assert!(s < 1e-3, "{s}");
    let res = free_support_barycenter(&[a.clone(), a.clone(), a.clone()], None, &opts).unwrap();
    let s = sinkhorn_divergence(&res.measure, &a, &SinkhornOptions::with_eps(1e-2)).unwrap();
    assert!(s < 1e-3, "{s}");
}

#[test]
fn barycenter_of_two_gaussians_centres_between_them() {
    for seed in 0..3 {
        let a = sample(
            &GaussianMeasure::isotropic(&[-2.0, 0.0], 0.25).unwrap(),
            200,
            seed,
        )
        .unwrap();
        let b = sample(
            &GaussianMeasure::isotropic(&[2.0, 0.0], 0.25).unwrap(),
            200,
            seed + 100,
        )
        .unwrap();
        let opts = BarycenterOptions {
            k: 64,
            sinkhorn: SinkhornOptions::with_eps(0.05),
            seed,
            ..Default::default()
        };
        let res = free_support_barycenter(&[a, b], None, &opts).unwrap();
        let m = res.measure.mean();
        assert!(m[0].abs() < 0.1 && m[1].abs() < 0.1, "{m:?}");
        assert!(res.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-6));
    }
}

#[test]
fn barycenter_is_translation_equivariant() {
    let mut r = rng(37);
    let ms: Vec<_> = (0..3).map(|_| random_cloud(&mut r, 10, 2, 1.0)).collect();
    let t = [5.0, -3.0];
    let shifted: Vec<_> = ms.iter().map(|m| m.translated(&t)).collect();
    let opts = BarycenterOptions {
        k: 10,
        sinkhorn: SinkhornOptions::with_eps(0.01),
        ..Default::default()
    };
    let base = free_support_barycenter(&ms, None, &opts).unwrap();
    let moved = free_support_barycenter(&shifted, None, &opts).unwrap();
    let back = moved.measure.translated(&[-5.0, 3.0]);
    assert!(base.measure.points().max_abs_diff(back.points()) < 1e-6);
}

#[test]
fn parallel_barycenter_matches_serial() {
    let mut r = rng(41);
    let ms: Vec<_> = (0..4).map(|_| random_cloud(&mut r, 12, 3, 1.0)).collect();
    let opts = BarycenterOptions {
        k: 8,
        sinkhorn: SinkhornOptions::with_eps(0.05),
        ..Default::default()
    };
    let serial = free_support_barycenter(&ms, None, &opts).unwrap();
    let par = free_support_barycenter(
        &ms,
        None,
        &BarycenterOptions {
            parallel: true,
            ..opts
        },
    )
    .unwrap();
    assert!(serial.measure.points().max_abs_diff(par.measure.points()) <= 1e-8);
    assert_eq!(serial.objective_trace, par.objective_trace);
}

fn point_graph(
    x: &EmpiricalMeasure,
    y: &EmpiricalMeasure,
    opts: &UnrolledSinkhorn,
) -> (Graph, otdg::diffmath::NodeId, Bindings) {
    let mut g = Graph::new();
    let xp = g.param(ParamId(0));
    let yp = g.param(ParamId(1));
    let xn = CloudNode {
        points: xp,
        weights: x.weights().to_vec(),
    };
    let yn = CloudNode {
        points: yp,
        weights: y.weights().to_vec(),
    };
    let out = sinkhorn_divergence_node(&mut g, &xn, &yn, opts, None, None).unwrap();
    let b: Bindings = [
        (ParamId(0), x.points().clone()),
        (ParamId(1), y.points().clone()),
    ]
    .into_iter()
    .collect();
    (g, out, b)
}

#[test]
fn unrolled_divergence_gradients_match_finite_differences() {
    let mut r = rng(43);
    for _ in 0..3 {
        let x = random_cloud(&mut r, 8, 2, 1.0);
        let y = random_cloud(&mut r, 8, 2, 1.0);
        let (g, out, b) = point_graph(
            &x,
            &y,
            &UnrolledSinkhorn {
                eps: 0.5,
                iters: 30,
            },
        );
        let err = finite_diff_check(&g, out, &b, 1e-5).unwrap();
        assert!(err <= 1e-3, "{err}");
    }
}

#[test]
fn unrolled_divergence_agrees_with_converged_solver() {
    let mut r = rng(47);
    let x = random_cloud(&mut r, 10, 2, 1.0);
    let y = random_cloud(&mut r, 12, 2, 1.0);
    let (g, out, b) = point_graph(
        &x,
        &y,
        &UnrolledSinkhorn {
            eps: 0.5,
            iters: 200,
        },
    );
    let v = g.evaluate(&b, out).unwrap().item().unwrap();
    let reference = sinkhorn_divergence(
        &x,
        &y,
        &SinkhornOptions {
            tol: 1e-12,
            max_iter: 10_000,
            ..SinkhornOptions::with_eps(0.5)
        },
    )
    .unwrap();
    assert!((v - reference).abs() < 1e-8, "{v} vs {reference}");
}

#[test]
fn barycenter_loss_properties() {
    let opts = UnrolledSinkhorn {
        eps: 0.5,
        iters: 50,
    };
    // All domains equal to the barycenter: loss vanishes.
    let mut r = rng(53);
    let bary = random_cloud(&mut r, 6, 2, 1.0);
    let mut g = Graph::new();
    let z0 = g.param(ParamId(0));
    let z1 = g.param(ParamId(1));
    let doms = [CloudNode::uniform(z0, 6), CloudNode::uniform(z1, 6)];
    let loss = barycenter_loss(&mut g, &doms, &bary, &opts).unwrap();
    let b: Bindings = [
        (ParamId(0), bary.points().clone()),
        (ParamId(1), bary.points().clone()),
    ]
    .into_iter()
    .collect();
    assert!(g.evaluate(&b, loss).unwrap().item().unwrap().abs() < 1e-10);

    // One-point domain against one-point barycenter: gradient along x − y.
    let bary = EmpiricalMeasure::dirac(&[1.0, 2.0]);
    let mut g = Graph::new();
    let z = g.param(ParamId(0));
    let loss = barycenter_loss(&mut g, &[CloudNode::uniform(z, 1)], &bary, &opts).unwrap();
    let b: Bindings = [(ParamId(0), Tensor::matrix(1, 2, vec![4.0, 6.0]).unwrap())]
        .into_iter()
        .collect();
    let (v, grads) = g.value_and_grad(&b, loss).unwrap();
    assert!((v - 25.0).abs() < 1e-9);
    let gz = grads[&ParamId(0)].data();
    assert!(
        (gz[0] - 6.0).abs() < 1e-9 && (gz[1] - 8.0).abs() < 1e-9,
        "{gz:?}"
    );
}

#[test]
fn barycenter_loss_finite_differences() {
    let mut r = rng(59);
    let opts = UnrolledSinkhorn {
        eps: 0.5,
        iters: 30,
    };
    let bary = random_cloud(&mut r, 8, 2, 1.0);
    let mut g = Graph::new();
    let ids = [ParamId(0), ParamId(1)];
    let doms: Vec<_> = ids
        .iter()
        .map(|id| CloudNode::uniform(g.param(*id), 8))
        .collect();
    let loss = barycenter_loss(&mut g, &doms, &bary, &opts).unwrap();
    let b: Bindings = ids
        .iter()
        .map(|id| (*id, random_cloud(&mut r, 8, 2, 1.0).points().clone()))
        .collect();
    assert!(finite_diff_check(&g, loss, &b, 1e-5).unwrap() <= 1e-3);
}
