#![allow(dead_code)]

use otdg::diffmath::Tensor;
use otdg::measures::EmpiricalMeasure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> EmpiricalMeasure {
    let data = (0..n * d).map(|_| rng.gen_range(-spread..spread)).collect();
    EmpiricalMeasure::uniform(Tensor::matrix(n, d, data).unwrap()).unwrap()
}

/// All permutations of 0..n (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    let mut out = vec![a.clone()];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Brute-force W2² between equal-size uniform clouds under a per-pair cost.
pub fn brute_force_ot(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    cost: impl Fn(&[f64], &[f64]) -> f64,
) -> f64 {
    let n = a.len();
    permutations(n)
        .iter()
        .map(|p| (0..n).map(|i| cost(a.point(i), b.point(p[i]))).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

pub fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
}

pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    sq_dist(x, y).sqrt()
}
