use crate::diffmath::pairwise_sq_dist_raw;
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with row/column potentials, O(n³)). Returns `assign[row] = col` and the
/// total cost.
pub fn solve_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "square cost matrix");
    if n == 0 {
        return (vec![], 0.0);
    }
    // 1-based arrays; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    (assign, total)
}

fn check_uniform_pair(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<()> {
    if a.len() != b.len() || !a.is_uniform() || !b.is_uniform() {
        return Err(Error::invalid(
            "exact OT needs two uniform clouds of equal size; use sinkhorn_ot for general weights",
        ));
    }
    if a.dim() != b.dim() {
        return Err(Error::invalid("dimension mismatch"));
    }
    Ok(())
}

/// Exact squared Wasserstein-2 distance between equal-size uniform clouds.
pub fn exact_ot(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    check_uniform_pair(a, b)?;
    let n = a.len();
    let c = pairwise_sq_dist_raw(a.points(), b.points());
    Ok(solve_assignment(c.data(), n).1 / n as f64)
}

/// Exact Wasserstein-1 distance (Euclidean ground cost) between equal-size uniform clouds.
pub fn exact_w1(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    check_uniform_pair(a, b)?;
    let n = a.len();
    let c: Vec<f64> = pairwise_sq_dist_raw(a.points(), b.points())
        .data()
        .iter()
        .map(|x| x.sqrt())
        .collect();
    Ok(solve_assignment(&c, n).1 / n as f64)
}
