//! Assignment-problem oracles, independent of the transport solver. With
//! uniform equal marginals on an n×n cost, an optimal transport plan is a
//! permutation matrix scaled by 1/n, so the optimal objective is
//! `min_perm Σ cost[i][perm(i)] / n`.

use itertools::Itertools;

use crate::numeric::DenseMatrix;

/// Exhaustive search over all permutations. Returns `(min cost, assignment)`.
pub fn brute_force_assignment(cost: &DenseMatrix) -> (f64, Vec<usize>) {
    let n = cost.rows();
    let mut best = (f64::INFINITY, Vec::new());
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        if total < best.0 {
            best = (total, perm);
        }
    }
    best
}

/// Hungarian method with row/column potentials, O(n³).
/// Returns `(min cost, assignment row → column)`.
pub fn hungarian(cost: &DenseMatrix) -> (f64, Vec<usize>) {
    let n = cost.rows();
    assert_eq!(n, cost.cols(), "hungarian needs a square matrix");
    // 1-based arrays; column 0 is a virtual column.
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
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[(i, j)])
        .sum();
    (total, assignment)
}
