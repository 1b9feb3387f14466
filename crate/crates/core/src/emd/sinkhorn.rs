//! Entropic transport in the log domain.

use super::transport::{check_marginals, TransportPlan};
use crate::error::{Error, Result};
use crate::numeric::kernels::log_sum_exp;
use crate::numeric::DenseMatrix;

/// Alternating dual updates until the row marginals match within `1e-10`
/// or `max_iters` is reached. Zero-mass rows and columns get zero flow.
pub fn solve_sinkhorn(
    cost: &DenseMatrix,
    supply: &[f64],
    demand: &[f64],
    eps: f64,
    max_iters: usize,
) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    check_marginals(n, m, supply, demand)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "sinkhorn epsilon {eps} must be positive"
        )));
    }
    let log_a: Vec<f64> = supply.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = demand.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let plan_entry = |f: &[f64], g: &[f64], i: usize, j: usize| -> f64 {
        if supply[i] == 0.0 || demand[j] == 0.0 {
            0.0
        } else {
            ((f[i] + g[j] - cost[(i, j)]) / eps).exp()
        }
    };

    for _ in 0..max_iters {
        for i in 0..n {
            if supply[i] > 0.0 {
                let lse = log_sum_exp(
                    (0..m)
                        .filter(|&j| demand[j] > 0.0)
                        .map(|j| (g[j] - cost[(i, j)]) / eps),
                );
                f[i] = eps * (log_a[i] - lse);
            }
        }
        for j in 0..m {
            if demand[j] > 0.0 {
                let lse = log_sum_exp(
                    (0..n)
                        .filter(|&i| supply[i] > 0.0)
                        .map(|i| (f[i] - cost[(i, j)]) / eps),
                );
                g[j] = eps * (log_b[j] - lse);
            }
        }
        // Columns are exact after the g update; check rows.
        let err = (0..n)
            .map(|i| ((0..m).map(|j| plan_entry(&f, &g, i, j)).sum::<f64>() - supply[i]).abs())
            .fold(0.0, f64::max);
        if err < 1e-10 {
            break;
        }
    }

    let flows = DenseMatrix::from_fn(n, m, |i, j| plan_entry(&f, &g, i, j));
    let objective = flows
        .data()
        .iter()
        .zip(cost.data())
        .map(|(p, c)| p * c)
        .sum();
    Ok(TransportPlan {
        flows,
        supply: supply.to_vec(),
        demand: demand.to_vec(),
        objective,
    })
}
