//! Exact transportation solver: successive shortest paths with node
//! potentials on the dense bipartite residual graph.
//!
//! Sources `0..n` and sinks `0..m` are scanned in index order, sources
//! first, and ties keep the earliest node, so the returned plan is
//! deterministic.

use crate::error::{Error, Result};
use crate::numeric::DenseMatrix;

/// Flow matrix with its marginals and objective `Σ flow·cost`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub flows: DenseMatrix,
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    pub objective: f64,
}

impl TransportPlan {
    /// Largest absolute deviation of a row or column sum from its marginal.
    pub fn marginal_residual(&self) -> f64 {
        let f = &self.flows;
        let rows = (0..f.rows()).map(|i| (f.row(i).iter().sum::<f64>() - self.supply[i]).abs());
        let cols = (0..f.cols())
            .map(|j| ((0..f.rows()).map(|i| f[(i, j)]).sum::<f64>() - self.demand[j]).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

pub(crate) fn check_marginals(n: usize, m: usize, supply: &[f64], demand: &[f64]) -> Result<f64> {
    if supply.len() != n || demand.len() != m {
        return Err(Error::shape(
            "solve_transport",
            format!(
                "{n}x{m} cost with {} supplies and {} demands",
                supply.len(),
                demand.len()
            ),
        ));
    }
    if supply
        .iter()
        .chain(demand)
        .any(|v| !v.is_finite() || *v < 0.0)
    {
        return Err(Error::Infeasible(
            "marginals must be finite and nonnegative".into(),
        ));
    }
    let (ts, td): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
    if (ts - td).abs() > 1e-10 * ts.max(1.0) {
        return Err(Error::Infeasible(format!("supply {ts} != demand {td}")));
    }
    Ok(ts)
}

pub fn solve_exact(cost: &DenseMatrix, supply: &[f64], demand: &[f64]) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    let total = check_marginals(n, m, supply, demand)?;
    if !cost.is_finite() {
        return Err(Error::Infeasible("non-finite cost".into()));
    }
    let tol = 1e-14 * total.max(1.0);

    let mut rem_s = supply.to_vec();
    let mut rem_d = demand.to_vec();
    let mut flows = DenseMatrix::zeros(n, m);
    // Reduced cost of arc u→v is c + pot[u] − pot[v]; nodes are sources then sinks.
    let mut pot = vec![0.0; n + m];
    for j in 0..m {
        pot[n + j] = (0..n).map(|i| cost[(i, j)]).fold(f64::INFINITY, f64::min);
    }

    let nodes = n + m;
    let mut dist = vec![f64::INFINITY; nodes];
    let mut prev = vec![usize::MAX; nodes];
    let mut done = vec![false; nodes];

    loop {
        if rem_s.iter().all(|v| *v <= tol) || rem_d.iter().all(|v| *v <= tol) {
            break;
        }
        dist.fill(f64::INFINITY);
        prev.fill(usize::MAX);
        done.fill(false);
        for i in 0..n {
            if rem_s[i] > tol {
                dist[i] = 0.0;
            }
        }

        let mut target = None;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nodes {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= n && rem_d[u - n] > tol {
                target = Some(u);
                break;
            }
            if u < n {
                for j in 0..m {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (cost[(u, j)] + pot[u] - pot[v]).max(0.0);
                    if dist[u] + rc < dist[v] {
                        dist[v] = dist[u] + rc;
                        prev[v] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if done[i] || flows[(i, j)] <= 0.0 {
                        continue;
                    }
                    let rc = (-cost[(i, j)] + pot[u] - pot[i]).max(0.0);
                    if dist[u] + rc < dist[i] {
                        dist[i] = dist[u] + rc;
                        prev[i] = u;
                    }
                }
            }
        }

        let Some(t) = target else {
            return Err(Error::Infeasible("no augmenting path".into()));
        };
        let dt = dist[t];
        for v in 0..nodes {
            pot[v] += dist[v].min(dt);
        }

        // Bottleneck along the path back to a source with spare supply.
        let mut delta = rem_d[t - n];
        let mut v = t;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= n {
                // backward arc sink u → source v
                delta = delta.min(flows[(v, u - n)]);
            }
            v = u;
        }
        let start = v;
        delta = delta.min(rem_s[start]);

        let mut v = t;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < n {
                flows[(u, v - n)] += delta;
            } else {
                let f = &mut flows[(v, u - n)];
                *f -= delta;
                if *f <= tol {
                    *f = 0.0;
                }
            }
            v = u;
        }
        rem_s[start] -= delta;
        rem_d[t - n] -= delta;
    }

    let objective = flows
        .data()
        .iter()
        .zip(cost.data())
        .map(|(f, c)| f * c)
        .sum();
    Ok(TransportPlan {
        flows,
        supply: supply.to_vec(),
        demand: demand.to_vec(),
        objective,
    })
}
