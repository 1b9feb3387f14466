//! Earth Mover's Distance between patch sets: cosine cost, an exact
//! transportation solver, and the aggregated-similarity local metric.

pub mod oracle;
pub mod selftest;
pub mod sinkhorn;
pub mod transport;

use crate::error::{Error, Result};
use crate::metric::{MetricKind, MetricMatrix};
use crate::numeric::matrix::dot;
use crate::numeric::DenseMatrix;
use crate::par::{try_map_range, Execution};
use crate::patch_former::PatchTokens;

pub use sinkhorn::solve_sinkhorn;
pub use transport::TransportPlan;

/// `cost = 1 − similarity`, both `n × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub cost: DenseMatrix,
    pub similarity: DenseMatrix,
}

impl CostMatrix {
    pub fn from_similarity(similarity: DenseMatrix) -> Self {
        Self {
            cost: similarity.map(|s| 1.0 - s),
            similarity,
        }
    }

    /// Wraps an arbitrary cost (used by the oracle suite).
    pub fn from_cost(cost: DenseMatrix) -> Self {
        Self {
            similarity: cost.map(|c| 1.0 - c),
            cost,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Solver {
    Exact,
    Sinkhorn { eps: f64, max_iters: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalMetricConfig {
    pub solver: Solver,
}

impl Default for LocalMetricConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Exact,
        }
    }
}

/// Cosine similarity of every row pair; zero-norm rows give 0.
pub fn cosine_similarity(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("token widths {} and {}", a.cols(), b.cols()),
        ));
    }
    let norms = |m: &DenseMatrix| -> Vec<f64> {
        (0..m.rows())
            .map(|r| dot(m.row(r), m.row(r)).sqrt())
            .collect()
    };
    let (na, nb) = (norms(a), norms(b));
    Ok(DenseMatrix::from_fn(a.rows(), b.rows(), |i, j| {
        if na[i] == 0.0 || nb[j] == 0.0 {
            0.0
        } else {
            (dot(a.row(i), b.row(j)) / (na[i] * nb[j])).clamp(-1.0, 1.0)
        }
    }))
}

pub fn cost_from_patches(a: &PatchTokens, b: &PatchTokens) -> Result<CostMatrix> {
    Ok(CostMatrix::from_similarity(cosine_similarity(
        &a.tokens, &b.tokens,
    )?))
}

/// Exact optimal plan for `cost.cost` under the given marginals.
pub fn solve_transport(cost: &CostMatrix, supply: &[f64], demand: &[f64]) -> Result<TransportPlan> {
    transport::solve_exact(&cost.cost, supply, demand)
}

pub fn solve_with(
    cost: &CostMatrix,
    supply: &[f64],
    demand: &[f64],
    solver: Solver,
) -> Result<TransportPlan> {
    match solver {
        Solver::Exact => transport::solve_exact(&cost.cost, supply, demand),
        Solver::Sinkhorn { eps, max_iters } => {
            sinkhorn::solve_sinkhorn(&cost.cost, supply, demand, eps, max_iters)
        }
    }
}

/// Plan for a similarity block with uniform patch weights.
pub fn uniform_plan(similarity: &DenseMatrix, cfg: &LocalMetricConfig) -> Result<TransportPlan> {
    let (n, m) = similarity.shape();
    if n == 0 || m == 0 {
        return Err(Error::shape("uniform_plan", "empty patch set"));
    }
    let cost = CostMatrix::from_similarity(similarity.clone());
    solve_with(
        &cost,
        &vec![1.0 / n as f64; n],
        &vec![1.0 / m as f64; m],
        cfg.solver,
    )
}

/// `Σ flow · similarity` under the optimal uniform-weight plan.
pub fn local_metric(a: &PatchTokens, b: &PatchTokens, cfg: &LocalMetricConfig) -> Result<f64> {
    let cost = cost_from_patches(a, b)?;
    let plan = uniform_plan(&cost.similarity, cfg)?;
    Ok(plan
        .flows
        .data()
        .iter()
        .zip(cost.similarity.data())
        .map(|(f, s)| f * s)
        .sum())
}

/// `values[j][i] = local_metric(query j, support i)`; pairs run in parallel.
pub fn local_metric_matrix(
    queries: &[PatchTokens],
    supports: &[PatchTokens],
    cfg: &LocalMetricConfig,
    exec: Execution,
) -> Result<MetricMatrix> {
    let n_s = supports.len();
    let flat = try_map_range(exec, queries.len() * n_s, |k| {
        local_metric(&queries[k / n_s], &supports[k % n_s], cfg)
    })?;
    MetricMatrix::new(
        DenseMatrix::from_vec(queries.len(), n_s, flat)?,
        queries.iter().map(|q| q.sample_id).collect(),
        supports.iter().map(|s| s.sample_id).collect(),
        MetricKind::Local,
    )
}
