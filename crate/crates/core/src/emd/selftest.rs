//! Solver-versus-oracle equivalence on random uniform-marginal instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{brute_force_assignment, hungarian};
use super::transport::solve_exact;
use crate::error::Result;
use crate::numeric::DenseMatrix;
use crate::par::{try_map_range, Execution};
use crate::seed::derive_seed;

pub const OBJECTIVE_TOLERANCE: f64 = 1e-9;
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;
/// Largest size checked by exhaustive permutation search.
pub const BRUTE_FORCE_MAX: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    BruteForce,
    Hungarian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub n: usize,
    pub oracle: OracleKind,
    pub solver_objective: f64,
    pub oracle_objective: f64,
    pub residual: f64,
}

impl CaseResult {
    pub fn objective_error(&self) -> f64 {
        (self.solver_objective - self.oracle_objective).abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelftestReport {
    pub cases: Vec<CaseResult>,
}

impl SelftestReport {
    pub fn max_objective_error(&self) -> f64 {
        self.cases
            .iter()
            .map(CaseResult::objective_error)
            .fold(0.0, f64::max)
    }

    pub fn max_residual(&self) -> f64 {
        self.cases.iter().map(|c| c.residual).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_objective_error() <= OBJECTIVE_TOLERANCE
            && self.max_residual() < RESIDUAL_TOLERANCE
    }
}

/// Runs `instances` cases with sizes cycling through `2..=8` and costs
/// drawn uniformly from `[0, 2]`.
pub fn run_selftest(instances: usize, seed: u64, exec: Execution) -> Result<SelftestReport> {
    let cases = try_map_range(exec, instances, |k| {
        let n = 2 + k % 7;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "emd-selftest", k as u64));
        let cost = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..2.0));
        let u = vec![1.0 / n as f64; n];
        let plan = solve_exact(&cost, &u, &u)?;
        let (oracle, (assignment_cost, _)) = if n <= BRUTE_FORCE_MAX {
            (OracleKind::BruteForce, brute_force_assignment(&cost))
        } else {
            (OracleKind::Hungarian, hungarian(&cost))
        };
        Ok(CaseResult {
            n,
            oracle,
            solver_objective: plan.objective,
            oracle_objective: assignment_cost / n as f64,
            residual: plan.marginal_residual(),
        })
    })?;
    Ok(SelftestReport { cases })
}
