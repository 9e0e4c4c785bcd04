//! Every acceptance threshold in one block, so reports can name them.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Tolerances {
    /// Monte Carlo items pass within `se_scale / √(λ_s N)`.
    pub se_scale: f64,
    /// Monte Carlo tolerances above this are reported as inconclusive.
    pub inconclusive_above: f64,
    pub stage1_energy_tol: f64,
    pub stage1_criticality_tol: f64,
    pub stage2_criticality_tol: f64,
    /// Allowed shortfall of the rounded output below ALG.
    pub alg_gap_tol: f64,
    pub bm_covariance_tol: f64,
    pub branch_overlap_tol: f64,
    /// Leaves must be at least this multiple of √(1 - q_2) apart.
    pub branch_distance_factor: f64,
    pub phi_residual_tol: f64,
    pub decomposition_tol: f64,
    pub c_hat_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            se_scale: 5.0,
            inconclusive_above: 0.5,
            stage1_energy_tol: 0.05,
            stage1_criticality_tol: 0.05,
            stage2_criticality_tol: 0.1,
            alg_gap_tol: 0.1,
            bm_covariance_tol: 0.05,
            branch_overlap_tol: 0.05,
            branch_distance_factor: 0.5,
            phi_residual_tol: 1e-6,
            decomposition_tol: 1e-8,
            c_hat_tol: 1e-4,
        }
    }
}

impl Tolerances {
    /// The Monte Carlo tolerance for one species at size `n`.
    pub fn monte_carlo(&self, lambda_s: f64, n: usize) -> f64 {
        self.se_scale / (lambda_s * n as f64).sqrt()
    }
}
