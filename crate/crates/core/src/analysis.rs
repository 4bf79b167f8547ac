//! Certification of runs: Lyapunov decrease of the MPC value function with
//! the horizon-dependent contraction constants, the probabilistic landing
//! gate on the predictor covariance, and collision-free verification of
//! recorded trajectories.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::constraints::{eval_h_c, eval_h_ij, CollisionParams, FunnelParams};
use crate::ekf::ConfidenceParams;

/// Ratio of extreme eigenvalues of a symmetric positive-definite weight.
pub fn lambda_ratio(q: &DMatrix<f64>) -> f64 {
    let eig = q.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    assert!(min > 0.0, "weight matrix must be positive definite");
    max / min
}

/// Contraction constants of the exponential-convergence certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    /// Empirical per-step error contraction factor.
    pub rho: f64,
    /// Upper sandwich constant gamma (>= gamma_bar >= 1).
    pub gamma: f64,
    pub gamma_bar: f64,
    pub lambda_ratio: f64,
    pub horizon: usize,
    /// Minimal admissible horizon: N_0 = gamma_bar * lambda_ratio.
    pub n0: f64,
    /// Decrease rate: alpha_N = 1 - rho * (gamma / N) * lambda_ratio.
    pub alpha_n: f64,
}

impl ConvergenceConstants {
    pub fn certifiable(&self) -> bool {
        self.alpha_n > 0.0
    }

    /// Smallest integer horizon that makes alpha_N positive at these
    /// constants.
    pub fn minimal_horizon(&self) -> usize {
        (self.rho * self.gamma * self.lambda_ratio).floor() as usize + 1
    }

    /// Worst-case decrease margin over the admissible contraction factors
    /// (rho -> 1): positive exactly when N > N_0 at gamma = gamma_bar.
    pub fn worst_case_alpha(&self) -> f64 {
        1.0 - self.gamma / (self.horizon as f64) * self.lambda_ratio
    }
}

/// gamma_bar such that gamma_bar * ||e(0)||^2_Q = V_N,max for the realized
/// initial error.
pub fn gamma_bar_from_initial(v_n_max: f64, initial_error_sq: f64) -> f64 {
    assert!(initial_error_sq > 0.0);
    (v_n_max / initial_error_sq).max(1.0)
}

pub fn compute_constants(
    q_f: &DMatrix<f64>,
    gamma_bar: f64,
    rho: f64,
    horizon: usize,
) -> ConvergenceConstants {
    assert!(rho > 0.0 && rho < 1.0, "contraction factor must lie in (0,1)");
    assert!(gamma_bar >= 1.0);
    assert!(horizon >= 1);
    let ratio = lambda_ratio(q_f);
    let gamma = gamma_bar;
    ConvergenceConstants {
        rho,
        gamma,
        gamma_bar,
        lambda_ratio: ratio,
        horizon,
        n0: gamma_bar * ratio,
        alpha_n: 1.0 - rho * gamma / (horizon as f64) * ratio,
    }
}

/// One certified step of a nominal run: value function and weighted error at
/// time t.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovSample {
    pub t: usize,
    pub v_n: f64,
    /// ||x_f(t) - z_l(t)||^2_{Q_f}
    pub error_sq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovViolation {
    pub t: usize,
    /// V_N(t+1) - V_N(t)
    pub decrease: f64,
    /// -alpha_N ||e(t)||^2_Q
    pub required: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandwichViolation {
    pub t: usize,
    pub v_n: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub constants: ConvergenceConstants,
    pub steps_checked: usize,
    pub decrease_violations: Vec<LyapunovViolation>,
    pub sandwich_violations: Vec<SandwichViolation>,
}

impl LyapunovReport {
    pub fn pass(&self) -> bool {
        self.decrease_violations.is_empty() && self.sandwich_violations.is_empty()
    }
}

/// Empirical contraction factor: the worst per-step ratio of consecutive
/// weighted errors. Errors below `floor` are excluded (ratios of numerical
/// residuals carry no information).
pub fn estimate_rho(samples: &[LyapunovSample], floor: f64) -> Option<f64> {
    let mut rho: Option<f64> = None;
    for w in samples.windows(2) {
        if w[0].error_sq > floor {
            let r = w[1].error_sq / w[0].error_sq;
            rho = Some(rho.map_or(r, |best: f64| best.max(r)));
        }
    }
    rho
}

/// Checks the per-step decrease inequality and the sandwich bounds with a
/// relative tolerance of 1e-6 * V_N(t).
pub fn check_lyapunov_decrease(
    samples: &[LyapunovSample],
    constants: &ConvergenceConstants,
) -> LyapunovReport {
    let mut decrease_violations = Vec::new();
    let mut sandwich_violations = Vec::new();
    for w in samples.windows(2) {
        let tol = 1e-6 * w[0].v_n.abs().max(1.0);
        let decrease = w[1].v_n - w[0].v_n;
        let required = -constants.alpha_n * w[0].error_sq;
        if decrease > required + tol {
            decrease_violations.push(LyapunovViolation { t: w[0].t, decrease, required });
        }
    }
    for s in samples {
        let tol = 1e-6 * s.v_n.abs().max(1.0);
        let lower = s.error_sq;
        let upper = constants.gamma * s.error_sq;
        if s.v_n < lower - tol || s.v_n > upper + tol {
            sandwich_violations.push(SandwichViolation { t: s.t, v_n: s.v_n, lower, upper });
        }
    }
    LyapunovReport {
        constants: constants.clone(),
        steps_checked: samples.len(),
        decrease_violations,
        sandwich_violations,
    }
}

/// Parameters of the probabilistic landing gate. The effective platform
/// radius already accounts for the offset of the landing point from the
/// platform center.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateParams {
    pub confidence: ConfidenceParams,
    /// Effective platform radius available to the landing point (m).
    pub platform_radius: f64,
    pub safe_radius: f64,
    /// Consecutive failing steps before an abort is recommended.
    pub abort_dwell: usize,
}

impl GateParams {
    /// Largest admissible covariance eigenvalue:
    /// lambda_max < (r - r_safe)^2 / s.
    pub fn lambda_threshold(&self) -> f64 {
        let margin = self.platform_radius - self.safe_radius;
        margin * margin / self.confidence.s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyGateStep {
    pub t: usize,
    pub lambda_max: f64,
    pub pass: bool,
    /// r - (r_safe + sqrt(s * lambda_max)); positive when passing.
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateReport {
    pub steps: Vec<SafetyGateStep>,
    pub abort_at: Option<usize>,
    pub max_lambda: f64,
}

impl GateReport {
    pub fn pass(&self) -> bool {
        self.abort_at.is_none() && self.steps.iter().all(|s| s.pass)
    }
}

/// Evaluates the gate along a trace of covariance eigenvalue maxima. A step
/// passes iff r_safe + sqrt(s * lambda_max) < r strictly.
pub fn check_safety_gate(lambda_trace: &[(usize, f64)], params: &GateParams) -> GateReport {
    let mut steps = Vec::with_capacity(lambda_trace.len());
    let mut consecutive_fail = 0usize;
    let mut abort_at = None;
    let mut max_lambda: f64 = 0.0;
    for &(t, lambda_max) in lambda_trace {
        let radius = params.safe_radius + (params.confidence.s * lambda_max).sqrt();
        let pass = radius < params.platform_radius;
        let margin = params.platform_radius - radius;
        if pass {
            consecutive_fail = 0;
        } else {
            consecutive_fail += 1;
            if consecutive_fail >= params.abort_dwell && abort_at.is_none() {
                abort_at = Some(t);
            }
        }
        max_lambda = max_lambda.max(lambda_max);
        steps.push(SafetyGateStep { t, lambda_max, pass, margin });
    }
    GateReport { steps, abort_at, max_lambda }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollisionReport {
    /// Minimum funnel value over time, per follower.
    pub min_h_c: Vec<f64>,
    /// Minimum separation value over time and all follower pairs
    /// (None with fewer than two followers).
    pub min_h_ij: Option<f64>,
    pub pass: bool,
}

/// Verifies a recorded run: per-follower funnel values against the leader
/// platform trajectory, and pairwise separation among followers.
pub fn verify_collision_free(
    follower_positions: &[Vec<Vector3<f64>>],
    platform_centers: &[Vector3<f64>],
    cp: &CollisionParams,
    fp: &FunnelParams,
) -> CollisionReport {
    let steps = platform_centers.len();
    let mut min_h_c = vec![f64::INFINITY; follower_positions.len()];
    for (i, traj) in follower_positions.iter().enumerate() {
        assert_eq!(traj.len(), steps, "trajectory length mismatch for follower {i}");
        for (t, p) in traj.iter().enumerate() {
            min_h_c[i] = min_h_c[i].min(eval_h_c(p, &platform_centers[t], fp));
        }
    }
    let mut min_h_ij: Option<f64> = None;
    for i in 0..follower_positions.len() {
        for j in (i + 1)..follower_positions.len() {
            for t in 0..steps {
                let h = eval_h_ij(&follower_positions[i][t], &follower_positions[j][t], cp);
                min_h_ij = Some(min_h_ij.map_or(h, |m: f64| m.min(h)));
            }
        }
    }
    let tol = -1e-6;
    let pass = min_h_c.iter().all(|&h| h >= tol) && min_h_ij.map_or(true, |h| h >= tol);
    CollisionReport { min_h_c, min_h_ij, pass }
}
