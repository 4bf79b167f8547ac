//! Extended Kalman filtering on position measurements, with N-step open-loop
//! trajectory prediction, confidence-ellipsoid radii, shift-and-predict
//! reference reconstruction, and the conservative worst-case-radius fallback.

use nalgebra::{DMatrix, DVector, Matrix2, Vector3};
use serde::{Deserialize, Serialize};

use crate::models::{Bounds, DiscreteModel};

/// Filter estimate: state, covariance, discrete time of the estimate.
#[derive(Debug, Clone)]
pub struct EkfState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t: u64,
}

impl EkfState {
    pub fn new(x: DVector<f64>, p: DMatrix<f64>, t: u64) -> Self {
        Self { x, p, t }
    }

    /// Exact-knowledge initialization (zero covariance).
    pub fn exact(x: DVector<f64>, t: u64) -> Self {
        let n = x.len();
        Self { x, p: DMatrix::zeros(n, n), t }
    }
}

/// Process/measurement noise configuration. `process_diag` is the per-step
/// process covariance diagonal; `measurement_std` is the position
/// measurement standard deviation in meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub process_diag: Vec<f64>,
    pub measurement_std: f64,
}

impl NoiseConfig {
    pub fn default_follower() -> Self {
        Self {
            process_diag: vec![1e-4, 1e-4, 1e-4, 1e-2, 1e-2, 1e-2, 1e-3, 1e-3, 1e-3],
            measurement_std: 0.05,
        }
    }

    pub fn default_leader() -> Self {
        Self {
            process_diag: vec![1e-4, 1e-4, 1e-12, 1e-3, 1e-2, 1e-3],
            measurement_std: 0.05,
        }
    }

    pub fn process_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.process_diag.clone()))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EkfDiagnostics {
    /// Set when the innovation covariance needed regularization.
    pub regularized: bool,
    pub innovation_norm: f64,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let mt = m.transpose();
    *m += mt;
    *m *= 0.5;
}

/// One filter cycle: open-loop prediction with zero assumed input from t to
/// t+1, then correction with a position measurement taken at t+1.
pub fn ekf_update(
    state: &EkfState,
    model: &dyn DiscreteModel,
    measurement: &Vector3<f64>,
    noise: &NoiseConfig,
) -> (EkfState, EkfDiagnostics) {
    let n = model.state_dim();
    let u = DVector::zeros(model.input_dim());

    // predict
    let (a, _) = model.linearize(&state.x, &u);
    let x_prior = model.step(&state.x, &u);
    let mut p_prior = &a * &state.p * a.transpose() + noise.process_matrix();
    symmetrize(&mut p_prior);

    // correct; H selects the first three (position) components
    let r = noise.measurement_std * noise.measurement_std;
    let mut s = p_prior.view((0, 0), (3, 3)).into_owned();
    for i in 0..3 {
        s[(i, i)] += r;
    }
    let mut diag = EkfDiagnostics::default();
    let s_inv = match s.clone().try_inverse() {
        Some(inv) if s.clone().cholesky().is_some() => inv,
        _ => {
            diag.regularized = true;
            for i in 0..3 {
                s[(i, i)] += 1e-9;
            }
            s.try_inverse().expect("regularized innovation covariance invertible")
        }
    };

    // K = P H^T S^-1 is the first three columns of P times S^-1
    let pht = p_prior.view((0, 0), (n, 3)).into_owned();
    let gain = &pht * s_inv;
    let innovation = DVector::from_vec(vec![
        measurement.x - x_prior[0],
        measurement.y - x_prior[1],
        measurement.z - x_prior[2],
    ]);
    diag.innovation_norm = innovation.norm();
    let x_post = &x_prior + &gain * &innovation;

    // Joseph form keeps P PSD
    let mut i_kh = DMatrix::<f64>::identity(n, n);
    for row in 0..n {
        for col in 0..3 {
            i_kh[(row, col)] -= gain[(row, col)];
        }
    }
    let mut p_post = &i_kh * p_prior * i_kh.transpose() + &gain * (r * gain.transpose());
    symmetrize(&mut p_post);

    (EkfState { x: x_post, p: p_post, t: state.t + 1 }, diag)
}

/// N-step open-loop prediction: states and covariances for l = 0..=N, where
/// l = 0 is the current estimate. Prediction only adds uncertainty.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub states: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl PredictionResult {
    pub fn position(&self, l: usize) -> Vector3<f64> {
        let x = &self.states[l];
        Vector3::new(x[0], x[1], x[2])
    }
}

pub fn predict_horizon(
    state: &EkfState,
    model: &dyn DiscreteModel,
    noise: &NoiseConfig,
    n_steps: usize,
) -> PredictionResult {
    assert!(n_steps >= 1);
    let u = DVector::zeros(model.input_dim());
    let q = noise.process_matrix();
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut covariances = Vec::with_capacity(n_steps + 1);
    let mut x = state.x.clone();
    let mut p = state.p.clone();
    states.push(x.clone());
    covariances.push(p.clone());
    for _ in 0..n_steps {
        let (a, _) = model.linearize(&x, &u);
        x = model.step(&x, &u);
        p = &a * &p * a.transpose() + &q;
        symmetrize(&mut p);
        states.push(x.clone());
        covariances.push(p.clone());
    }
    PredictionResult { states, covariances }
}

/// Confidence level and the derived ellipsoid scale s = -2 ln(1 - p).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConfidenceParams {
    pub p: f64,
    pub s: f64,
}

impl ConfidenceParams {
    pub fn new(p: f64) -> Self {
        assert!(p > 0.0 && p < 1.0);
        Self { p, s: -2.0 * (1.0 - p).ln() }
    }
}

/// Horizontal (xy) position block of a full-state covariance.
pub fn horizontal_block(p: &DMatrix<f64>) -> Matrix2<f64> {
    Matrix2::new(p[(0, 0)], p[(0, 1)], p[(1, 0)], p[(1, 1)])
}

/// Largest eigenvalue of a symmetric PSD matrix.
pub fn lambda_max(p: &DMatrix<f64>) -> f64 {
    p.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Worst-case deviation at confidence p: sqrt(s * lambda_max(P)). Pass the
/// relevant position block of the covariance.
pub fn confidence_radius(p: &DMatrix<f64>, cp: &ConfidenceParams) -> f64 {
    (cp.s * lambda_max(p).max(0.0)).sqrt()
}

/// Reference reconstruction under staleness k = t - t_a:
/// entries l < N-k come from the shifted shared trajectory, the tail from the
/// live EKF prediction. k = 0 is the identity; k >= N-1 is pure predictor.
pub struct ReconstructedReference {
    pub positions: Vec<Vector3<f64>>,
    /// Number of entries sourced from the EKF prediction.
    pub predictor_entries: usize,
    pub pure_predictor: bool,
}

pub fn shift_and_predict(
    last_shared: Option<&[Vector3<f64>]>,
    staleness: usize,
    n_steps: usize,
    prediction: &PredictionResult,
) -> ReconstructedReference {
    let n = n_steps;
    assert_eq!(prediction.states.len(), n + 1);
    let shared = match last_shared {
        Some(s) => {
            assert_eq!(s.len(), n + 1);
            s
        }
        None => {
            return ReconstructedReference {
                positions: (0..=n).map(|l| prediction.position(l)).collect(),
                predictor_entries: n + 1,
                pure_predictor: true,
            };
        }
    };
    let k = staleness;
    if k == 0 {
        return ReconstructedReference {
            positions: shared.to_vec(),
            predictor_entries: 0,
            pure_predictor: false,
        };
    }
    if k >= n.saturating_sub(1) {
        return ReconstructedReference {
            positions: (0..=n).map(|l| prediction.position(l)).collect(),
            predictor_entries: n + 1,
            pure_predictor: true,
        };
    }
    let split = n - k;
    let mut positions = Vec::with_capacity(n + 1);
    for l in 0..split {
        positions.push(shared[l + k]);
    }
    for l in split..=n {
        positions.push(prediction.position(l));
    }
    ReconstructedReference { positions, predictor_entries: n + 1 - split, pure_predictor: false }
}

/// Maximal one-step position displacement over the state/input boxes
/// (Eq.-14-style fallback radius), over-approximated by corner enumeration
/// plus coordinate refinement and a finite-difference Lipschitz slack.
pub fn worst_case_radius(model: &dyn DiscreteModel, x_box: &Bounds, u_box: &Bounds) -> f64 {
    let n = model.state_dim();
    let m = model.input_dim();
    // Position coordinates do not change the displacement for translation-
    // invariant models; clamp infinite bounds to 0 so corners are finite.
    let finite = |lo: f64, hi: f64| -> (f64, f64) {
        let lo = if lo.is_finite() { lo } else { 0.0 };
        let hi = if hi.is_finite() { hi } else { 0.0 };
        (lo, hi)
    };
    let displacement = |x: &DVector<f64>, u: &DVector<f64>| -> f64 {
        let next = model.step(x, u);
        ((next[0] - x[0]).powi(2) + (next[1] - x[1]).powi(2) + (next[2] - x[2]).powi(2)).sqrt()
    };

    let dims = n + m;
    let mut lo = vec![0.0; dims];
    let mut hi = vec![0.0; dims];
    for i in 0..n {
        let (l, h) = finite(x_box.lower[i], x_box.upper[i]);
        lo[i] = l;
        hi[i] = h;
    }
    for j in 0..m {
        let (l, h) = finite(u_box.lower[j], u_box.upper[j]);
        lo[n + j] = l;
        hi[n + j] = h;
    }

    let eval = |z: &[f64]| -> f64 {
        let x = DVector::from_row_slice(&z[..n]);
        let u = DVector::from_row_slice(&z[n..]);
        displacement(&x, &u)
    };

    // corner enumeration over the varying dimensions
    let varying: Vec<usize> = (0..dims).filter(|&i| hi[i] > lo[i]).collect();
    let mut best = vec![0.0; dims];
    for i in 0..dims {
        best[i] = 0.5 * (lo[i] + hi[i]);
    }
    let mut best_val = eval(&best);
    if varying.len() <= 16 {
        for mask in 0u32..(1u32 << varying.len()) {
            let mut z = best.clone();
            for (bit, &d) in varying.iter().enumerate() {
                z[d] = if mask & (1 << bit) != 0 { hi[d] } else { lo[d] };
            }
            let v = eval(&z);
            if v > best_val {
                best_val = v;
                best = z;
            }
        }
    }

    // coordinate refinement
    let mut step_sizes: Vec<f64> = (0..dims).map(|i| 0.25 * (hi[i] - lo[i])).collect();
    for _ in 0..4 {
        for &d in &varying {
            for dir in [-1.0, 1.0] {
                let mut z = best.clone();
                z[d] = (z[d] + dir * step_sizes[d]).clamp(lo[d], hi[d]);
                let v = eval(&z);
                if v > best_val {
                    best_val = v;
                    best = z;
                }
            }
        }
        for s in step_sizes.iter_mut() {
            *s *= 0.5;
        }
    }

    // Lipschitz slack from a finite-difference gradient at the incumbent.
    let mut grad_norm2 = 0.0;
    let fd = 1e-5;
    for &d in &varying {
        let mut zp = best.clone();
        let mut zm = best.clone();
        zp[d] = (zp[d] + fd).min(hi[d]);
        zm[d] = (zm[d] - fd).max(lo[d]);
        let span = zp[d] - zm[d];
        if span > 0.0 {
            let g = (eval(&zp) - eval(&zm)) / span;
            grad_norm2 += g * g;
        }
    }
    let cell: f64 = step_sizes.iter().map(|s| s * s).sum::<f64>().sqrt();
    best_val + grad_norm2.sqrt() * cell
}
