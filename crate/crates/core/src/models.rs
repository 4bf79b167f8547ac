//! Discrete-time vehicle models: a 9-state follower quadrotor and a 6-state
//! 3-DoF leader surface vehicle, both discretized with RK4, with analytic
//! Jacobians propagated through the integrator stages.
//!
//! State layouts (first three entries are always position, in meters):
//!   follower: [px, py, pz, vx, vy, vz, roll, pitch, yaw]
//!   leader:   [px, py, pz, yaw, surge, yaw_rate]   (pz identically 0)
//!
//! Follower input: [thrust deviation from hover (N), roll/pitch/yaw rates].
//! Leader input: [surge acceleration, yaw acceleration].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FOLLOWER_DIM: usize = 9;
pub const FOLLOWER_INPUT_DIM: usize = 4;
pub const LEADER_DIM: usize = 6;
pub const LEADER_INPUT_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("integration produced non-finite state component at index {0}")]
    IntegrationFailure(usize),
}

/// Componentwise lower/upper bounds. Entries may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        self.max_violation(v) <= tol
    }

    pub fn max_violation(&self, v: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..v.len() {
            worst = worst.max(self.lower[i] - v[i]).max(v[i] - self.upper[i]);
        }
        worst
    }
}

/// Continuous-time dynamics with analytic Jacobians.
pub trait ContinuousDynamics {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// (df/dx, df/du) at (x, u).
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
}

/// One control-interval discrete map `x+ = F(x, u)`.
pub trait DiscreteModel {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// Jacobians (A, B) of the one-step map.
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);

    /// Next state together with (A, B); override when one pass can produce
    /// both cheaper than step + linearize.
    fn step_with_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let next = self.step(x, u);
        let (a, b) = self.linearize(x, u);
        (next, a, b)
    }

    fn step_checked(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let next = self.step(x, u);
        for (i, v) in next.iter().enumerate() {
            if !v.is_finite() {
                return Err(ModelError::IntegrationFailure(i));
            }
        }
        Ok(next)
    }
}

/// RK4 discretization of continuous dynamics over `dt`, split into
/// `substeps` internal stages. Jacobians are propagated through the
/// variational equations of every stage, so `linearize` is exact for the
/// discrete map (up to rounding).
pub struct Rk4<M: ContinuousDynamics> {
    pub dynamics: M,
    pub dt: f64,
    pub substeps: usize,
}

impl<M: ContinuousDynamics> Rk4<M> {
    pub fn new(dynamics: M, dt: f64, substeps: usize) -> Self {
        assert!(dt > 0.0 && substeps >= 1);
        Self { dynamics, dt, substeps }
    }

    fn substep(&self, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64> {
        let k1 = self.dynamics.derivative(x, u);
        let k2 = self.dynamics.derivative(&(x + &k1 * (h / 2.0)), u);
        let k3 = self.dynamics.derivative(&(x + &k2 * (h / 2.0)), u);
        let k4 = self.dynamics.derivative(&(x + &k3 * h), u);
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    fn substep_with_sensitivity(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        h: f64,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.dynamics.state_dim();
        let eye = DMatrix::<f64>::identity(n, n);

        let k1 = self.dynamics.derivative(x, u);
        let (fx1, fu1) = self.dynamics.jacobians(x, u);
        let dk1x = fx1;
        let dk1u = fu1;

        let x2 = x + &k1 * (h / 2.0);
        let k2 = self.dynamics.derivative(&x2, u);
        let (fx2, fu2) = self.dynamics.jacobians(&x2, u);
        let dk2x = &fx2 * (&eye + &dk1x * (h / 2.0));
        let dk2u = &fx2 * (&dk1u * (h / 2.0)) + fu2;

        let x3 = x + &k2 * (h / 2.0);
        let k3 = self.dynamics.derivative(&x3, u);
        let (fx3, fu3) = self.dynamics.jacobians(&x3, u);
        let dk3x = &fx3 * (&eye + &dk2x * (h / 2.0));
        let dk3u = &fx3 * (&dk2u * (h / 2.0)) + fu3;

        let x4 = x + &k3 * h;
        let k4 = self.dynamics.derivative(&x4, u);
        let (fx4, fu4) = self.dynamics.jacobians(&x4, u);
        let dk4x = &fx4 * (&eye + &dk3x * h);
        let dk4u = &fx4 * (&dk3u * h) + fu4;

        let x_next = x + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        let a = eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (h / 6.0);
        let b = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (h / 6.0);
        (x_next, a, b)
    }
}

impl<M: ContinuousDynamics> DiscreteModel for Rk4<M> {
    fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let h = self.dt / self.substeps as f64;
        let mut cur = x.clone();
        for _ in 0..self.substeps {
            cur = self.substep(&cur, u, h);
        }
        cur
    }

    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (_, a, b) = self.step_with_jacobian(x, u);
        (a, b)
    }

    fn step_with_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let m = self.input_dim();
        let h = self.dt / self.substeps as f64;
        let mut cur = x.clone();
        let mut a_total = DMatrix::<f64>::identity(n, n);
        let mut b_total = DMatrix::<f64>::zeros(n, m);
        for _ in 0..self.substeps {
            let (next, a_sub, b_sub) = self.substep_with_sensitivity(&cur, u, h);
            a_total = &a_sub * a_total;
            b_total = &a_sub * b_total + b_sub;
            cur = next;
        }
        (cur, a_total, b_total)
    }
}

/// Physical and numerical parameters shared by both vehicle models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    /// Control interval in seconds.
    pub dt: f64,
    /// Internal RK4 substeps per control interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub mass: f64,
    pub gravity: f64,
    /// Linear velocity drag on the follower.
    pub follower_drag: f64,
    /// First-order damping on leader surge / yaw rate.
    pub leader_surge_damping: f64,
    pub leader_yaw_damping: f64,
    pub follower_state_bounds: Bounds,
    pub follower_input_bounds: Bounds,
    pub leader_state_bounds: Bounds,
    pub leader_input_bounds: Bounds,
    /// Half-width of the per-component disturbance box (zeros disable it).
    pub follower_disturbance: Vec<f64>,
    pub leader_disturbance: Vec<f64>,
}

fn default_substeps() -> usize {
    4
}

impl Default for ModelParams {
    fn default() -> Self {
        let mass = 1.5;
        let gravity = 9.81;
        let hover = mass * gravity;
        let inf = f64::INFINITY;
        Self {
            dt: 0.2,
            substeps: 4,
            mass,
            gravity,
            follower_drag: 0.1,
            leader_surge_damping: 0.1,
            leader_yaw_damping: 0.1,
            follower_state_bounds: Bounds {
                lower: vec![-inf, -inf, 0.0, -5.0, -5.0, -5.0, -0.5, -0.5, -inf],
                upper: vec![inf, inf, inf, 5.0, 5.0, 5.0, 0.5, 0.5, inf],
            },
            follower_input_bounds: Bounds {
                lower: vec![-0.5 * hover, -2.0, -2.0, -2.0],
                upper: vec![0.5 * hover, 2.0, 2.0, 2.0],
            },
            leader_state_bounds: Bounds {
                lower: vec![-inf, -inf, 0.0, -inf, -3.0, -0.5],
                upper: vec![inf, inf, 0.0, inf, 3.0, 0.5],
            },
            leader_input_bounds: Bounds {
                lower: vec![-1.0, -0.5],
                upper: vec![1.0, 0.5],
            },
            follower_disturbance: vec![0.0; FOLLOWER_DIM],
            leader_disturbance: vec![0.0; LEADER_DIM],
        }
    }
}

impl ModelParams {
    pub fn follower_model(&self) -> Rk4<FollowerDynamics> {
        Rk4::new(
            FollowerDynamics {
                mass: self.mass,
                gravity: self.gravity,
                drag: self.follower_drag,
            },
            self.dt,
            self.substeps,
        )
    }

    pub fn leader_model(&self) -> Rk4<LeaderDynamics> {
        Rk4::new(
            LeaderDynamics {
                surge_damping: self.leader_surge_damping,
                yaw_damping: self.leader_yaw_damping,
            },
            self.dt,
            self.substeps,
        )
    }
}

/// Quadrotor translational/attitude-kinematic model.
///
///   p_dot = v
///   v_dot = (g + dT/m) * R(eta) e3 - g e3 - drag * v
///   eta_dot = omega
///
/// Zero input at level attitude and zero velocity is an equilibrium.
pub struct FollowerDynamics {
    pub mass: f64,
    pub gravity: f64,
    pub drag: f64,
}

/// Body-z axis of the ZYX Euler rotation and its partials w.r.t. (roll, pitch, yaw).
fn thrust_axis(roll: f64, pitch: f64, yaw: f64) -> ([f64; 3], [[f64; 3]; 3]) {
    let (sp, cp) = roll.sin_cos();
    let (st, ct) = pitch.sin_cos();
    let (ss, cs) = yaw.sin_cos();
    let b = [cp * st * cs + sp * ss, cp * st * ss - sp * cs, cp * ct];
    let db_droll = [-sp * st * cs + cp * ss, -sp * st * ss - cp * cs, -sp * ct];
    let db_dpitch = [cp * ct * cs, cp * ct * ss, -cp * st];
    let db_dyaw = [-cp * st * ss + sp * cs, cp * st * cs + sp * ss, 0.0];
    (b, [db_droll, db_dpitch, db_dyaw])
}

impl ContinuousDynamics for FollowerDynamics {
    fn state_dim(&self) -> usize {
        FOLLOWER_DIM
    }

    fn input_dim(&self) -> usize {
        FOLLOWER_INPUT_DIM
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let thrust_accel = self.gravity + u[0] / self.mass;
        let (b, _) = thrust_axis(x[6], x[7], x[8]);
        let mut dx = DVector::zeros(FOLLOWER_DIM);
        dx[0] = x[3];
        dx[1] = x[4];
        dx[2] = x[5];
        dx[3] = thrust_accel * b[0] - self.drag * x[3];
        dx[4] = thrust_accel * b[1] - self.drag * x[4];
        dx[5] = thrust_accel * b[2] - self.gravity - self.drag * x[5];
        dx[6] = u[1];
        dx[7] = u[2];
        dx[8] = u[3];
        dx
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let thrust_accel = self.gravity + u[0] / self.mass;
        let (b, db) = thrust_axis(x[6], x[7], x[8]);
        let mut a = DMatrix::zeros(FOLLOWER_DIM, FOLLOWER_DIM);
        let mut bm = DMatrix::zeros(FOLLOWER_DIM, FOLLOWER_INPUT_DIM);
        for i in 0..3 {
            a[(i, 3 + i)] = 1.0;
            a[(3 + i, 3 + i)] = -self.drag;
            for j in 0..3 {
                a[(3 + i, 6 + j)] = thrust_accel * db[j][i];
            }
            bm[(3 + i, 0)] = b[i] / self.mass;
            a[(6 + i, 6 + i)] = 0.0;
            bm[(6 + i, 1 + i)] = 1.0;
        }
        (a, bm)
    }
}

/// Kinematic surge/yaw boat model with first-order damping; heave, roll and
/// pitch are neglected so pz stays 0.
pub struct LeaderDynamics {
    pub surge_damping: f64,
    pub yaw_damping: f64,
}

impl ContinuousDynamics for LeaderDynamics {
    fn state_dim(&self) -> usize {
        LEADER_DIM
    }

    fn input_dim(&self) -> usize {
        LEADER_INPUT_DIM
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (s, c) = x[3].sin_cos();
        let mut dx = DVector::zeros(LEADER_DIM);
        dx[0] = x[4] * c;
        dx[1] = x[4] * s;
        dx[2] = 0.0;
        dx[3] = x[5];
        dx[4] = u[0] - self.surge_damping * x[4];
        dx[5] = u[1] - self.yaw_damping * x[5];
        dx
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let _ = u;
        let (s, c) = x[3].sin_cos();
        let mut a = DMatrix::zeros(LEADER_DIM, LEADER_DIM);
        let mut b = DMatrix::zeros(LEADER_DIM, LEADER_INPUT_DIM);
        a[(0, 3)] = -x[4] * s;
        a[(0, 4)] = c;
        a[(1, 3)] = x[4] * c;
        a[(1, 4)] = s;
        a[(3, 5)] = 1.0;
        a[(4, 4)] = -self.surge_damping;
        a[(5, 5)] = -self.yaw_damping;
        b[(4, 0)] = 1.0;
        b[(5, 1)] = 1.0;
        (a, b)
    }
}

/// One follower step with additive disturbance `w` (pass zeros for nominal).
pub fn step_follower(
    model: &Rk4<FollowerDynamics>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>, ModelError> {
    let next = model.step_checked(x, u)? + w;
    Ok(next)
}

/// One leader step with additive disturbance; pz is pinned back to exactly 0.
pub fn step_leader(
    model: &Rk4<LeaderDynamics>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>, ModelError> {
    let mut next = model.step_checked(x, u)? + w;
    next[2] = 0.0;
    Ok(next)
}

/// Maps a leader state into the follower state space: H = diag(I3, 0).
/// Only the position survives; the remaining six entries are exactly zero.
pub fn map_leader_to_follower_space(x_l: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(FOLLOWER_DIM);
    z[0] = x_l[0];
    z[1] = x_l[1];
    z[2] = x_l[2];
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> ModelParams {
        ModelParams::default()
    }

    fn follower_hover_state() -> DVector<f64> {
        DVector::from_vec(vec![1.0, -2.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    }

    #[test]
    fn follower_hover_is_equilibrium() {
        let model = params().follower_model();
        let x = follower_hover_state();
        let u = DVector::zeros(FOLLOWER_INPUT_DIM);
        let next = model.step(&x, &u);
        assert!((next - &x).amax() <= 1e-12);
    }

    #[test]
    fn leader_at_rest_is_equilibrium() {
        let model = params().leader_model();
        let x = DVector::from_vec(vec![3.0, 4.0, 0.0, 0.7, 0.0, 0.0]);
        let u = DVector::zeros(LEADER_INPUT_DIM);
        let next = model.step(&x, &u);
        assert!((next - &x).amax() <= 1e-12);
    }

    #[test]
    fn follower_coasting_matches_fine_reference() {
        // v = (1,0,0), level attitude, zero input: position advances ~dt with drag decay.
        let p = params();
        let coarse = p.follower_model();
        let fine = Rk4::new(
            FollowerDynamics { mass: p.mass, gravity: p.gravity, drag: p.follower_drag },
            p.dt,
            1000,
        );
        let mut x = follower_hover_state();
        x[3] = 1.0;
        let u = DVector::zeros(FOLLOWER_INPUT_DIM);
        let a = coarse.step(&x, &u);
        let b = fine.step(&x, &u);
        assert_relative_eq!(a[0], b[0], max_relative = 1e-6);
        assert_relative_eq!(a[3], b[3], max_relative = 1e-6);
        assert!(a[0] - x[0] > 0.9 * p.dt && a[0] - x[0] < p.dt);
        assert!(a[3] < 1.0); // drag decays velocity
    }

    #[test]
    fn follower_yaw_rate_step() {
        let p = params();
        let model = p.follower_model();
        let fine = Rk4::new(
            FollowerDynamics { mass: p.mass, gravity: p.gravity, drag: p.follower_drag },
            p.dt,
            1000,
        );
        let x = follower_hover_state();
        let u = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.5]);
        let next = model.step(&x, &u);
        let reference = fine.step(&x, &u);
        assert_relative_eq!(next[8], x[8] + 0.5 * p.dt, epsilon = 1e-9);
        for i in 0..3 {
            assert_relative_eq!(next[i], reference[i], epsilon = 1e-9);
            assert_relative_eq!(next[i], x[i], epsilon = 1e-9); // yawing does not move the hover point
        }
    }

    #[test]
    fn leader_straight_line() {
        let mut p = params();
        p.leader_surge_damping = 0.0;
        p.leader_yaw_damping = 0.0;
        let model = p.leader_model();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let u = DVector::zeros(LEADER_INPUT_DIM);
        let next = model.step(&x, &u);
        assert_relative_eq!(next[0], p.dt, epsilon = 1e-9);
        assert_relative_eq!(next[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn leader_arc_matches_unicycle() {
        let mut p = params();
        p.leader_surge_damping = 0.0;
        p.leader_yaw_damping = 0.0;
        let model = p.leader_model();
        let (nu, r) = (1.0, 0.1);
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, nu, r]);
        let u = DVector::zeros(LEADER_INPUT_DIM);
        let next = model.step(&x, &u);
        let t = p.dt;
        assert_relative_eq!(next[0], nu / r * (r * t).sin(), epsilon = 1e-6);
        assert_relative_eq!(next[1], nu / r * (1.0 - (r * t).cos()), epsilon = 1e-6);
        assert_relative_eq!(next[3], r * t, epsilon = 1e-9);
    }

    #[test]
    fn leader_pz_stays_zero() {
        let p = params();
        let model = p.leader_model();
        let mut x = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.3, 2.0, 0.2]);
        let u = DVector::from_vec(vec![0.5, 0.1]);
        for _ in 0..50 {
            x = step_leader(&model, &x, &u, &DVector::zeros(LEADER_DIM)).unwrap();
            assert_eq!(x[2], 0.0);
        }
    }

    fn check_jacobian<M: DiscreteModel>(model: &M, x: &DVector<f64>, u: &DVector<f64>, tol: f64) {
        let (a, b) = model.linearize(x, u);
        let eps = 1e-6;
        for j in 0..model.state_dim() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eps;
            xm[j] -= eps;
            let col = (model.step(&xp, u) - model.step(&xm, u)) / (2.0 * eps);
            for i in 0..model.state_dim() {
                assert!(
                    (a[(i, j)] - col[i]).abs() <= tol,
                    "A[{i},{j}] = {} vs fd {}",
                    a[(i, j)],
                    col[i]
                );
            }
        }
        for j in 0..model.input_dim() {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += eps;
            um[j] -= eps;
            let col = (model.step(x, &up) - model.step(x, &um)) / (2.0 * eps);
            for i in 0..model.state_dim() {
                assert!((b[(i, j)] - col[i]).abs() <= tol);
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = params();
        let follower = p.follower_model();
        let leader = p.leader_model();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let x = DVector::from_fn(FOLLOWER_DIM, |i, _| {
                if i >= 6 { rng.gen_range(-0.4..0.4) } else { rng.gen_range(-3.0..3.0) }
            });
            let u = DVector::from_fn(FOLLOWER_INPUT_DIM, |i, _| {
                if i == 0 { rng.gen_range(-3.0..3.0) } else { rng.gen_range(-1.0..1.0) }
            });
            check_jacobian(&follower, &x, &u, 1e-5);

            let xl = DVector::from_fn(LEADER_DIM, |i, _| {
                if i == 2 { 0.0 } else { rng.gen_range(-2.0..2.0) }
            });
            let ul = DVector::from_fn(LEADER_INPUT_DIM, |_, _| rng.gen_range(-0.5..0.5));
            check_jacobian(&leader, &xl, &ul, 1e-5);
        }
    }

    #[test]
    fn leader_rest_jacobian_structure() {
        let p = params();
        let model = p.leader_model();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let u = DVector::zeros(LEADER_INPUT_DIM);
        let (a, _) = model.linearize(&x, &u);
        // surge column maps into px with factor ~dt
        assert_relative_eq!(a[(0, 4)], p.dt, max_relative = 0.05);
        assert!(a[(1, 4)].abs() < 1e-9);
    }

    #[test]
    fn follower_hover_tilt_coupling() {
        let p = params();
        let model = p.follower_model();
        let x = follower_hover_state();
        let u = DVector::zeros(FOLLOWER_INPUT_DIM);
        let (a, _) = model.linearize(&x, &u);
        // pitch tilts thrust into +x, roll into -y, each ~ g*dt
        assert_relative_eq!(a[(3, 7)], p.gravity * p.dt, max_relative = 0.05);
        assert_relative_eq!(a[(4, 6)], -p.gravity * p.dt, max_relative = 0.05);
    }

    #[test]
    fn leader_map_kills_non_position_states() {
        let zero = map_leader_to_follower_space(&DVector::zeros(LEADER_DIM));
        assert_eq!(zero, DVector::zeros(FOLLOWER_DIM));

        let x = DVector::from_vec(vec![1.0, 2.0, 0.0, 0.3, 1.0, 0.1]);
        let z = map_leader_to_follower_space(&x);
        assert_eq!(z.as_slice()[..3], [1.0, 2.0, 0.0]);
        assert!(z.as_slice()[3..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rk4_order_check() {
        // Halving the substep shrinks the error ~16x (4th order).
        let p = params();
        let x = DVector::from_vec(vec![0.0, 0.0, 5.0, 2.0, -1.0, 0.5, 0.1, -0.2, 0.3]);
        let u = DVector::from_vec(vec![1.0, 0.3, -0.2, 0.4]);
        let make = |sub: usize| {
            Rk4::new(
                FollowerDynamics { mass: p.mass, gravity: p.gravity, drag: p.follower_drag },
                p.dt,
                sub,
            )
        };
        let reference = make(512).step(&x, &u);
        let e1 = (make(1).step(&x, &u) - &reference).amax();
        let e2 = (make(2).step(&x, &u) - &reference).amax();
        assert!(e1 / e2 > 10.0, "ratio {} not 4th order", e1 / e2);
    }

    #[test]
    fn non_finite_state_is_an_error() {
        let p = params();
        let model = p.follower_model();
        let mut x = follower_hover_state();
        x[3] = f64::NAN;
        let u = DVector::zeros(FOLLOWER_INPUT_DIM);
        assert!(step_follower(&model, &x, &u, &DVector::zeros(FOLLOWER_DIM)).is_err());
    }
}
