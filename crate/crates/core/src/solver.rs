//! Finite-horizon optimal control solver for the per-agent problem:
//! quadratic tracking cost over a multiple-shooting horizon, dynamics as
//! equality constraints, state/input boxes as bounds, and the funnel and
//! inter-agent separation constraints as nonlinear inequalities.
//!
//! The method is an augmented-Lagrangian scheme: the inner bound-constrained
//! subproblem is minimized with a projected Gauss-Newton iteration, the outer
//! loop updates multipliers and the penalty until dynamics defects, constraint
//! violations and the stationarity residual meet their tolerances.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    eval_h_c, eval_h_ij, grad_h_c, grad_h_ij, hess_h_c, hess_h_ij, CollisionParams, FunnelParams,
};
use crate::models::{Bounds, DiscreteModel};

/// Which stage costs enter the objective: the controller sums k = 0..=N,
/// the value-function convention in the convergence analysis sums k = 0..N-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostConvention {
    FullHorizon,
    TruncatedHorizon,
}

impl Default for CostConvention {
    fn default() -> Self {
        CostConvention::FullHorizon
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub kkt_tol: f64,
    pub dynamics_tol: f64,
    pub constraint_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Optional quadratic input weight (the cost has none by default).
    pub input_weight: f64,
    pub regularization: f64,
    /// Allow returning constraint-violating solutions flagged as slack usage
    /// instead of hard infeasibility.
    pub soft_constraints: bool,
    pub convention: CostConvention,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            dynamics_tol: 1e-8,
            constraint_tol: 1e-8,
            max_outer: 40,
            max_inner: 80,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e6,
            input_weight: 0.0,
            regularization: 1e-8,
            soft_constraints: true,
            convention: CostConvention::FullHorizon,
        }
    }
}

/// Funnel constraint along the horizon: platform centers per step.
#[derive(Debug, Clone)]
pub struct FunnelConstraint {
    pub params: FunnelParams,
    /// Platform center per horizon step, length N+1.
    pub centers: Vec<Vector3<f64>>,
}

/// Separation constraint against one peer trajectory.
#[derive(Debug, Clone)]
pub struct PeerAvoidance {
    /// Peer positions per horizon step, length N+1.
    pub positions: Vec<Vector3<f64>>,
    /// Required distance, possibly inflated for staleness.
    pub min_distance: f64,
    pub vertical_shaping: f64,
}

/// One agent's finite-horizon problem instance.
pub struct OcpSpec<'a> {
    pub model: &'a dyn DiscreteModel,
    pub horizon: usize,
    /// Positive-definite stage weight Q.
    pub weight: DMatrix<f64>,
    /// Full-state reference, length N+1.
    pub reference: Vec<DVector<f64>>,
    pub state_bounds: Bounds,
    pub input_bounds: Bounds,
    pub funnel: Option<FunnelConstraint>,
    pub collisions: Vec<PeerAvoidance>,
    pub options: SolverOptions,
}

impl<'a> OcpSpec<'a> {
    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.model.state_dim();
        if self.reference.len() != self.horizon + 1 {
            return Err(SolverError::BadSpec(format!(
                "reference length {} != N+1 = {}",
                self.reference.len(),
                self.horizon + 1
            )));
        }
        if self.weight.nrows() != n || self.weight.ncols() != n {
            return Err(SolverError::BadSpec("weight dimension mismatch".into()));
        }
        let eig = self.weight.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(SolverError::BadSpec("stage weight must be positive definite".into()));
        }
        if let Some(f) = &self.funnel {
            if f.centers.len() != self.horizon + 1 {
                return Err(SolverError::BadSpec("funnel center trajectory length != N+1".into()));
            }
        }
        for c in &self.collisions {
            if c.positions.len() != self.horizon + 1 {
                return Err(SolverError::BadSpec("peer trajectory length != N+1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid problem specification: {0}")]
    BadSpec(String),
    #[error("problem infeasible: equality defect {defect:.3e} at maximal penalty")]
    Infeasible { defect: f64 },
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub kkt_residual: f64,
    pub dynamics_defect: f64,
    pub max_constraint_violation: f64,
    /// Largest inequality shortfall tolerated as slack (0 when hard-feasible).
    pub slack_magnitude: f64,
    pub slack_active: bool,
    pub converged: bool,
}

/// Multiplier estimates carried between solves for warm starting.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    /// Penalty the donor solve ended at; resuming there skips the ramp.
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub cost: f64,
    pub diagnostics: SolveDiagnostics,
    pub warm: WarmStart,
}

impl OcpSolution {
    /// Shifts this solution one step forward as a warm start for the next
    /// solve: states/inputs move up, the tail is extended by a zero-input
    /// rollout.
    pub fn shifted(&self, model: &dyn DiscreteModel) -> WarmStart {
        let n_steps = self.inputs.len();
        let mut states: Vec<DVector<f64>> = self.states[1..].to_vec();
        let mut inputs: Vec<DVector<f64>> = self.inputs[1..].to_vec();
        let last_u = DVector::zeros(model.input_dim());
        let last_x = model.step(states.last().unwrap(), &last_u);
        states.push(last_x);
        inputs.push(last_u);
        debug_assert_eq!(states.len(), n_steps + 1);
        WarmStart {
            states,
            inputs,
            eq_multipliers: self.warm.eq_multipliers.clone(),
            ineq_multipliers: self.warm.ineq_multipliers.clone(),
            penalty: self.warm.penalty,
        }
    }
}

/// Index bookkeeping for the stacked decision vector [x_0..x_N, u_0..u_{N-1}].
struct Layout {
    n: usize,
    m: usize,
    horizon: usize,
}

impl Layout {
    fn x(&self, k: usize) -> usize {
        k * self.n
    }
    fn u(&self, k: usize) -> usize {
        (self.horizon + 1) * self.n + k * self.m
    }
    fn len(&self) -> usize {
        (self.horizon + 1) * self.n + self.horizon * self.m
    }
}

struct IneqEntry {
    /// Start of the position block in z this constraint touches.
    z_offset: usize,
    value: f64,
    grad: Vector3<f64>,
    hess: Matrix3<f64>,
}

/// All constraint data at the current iterate.
struct Evaluation {
    /// Dynamics defects, stacked per step.
    eq: DVector<f64>,
    /// Per-step model Jacobians.
    jac_a: Vec<DMatrix<f64>>,
    jac_b: Vec<DMatrix<f64>>,
    ineq: Vec<IneqEntry>,
}

fn tracking_cost(spec: &OcpSpec<'_>, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
    let last = match spec.options.convention {
        CostConvention::FullHorizon => spec.horizon,
        CostConvention::TruncatedHorizon => spec.horizon - 1,
    };
    let mut cost = 0.0;
    for k in 0..=last {
        let e = &states[k] - &spec.reference[k];
        cost += e.dot(&(&spec.weight * &e));
    }
    if spec.options.input_weight > 0.0 {
        for u in inputs {
            cost += spec.options.input_weight * u.dot(u);
        }
    }
    cost
}

fn evaluate(spec: &OcpSpec<'_>, layout: &Layout, z: &DVector<f64>) -> Evaluation {
    let n = layout.n;
    let m = layout.m;
    let horizon = layout.horizon;
    let states: Vec<DVector<f64>> =
        (0..=horizon).map(|k| z.rows(layout.x(k), n).into_owned()).collect();
    let inputs: Vec<DVector<f64>> =
        (0..horizon).map(|k| z.rows(layout.u(k), m).into_owned()).collect();

    let mut eq = DVector::zeros(horizon * n);
    let mut jac_a = Vec::with_capacity(horizon);
    let mut jac_b = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let (pred, a, b) = spec.model.step_with_jacobian(&states[k], &inputs[k]);
        let defect = &states[k + 1] - &pred;
        eq.rows_mut(k * n, n).copy_from(&defect);
        jac_a.push(a);
        jac_b.push(b);
    }

    let mut ineq = Vec::new();
    // k = 0 is the (fixed) initial state; constraints there cannot be acted on.
    if let Some(f) = &spec.funnel {
        for k in 1..=horizon {
            let pos = Vector3::new(states[k][0], states[k][1], states[k][2]);
            ineq.push(IneqEntry {
                z_offset: layout.x(k),
                value: eval_h_c(&pos, &f.centers[k], &f.params),
                grad: grad_h_c(&pos, &f.centers[k], &f.params),
                hess: hess_h_c(&pos, &f.centers[k], &f.params),
            });
        }
    }
    for peer in &spec.collisions {
        let cp = CollisionParams {
            min_distance: peer.min_distance,
            vertical_shaping: peer.vertical_shaping,
        };
        for k in 1..=horizon {
            let pos = Vector3::new(states[k][0], states[k][1], states[k][2]);
            let mut grad = grad_h_ij(&pos, &peer.positions[k], &cp);
            if grad.norm() < 1e-12 {
                // coincident with the peer: any escape direction works
                grad = Vector3::new(1.0, 0.0, 0.0);
            }
            ineq.push(IneqEntry {
                z_offset: layout.x(k),
                value: eval_h_ij(&pos, &peer.positions[k], &cp),
                grad,
                hess: hess_h_ij(&pos, &peer.positions[k], &cp),
            });
        }
    }

    Evaluation { eq, jac_a, jac_b, ineq }
}

/// Augmented-Lagrangian value at z (cheap variant: no Jacobians), used by the
/// line search.
fn al_value(
    spec: &OcpSpec<'_>,
    layout: &Layout,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
    mu: f64,
) -> f64 {
    let n = layout.n;
    let horizon = layout.horizon;
    let states: Vec<DVector<f64>> =
        (0..=horizon).map(|k| z.rows(layout.x(k), n).into_owned()).collect();
    let inputs: Vec<DVector<f64>> =
        (0..horizon).map(|k| z.rows(layout.u(k), layout.m).into_owned()).collect();

    let mut val = tracking_cost(spec, &states, &inputs);
    for k in 0..horizon {
        let defect = &states[k + 1] - &spec.model.step(&states[k], &inputs[k]);
        for i in 0..n {
            let c = defect[i];
            val += -lambda[k * n + i] * c + 0.5 * mu * c * c;
        }
    }
    let mut j = 0usize;
    let mut add_ineq = |g: f64| {
        let shifted = nu[j] - mu * g;
        if shifted > 0.0 {
            val += (shifted * shifted - nu[j] * nu[j]) / (2.0 * mu);
        } else {
            val += -nu[j] * nu[j] / (2.0 * mu);
        }
        j += 1;
    };
    if let Some(f) = &spec.funnel {
        for k in 1..=horizon {
            let pos = Vector3::new(states[k][0], states[k][1], states[k][2]);
            add_ineq(eval_h_c(&pos, &f.centers[k], &f.params));
        }
    }
    for peer in &spec.collisions {
        let cp = CollisionParams {
            min_distance: peer.min_distance,
            vertical_shaping: peer.vertical_shaping,
        };
        for k in 1..=horizon {
            let pos = Vector3::new(states[k][0], states[k][1], states[k][2]);
            add_ineq(eval_h_ij(&pos, &peer.positions[k], &cp));
        }
    }
    val
}

/// Gradient and Gauss-Newton Hessian of the augmented Lagrangian.
fn al_derivatives(
    spec: &OcpSpec<'_>,
    layout: &Layout,
    z: &DVector<f64>,
    eval: &Evaluation,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
    mu: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = layout.n;
    let m = layout.m;
    let horizon = layout.horizon;
    let nz = layout.len();
    let mut grad = DVector::<f64>::zeros(nz);
    let mut hess = DMatrix::<f64>::zeros(nz, nz);

    // tracking cost
    let last = match spec.options.convention {
        CostConvention::FullHorizon => horizon,
        CostConvention::TruncatedHorizon => horizon - 1,
    };
    for k in 0..=last {
        let xk = z.rows(layout.x(k), n).into_owned();
        let e = &xk - &spec.reference[k];
        let qe = &spec.weight * &e;
        for i in 0..n {
            grad[layout.x(k) + i] += 2.0 * qe[i];
            for j in 0..n {
                hess[(layout.x(k) + i, layout.x(k) + j)] += 2.0 * spec.weight[(i, j)];
            }
        }
    }
    if spec.options.input_weight > 0.0 {
        for k in 0..horizon {
            for i in 0..m {
                let idx = layout.u(k) + i;
                grad[idx] += 2.0 * spec.options.input_weight * z[idx];
                hess[(idx, idx)] += 2.0 * spec.options.input_weight;
            }
        }
    }

    // dynamics equalities via the Gauss-Newton expansion
    for k in 0..horizon {
        let a = &eval.jac_a[k];
        let b = &eval.jac_b[k];
        // y = mu * c - lambda
        let mut y = DVector::<f64>::zeros(n);
        for i in 0..n {
            y[i] = mu * eval.eq[k * n + i] - lambda[k * n + i];
        }
        let aty = a.transpose() * &y;
        let bty = b.transpose() * &y;
        for i in 0..n {
            grad[layout.x(k + 1) + i] += y[i];
            grad[layout.x(k) + i] -= aty[i];
        }
        for i in 0..m {
            grad[layout.u(k) + i] -= bty[i];
        }

        let ata = a.transpose() * a;
        let atb = a.transpose() * b;
        let btb = b.transpose() * b;
        let (ix, iu, ix1) = (layout.x(k), layout.u(k), layout.x(k + 1));
        for i in 0..n {
            for j in 0..n {
                hess[(ix + i, ix + j)] += mu * ata[(i, j)];
                hess[(ix + i, ix1 + j)] -= mu * a[(j, i)];
                hess[(ix1 + i, ix + j)] -= mu * a[(i, j)];
            }
            hess[(ix1 + i, ix1 + i)] += mu;
            for j in 0..m {
                hess[(ix + i, iu + j)] += mu * atb[(i, j)];
                hess[(iu + j, ix + i)] += mu * atb[(i, j)];
                hess[(ix1 + i, iu + j)] -= mu * b[(i, j)];
                hess[(iu + j, ix1 + i)] -= mu * b[(i, j)];
            }
        }
        for i in 0..m {
            for j in 0..m {
                hess[(iu + i, iu + j)] += mu * btb[(i, j)];
            }
        }
    }

    // nonlinear inequalities; the active-branch curvature keeps the Newton
    // model honest where the sigmoid bends sharply
    for (j, entry) in eval.ineq.iter().enumerate() {
        let shifted = nu[j] - mu * entry.value;
        if shifted > 0.0 {
            for i in 0..3 {
                grad[entry.z_offset + i] -= shifted * entry.grad[i];
            }
            for i in 0..3 {
                for l in 0..3 {
                    hess[(entry.z_offset + i, entry.z_offset + l)] += mu
                        * entry.grad[i]
                        * entry.grad[l]
                        - shifted * entry.hess[(i, l)];
                }
            }
        }
    }

    (grad, hess)
}

struct BoundSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

fn build_bounds(spec: &OcpSpec<'_>, layout: &Layout, x0: &DVector<f64>) -> BoundSet {
    let nz = layout.len();
    let mut lower = DVector::from_element(nz, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(nz, f64::INFINITY);
    for i in 0..layout.n {
        // the initial state is a fixed variable
        lower[layout.x(0) + i] = x0[i];
        upper[layout.x(0) + i] = x0[i];
        for k in 1..=layout.horizon {
            lower[layout.x(k) + i] = spec.state_bounds.lower[i];
            upper[layout.x(k) + i] = spec.state_bounds.upper[i];
        }
    }
    for k in 0..layout.horizon {
        for i in 0..layout.m {
            lower[layout.u(k) + i] = spec.input_bounds.lower[i];
            upper[layout.u(k) + i] = spec.input_bounds.upper[i];
        }
    }
    BoundSet { lower, upper }
}

fn project(z: &mut DVector<f64>, bounds: &BoundSet) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(bounds.lower[i], bounds.upper[i]);
    }
}

fn projected_gradient_norm(z: &DVector<f64>, grad: &DVector<f64>, bounds: &BoundSet) -> f64 {
    let mut worst: f64 = 0.0;
    let tol = 1e-10;
    for i in 0..z.len() {
        if bounds.upper[i] - bounds.lower[i] < tol {
            continue; // fixed variable
        }
        let g = grad[i];
        let pg = if z[i] <= bounds.lower[i] + tol {
            g.min(0.0)
        } else if z[i] >= bounds.upper[i] - tol {
            g.max(0.0)
        } else {
            g
        };
        worst = worst.max(pg.abs());
    }
    worst
}

/// Minimizes the augmented Lagrangian subject to the bounds with a projected
/// Gauss-Newton iteration. Returns the number of iterations used.
#[allow(clippy::too_many_arguments)]
fn inner_solve(
    spec: &OcpSpec<'_>,
    layout: &Layout,
    z: &mut DVector<f64>,
    bounds: &BoundSet,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
    mu: f64,
    tol: f64,
    max_iter: usize,
) -> usize {
    let nz = layout.len();
    let act_tol = 1e-10;
    let mut iters = 0;
    for _ in 0..max_iter {
        iters += 1;
        let eval = evaluate(spec, layout, z);
        let (grad, hess) = al_derivatives(spec, layout, z, &eval, lambda, nu, mu);
        if std::env::var_os("SOLVER_DEBUG_INNER").is_some() {
            eprintln!("  inner {iters}: pg={:.3e}", projected_gradient_norm(z, &grad, bounds));
        }
        if projected_gradient_norm(z, &grad, bounds) <= tol {
            break;
        }

        // free set: strictly inside, or pushed away from an active bound
        let mut free = Vec::with_capacity(nz);
        for i in 0..nz {
            if bounds.upper[i] - bounds.lower[i] < act_tol {
                continue;
            }
            let at_lower = z[i] <= bounds.lower[i] + act_tol && grad[i] > 0.0;
            let at_upper = z[i] >= bounds.upper[i] - act_tol && grad[i] < 0.0;
            if !(at_lower || at_upper) {
                free.push(i);
            }
        }
        if free.is_empty() {
            break;
        }

        let nf = free.len();
        let mut hf = DMatrix::<f64>::zeros(nf, nf);
        let mut gf = DVector::<f64>::zeros(nf);
        for (ri, &i) in free.iter().enumerate() {
            gf[ri] = grad[i];
            for (ci, &j) in free.iter().enumerate() {
                hf[(ri, ci)] = hess[(i, j)];
            }
        }

        let mut reg = spec.options.regularization;
        let dir_f = loop {
            let mut h_try = hf.clone();
            for i in 0..nf {
                h_try[(i, i)] += reg;
            }
            if let Some(chol) = h_try.cholesky() {
                break chol.solve(&(-&gf));
            }
            reg *= 100.0;
            if reg > 1e6 {
                break -&gf; // fall back to steepest descent
            }
        };

        let dir_f = if gf.dot(&dir_f) < 0.0 { dir_f } else { -&gf };

        // projected Armijo search: sufficient decrease is measured along the
        // actually realized (clamped) step
        let phi0 = al_value(spec, layout, z, lambda, nu, mu);
        let mut try_direction = |dir: &DVector<f64>| -> bool {
            let mut alpha = 1.0;
            for _ in 0..40 {
                let mut z_new = z.clone();
                for (ri, &i) in free.iter().enumerate() {
                    z_new[i] += alpha * dir[ri];
                }
                project(&mut z_new, bounds);
                let mut gdelta = 0.0;
                for i in 0..nz {
                    gdelta += grad[i] * (z_new[i] - z[i]);
                }
                let phi = al_value(spec, layout, &z_new, lambda, nu, mu);
                // strict decrease guards against accepting a numerically null
                // step when 1e-4 * gdelta underflows next to phi0
                if gdelta < 0.0 && phi < phi0 && phi <= phi0 + 1e-4 * gdelta {
                    if std::env::var_os("SOLVER_DEBUG_INNER").is_some() {
                        eprintln!("    accept alpha={alpha:.3e} drop={:.3e}", phi0 - phi);
                    }
                    *z = z_new;
                    return true;
                }
                alpha *= 0.5;
            }
            false
        };
        let accepted = try_direction(&dir_f) || {
            let sd = -&gf;
            try_direction(&sd)
        };
        if !accepted {
            // Near the solution the AL decrease falls below rounding in phi,
            // which defeats the Armijo test. Backtrack on the stationarity
            // residual instead: the Gauss-Newton step can overshoot in
            // directions whose curvature comes from the neglected constraint
            // second derivatives, so damping is required.
            let pg0 = projected_gradient_norm(z, &grad, bounds);
            let mut alpha = 1.0;
            let mut improved = false;
            for _ in 0..16 {
                let mut z_new = z.clone();
                for (ri, &i) in free.iter().enumerate() {
                    z_new[i] += alpha * dir_f[ri];
                }
                project(&mut z_new, bounds);
                let eval_new = evaluate(spec, layout, &z_new);
                let (grad_new, _) =
                    al_derivatives(spec, layout, &z_new, &eval_new, lambda, nu, mu);
                let pg1 = projected_gradient_norm(&z_new, &grad_new, bounds);
                if pg1 < 0.9 * pg0 {
                    *z = z_new;
                    improved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !improved {
                break; // no progress possible at this precision
            }
        }
    }
    iters
}

/// Solves the per-agent optimal control problem.
pub fn solve_docp(
    x_now: &DVector<f64>,
    spec: &OcpSpec<'_>,
    warm: Option<&WarmStart>,
) -> Result<OcpSolution, SolverError> {
    spec.validate()?;
    let n = spec.model.state_dim();
    let m = spec.model.input_dim();
    let horizon = spec.horizon;
    let layout = Layout { n, m, horizon };
    let bounds = build_bounds(spec, &layout, x_now);

    // initial iterate: warm start or a zero-input rollout
    let mut z = DVector::<f64>::zeros(layout.len());
    let n_ineq = {
        let funnel = if spec.funnel.is_some() { horizon } else { 0 };
        funnel + spec.collisions.len() * horizon
    };
    let mut lambda = DVector::<f64>::zeros(horizon * n);
    let mut nu = DVector::<f64>::zeros(n_ineq);
    let mut warm_penalty = None;
    match warm {
        Some(w) if w.states.len() == horizon + 1 && w.inputs.len() == horizon => {
            for k in 0..=horizon {
                z.rows_mut(layout.x(k), n).copy_from(&w.states[k]);
            }
            for k in 0..horizon {
                z.rows_mut(layout.u(k), m).copy_from(&w.inputs[k]);
            }
            if w.eq_multipliers.len() == lambda.len() {
                lambda.copy_from(&w.eq_multipliers);
            }
            if w.ineq_multipliers.len() == nu.len() {
                nu.copy_from(&w.ineq_multipliers);
            }
            warm_penalty = Some(w.penalty);
        }
        _ => {
            let mut x = x_now.clone();
            let u0 = DVector::zeros(m);
            z.rows_mut(layout.x(0), n).copy_from(&x);
            for k in 0..horizon {
                x = spec.model.step(&x, &u0);
                z.rows_mut(layout.x(k + 1), n).copy_from(&x);
            }
        }
    }
    project(&mut z, &bounds);

    let mut mu = warm_penalty
        .unwrap_or(spec.options.initial_penalty)
        .clamp(spec.options.initial_penalty, spec.options.max_penalty);
    let mut feas_target = 0.1_f64;
    let mut prev_viol = f64::INFINITY;
    let mut inner_tol = 1e-2_f64.max(spec.options.kkt_tol);
    let mut inner_total = 0usize;
    let mut outer_used = 0usize;
    let mut converged = false;
    // best feasible iterate seen, by stationarity residual
    let mut best: Option<(DVector<f64>, DVector<f64>, DVector<f64>, f64)> = None;
    let mut polish_stall = 0usize;

    for outer in 0..spec.options.max_outer {
        outer_used = outer + 1;
        inner_total +=
            inner_solve(spec, &layout, &mut z, &bounds, &lambda, &nu, mu, inner_tol, spec.options.max_inner);

        let eval = evaluate(spec, &layout, &z);
        let eq_viol = eval.eq.amax();
        let ineq_viol = eval
            .ineq
            .iter()
            .map(|e| (-e.value).max(0.0))
            .fold(0.0f64, f64::max);
        let (grad, _) = al_derivatives(spec, &layout, &z, &eval, &lambda, &nu, mu);
        let kkt = projected_gradient_norm(&z, &grad, &bounds);

        if std::env::var_os("SOLVER_DEBUG").is_some() {
            eprintln!(
                "outer {outer}: mu={mu:.1e} eq={eq_viol:.3e} ineq={ineq_viol:.3e} kkt={kkt:.3e} inner={inner_total}"
            );
        }
        let feasible_now =
            eq_viol <= spec.options.dynamics_tol && ineq_viol <= spec.options.constraint_tol;
        if feasible_now && best.as_ref().map_or(true, |(_, _, _, k)| kkt < *k) {
            best = Some((z.clone(), lambda.clone(), nu.clone(), kkt));
            polish_stall = 0;
        } else if feasible_now {
            // feasible but the stationarity residual stopped improving: the
            // mu * defect rounding noise is the floor, more polishing is waste
            polish_stall += 1;
            if polish_stall >= 3 {
                break;
            }
        }
        if feasible_now && kkt <= spec.options.kkt_tol {
            converged = true;
            break;
        }

        let fully_feasible =
            eq_viol <= spec.options.dynamics_tol && ineq_viol <= spec.options.constraint_tol;
        if fully_feasible {
            // Feasible to the final tolerances: keep absorbing mu * defect
            // into the multipliers so the residual mu * c term in the
            // stationarity measure decays instead of plateauing, and polish.
            lambda -= mu * &eval.eq;
            for (j, e) in eval.ineq.iter().enumerate() {
                nu[j] = (nu[j] - mu * e.value).max(0.0);
            }
            inner_tol = (inner_tol * 0.1).max(spec.options.kkt_tol * 0.5);
        } else if eq_viol.max(ineq_viol) <= feas_target.max(100.0 * spec.options.dynamics_tol) {
            // near-feasible: let the multipliers do the work, but if the
            // violation stops halving per round the first-order updates are
            // too small at this penalty, so escalate mu as well
            let viol = eq_viol.max(ineq_viol);
            lambda -= mu * &eval.eq;
            for (j, e) in eval.ineq.iter().enumerate() {
                nu[j] = (nu[j] - mu * e.value).max(0.0);
            }
            if viol > 0.5 * prev_viol {
                mu = (mu * spec.options.penalty_growth).min(spec.options.max_penalty);
            }
            prev_viol = prev_viol.min(viol);
            feas_target = (feas_target * 0.1).max(spec.options.dynamics_tol);
            inner_tol = (inner_tol * 0.1).max(spec.options.kkt_tol * 0.5);
        } else {
            let viol = eq_viol.max(ineq_viol);
            let at_cap = mu >= spec.options.max_penalty;
            if viol <= 0.5 * prev_viol || at_cap {
                // Infeasibility is contracting at this penalty (or the penalty
                // is capped), so first-order multiplier updates carry the
                // rest; growing mu would only degrade the inner conditioning.
                lambda -= mu * &eval.eq;
                for (j, e) in eval.ineq.iter().enumerate() {
                    nu[j] = (nu[j] - mu * e.value).max(0.0);
                }
            } else {
                mu = (mu * spec.options.penalty_growth).min(spec.options.max_penalty);
            }
            prev_viol = prev_viol.min(viol);
            inner_tol = (inner_tol * 0.5).max(spec.options.kkt_tol * 0.5);
        }
    }

    if !converged {
        if let Some((bz, bl, bn, _)) = best {
            z = bz;
            lambda = bl;
            nu = bn;
        }
    }

    // final shifted multipliers are the Lagrange multiplier estimates
    let eval = evaluate(spec, &layout, &z);
    let eq_viol = eval.eq.amax();
    let ineq_viol = eval.ineq.iter().map(|e| (-e.value).max(0.0)).fold(0.0f64, f64::max);
    let (grad, _) = al_derivatives(spec, &layout, &z, &eval, &lambda, &nu, mu);
    let kkt = projected_gradient_norm(&z, &grad, &bounds);

    if eq_viol > 1e-4 && !converged {
        return Err(SolverError::Infeasible { defect: eq_viol });
    }
    if ineq_viol > spec.options.constraint_tol && !spec.options.soft_constraints && !converged {
        return Err(SolverError::Infeasible { defect: ineq_viol });
    }

    let states: Vec<DVector<f64>> = (0..=horizon).map(|k| z.rows(layout.x(k), n).into_owned()).collect();
    let inputs: Vec<DVector<f64>> = (0..horizon).map(|k| z.rows(layout.u(k), m).into_owned()).collect();
    let cost = tracking_cost(spec, &states, &inputs);

    let mut lambda_final = lambda.clone();
    lambda_final -= mu * &eval.eq;
    let mut nu_final = nu.clone();
    for (j, e) in eval.ineq.iter().enumerate() {
        nu_final[j] = (nu[j] - mu * e.value).max(0.0);
    }

    let slack_active = ineq_viol > spec.options.constraint_tol;
    let diagnostics = SolveDiagnostics {
        outer_iterations: outer_used,
        inner_iterations: inner_total,
        kkt_residual: kkt,
        dynamics_defect: eq_viol,
        max_constraint_violation: ineq_viol,
        slack_magnitude: if slack_active { ineq_viol } else { 0.0 },
        slack_active,
        converged,
    };

    Ok(OcpSolution {
        states,
        inputs,
        cost,
        diagnostics,
        warm: WarmStart {
            states: vec![],
            inputs: vec![],
            eq_multipliers: lambda_final,
            ineq_multipliers: nu_final,
            penalty: mu,
        },
    })
}

/// The MPC value function: optimal tracking cost of the follower against the
/// (position-bearing) leader trajectory.
pub fn value_function(
    x_f: &DVector<f64>,
    leader_positions: &[Vector3<f64>],
    spec: &OcpSpec<'_>,
) -> Result<f64, SolverError> {
    let mut spec_ref = OcpSpec {
        model: spec.model,
        horizon: spec.horizon,
        weight: spec.weight.clone(),
        reference: leader_positions
            .iter()
            .map(|p| {
                let mut r = DVector::zeros(spec.model.state_dim());
                r[0] = p.x;
                r[1] = p.y;
                r[2] = p.z;
                r
            })
            .collect(),
        state_bounds: spec.state_bounds.clone(),
        input_bounds: spec.input_bounds.clone(),
        funnel: spec.funnel.clone(),
        collisions: spec.collisions.clone(),
        options: spec.options.clone(),
    };
    spec_ref.options.convention = spec.options.convention;
    let sol = solve_docp(x_f, &spec_ref, None)?;
    Ok(sol.cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoaMembership {
    Inside,
    Outside,
    Unknown,
}

/// Region-of-attraction membership: V_N(x_f, z_l) <= V_N,max. The quadratic
/// lower bound on the value function short-circuits clearly-outside states
/// without solving.
pub fn roa_membership(
    x_f: &DVector<f64>,
    leader_positions: &[Vector3<f64>],
    spec: &OcpSpec<'_>,
    v_n_max: f64,
) -> RoaMembership {
    assert!(v_n_max > 0.0);
    let mut z = DVector::zeros(x_f.len());
    z[0] = leader_positions[0].x;
    z[1] = leader_positions[0].y;
    z[2] = leader_positions[0].z;
    let e = x_f - &z;
    let lower_bound = e.dot(&(&spec.weight * &e));
    if lower_bound > v_n_max {
        return RoaMembership::Outside;
    }
    match value_function(x_f, leader_positions, spec) {
        Ok(v) => {
            if v <= v_n_max {
                RoaMembership::Inside
            } else {
                RoaMembership::Outside
            }
        }
        Err(_) => RoaMembership::Unknown,
    }
}
