//! The rendezvous run loop: per-step reference reconstruction, per-agent
//! optimal control solves, the landing latch, broadcasting over the lossy
//! fabric, and artifact assembly.
//!
//! Agents are processed sequentially in id order every step, which makes
//! runs bitwise reproducible. At t = 0 the sequencing is also semantically
//! load-bearing: each agent's fresh trajectory is delivered to higher-id
//! agents within the same step, which breaks the mutual-avoidance deadlock
//! on the first solve.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    check_safety_gate, estimate_rho, CollisionReport, GateParams, LyapunovSample,
    verify_collision_free,
};
use crate::artifacts::{
    self, ArtifactError, CertificationReport, RunSummary, TrajectoryRow, SCHEMA_VERSION,
};
use crate::comm::{CommFabric, LossEvent, SharedTrajectory};
use crate::config::{ConfigError, DisturbanceConfig, ResolvedLeaderRef, ScenarioConfig};
use crate::constraints::eval_h_c;
use crate::constraints::eval_h_ij;
use crate::ekf::{
    ekf_update, horizontal_block, lambda_max, predict_horizon, shift_and_predict, worst_case_radius,
    EkfState, NoiseConfig, PredictionResult,
};
use crate::models::{
    step_follower, step_leader, DiscreteModel, FollowerDynamics, LeaderDynamics, ModelError,
    Rk4, FOLLOWER_DIM, FOLLOWER_INPUT_DIM, LEADER_DIM, LEADER_INPUT_DIM,
};
use crate::solver::{
    solve_docp, FunnelConstraint, OcpSpec, PeerAvoidance, SolverError, WarmStart,
};

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("agent {agent} failed irrecoverably at step {t}: {source}")]
    AgentFailure {
        agent: usize,
        t: usize,
        source: SolverError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Every follower latched onto its landing reference.
    Completed,
    /// The step cap was reached first.
    CapHit,
    /// The probabilistic landing gate failed for the configured dwell.
    SafetyAbort,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::CapHit => "cap_hit",
            RunStatus::SafetyAbort => "safety_abort",
        }
    }
}

/// Per-agent slice of a step record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentStepRecord {
    pub agent: usize,
    pub role: String,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub dynamics_defect: f64,
    pub constraint_violation: f64,
    pub slack_active: bool,
    pub converged: bool,
    /// Solver failed; a fallback input was applied.
    pub degraded: bool,
    pub latched: bool,
    /// Staleness per peer; None = never heard from.
    pub staleness: BTreeMap<usize, Option<usize>>,
    /// Reference entries sourced from the predictor, per peer.
    pub predictor_entries: BTreeMap<usize, usize>,
    /// Deadlock-mitigation perturbation applied this step.
    pub perturbed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub agents: Vec<AgentStepRecord>,
    /// Funnel minimum over followers at the true states.
    pub min_h_c: f64,
    /// Pairwise separation minimum at the true states.
    pub min_h_ij: Option<f64>,
    /// Gate eigenvalue (max over followers' leader predictors).
    pub lambda_gate: f64,
}

/// Everything a run produces, in memory.
#[derive(Debug)]
#[derive(Clone)]
pub struct RunOutput {
    pub status: RunStatus,
    pub steps: Vec<StepRecord>,
    pub trajectory: Vec<TrajectoryRow>,
    pub loss_audit: Vec<LossEvent>,
    pub lambda_trace: Vec<(usize, f64)>,
    /// Latch step per follower id.
    pub latch_times: BTreeMap<usize, usize>,
    /// Value-function samples per follower id (pre-latch steps only).
    pub lyapunov: BTreeMap<usize, Vec<LyapunovSample>>,
    pub collision: CollisionReport,
    pub rho_hat: Option<f64>,
}

impl RunOutput {
    pub fn all_latched(&self, follower_count: usize) -> bool {
        self.latch_times.len() == follower_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Leader,
    Follower,
}

struct Agent {
    id: usize,
    role: Role,
    state: DVector<f64>,
    /// Landing offset (followers only).
    offset: Vector3<f64>,
    latched: bool,
    latch_time: Option<usize>,
    warm: Option<WarmStart>,
    /// One filter per peer this agent predicts (keyed by peer id).
    predictors: BTreeMap<usize, EkfState>,
    last_cost: Option<f64>,
    stall: usize,
}

enum Disturbance {
    None,
    Seeded { follower: Vec<f64>, leader: Vec<f64> },
    Replay(BTreeMap<(usize, usize), Vec<f64>>),
}

/// Executes a validated scenario.
pub struct Coordinator {
    cfg: ScenarioConfig,
    follower_model: Rk4<FollowerDynamics>,
    leader_model: Rk4<LeaderDynamics>,
    leader_ref: ResolvedLeaderRef,
    fabric: CommFabric,
    agents: Vec<Agent>,
    rng: ChaCha8Rng,
    disturbance: Disturbance,
    gate: GateParams,
    gate_fail_streak: usize,
    wc_step_radius: f64,
    q_follower: DMatrix<f64>,
    q_leader: DMatrix<f64>,
}

impl Coordinator {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, CoordinatorError> {
        cfg.validate()?;
        let follower_model = cfg.model.follower_model();
        let leader_model = cfg.model.leader_model();
        let leader_ref = cfg.resolve_leader_reference()?;
        let m = cfg.follower_count();
        let fabric = CommFabric::new(cfg.loss.clone(), m + 1, cfg.seed.unwrap_or(0));

        let offsets = cfg.assigned_offsets();
        let mut agents = Vec::with_capacity(m + 1);
        agents.push(Agent {
            id: 0,
            role: Role::Leader,
            state: cfg.initial_leader(),
            offset: Vector3::zeros(),
            latched: false,
            latch_time: None,
            warm: None,
            predictors: BTreeMap::new(),
            last_cost: None,
            stall: 0,
        });
        for (i, x0) in cfg.initial_followers().into_iter().enumerate() {
            agents.push(Agent {
                id: i + 1,
                role: Role::Follower,
                state: x0,
                offset: Vector3::new(offsets[i][0], offsets[i][1], offsets[i][2]),
                latched: false,
                latch_time: None,
                warm: None,
                predictors: BTreeMap::new(),
                last_cost: None,
                stall: 0,
            });
        }

        let disturbance = match &cfg.disturbance {
            DisturbanceConfig::None => Disturbance::None,
            DisturbanceConfig::Seeded { follower, leader } => Disturbance::Seeded {
                follower: follower.clone(),
                leader: leader.clone(),
            },
            DisturbanceConfig::Replay { path } => {
                let full = match &cfg.base_dir {
                    Some(dir) => dir.join(path),
                    None => std::path::PathBuf::from(path),
                };
                Disturbance::Replay(load_disturbance_replay(&full)?)
            }
        };

        let wc_step_radius = worst_case_radius(
            &follower_model,
            &cfg.model.follower_state_bounds,
            &cfg.model.follower_input_bounds,
        );

        let gate = cfg.gate_params();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
        let q_follower = cfg.follower_weight();
        let q_leader = cfg.leader_weight();
        Ok(Self {
            cfg,
            follower_model,
            leader_model,
            leader_ref,
            fabric,
            agents,
            rng,
            disturbance,
            gate,
            gate_fail_streak: 0,
            wc_step_radius,
            q_follower,
            q_leader,
        })
    }

    fn follower_count(&self) -> usize {
        self.agents.len() - 1
    }

    fn peer_noise(&self, peer: usize) -> &NoiseConfig {
        if peer == 0 {
            &self.cfg.predictor.leader
        } else {
            &self.cfg.predictor.follower
        }
    }

    fn peer_model(&self, peer: usize) -> &dyn DiscreteModel {
        if peer == 0 {
            &self.leader_model
        } else {
            &self.follower_model
        }
    }

    /// Phase 1 of a step: every follower measures every peer's position and
    /// runs its filters. At t = 0 filters initialize exactly at the truth.
    fn update_predictors(&mut self, t: usize) {
        let true_states: Vec<DVector<f64>> = self.agents.iter().map(|a| a.state.clone()).collect();
        let std = self.cfg.predictor.measurement_noise_std;
        let normal = Normal::new(0.0, std.max(1e-300)).unwrap();
        for i in 1..self.agents.len() {
            let peers: Vec<usize> =
                (0..self.agents.len()).filter(|&p| p != i).collect();
            for peer in peers {
                let mut meas = Vector3::new(
                    true_states[peer][0],
                    true_states[peer][1],
                    true_states[peer][2],
                );
                if std > 0.0 {
                    meas.x += normal.sample(&mut self.rng);
                    meas.y += normal.sample(&mut self.rng);
                    meas.z += normal.sample(&mut self.rng);
                }
                if t == 0 {
                    self.agents[i]
                        .predictors
                        .insert(peer, EkfState::exact(true_states[peer].clone(), 0));
                } else {
                    let prev = self.agents[i].predictors.get(&peer).expect("predictor initialized");
                    let noise = self.peer_noise(peer).clone();
                    let model = self.peer_model(peer);
                    let (next, _diag) = ekf_update(prev, model, &meas, &noise);
                    self.agents[i].predictors.insert(peer, next);
                }
            }
        }
    }

    /// Reconstructs peer `peer` as seen by agent `i` at step t, and the
    /// staleness that reconstruction used.
    fn reconstruct_peer(
        &self,
        i: usize,
        peer: usize,
        t: usize,
        prediction: &PredictionResult,
    ) -> (Vec<Vector3<f64>>, Option<usize>, usize) {
        let collection = self.fabric.collect(i, t);
        let n = self.cfg.horizon;
        match collection.get(&peer) {
            Some(data) => {
                let rec = shift_and_predict(
                    Some(&data.trajectory.positions),
                    data.staleness,
                    n,
                    prediction,
                );
                (rec.positions, Some(data.staleness), rec.predictor_entries)
            }
            None => {
                let rec = shift_and_predict(None, 0, n, prediction);
                (rec.positions, None, rec.predictor_entries)
            }
        }
    }

    fn follower_reference(
        &self,
        leader_positions: &[Vector3<f64>],
        offset: &Vector3<f64>,
    ) -> Vec<DVector<f64>> {
        // The platform moves, so the tracking target needs matching velocity
        // rows; otherwise the optimal cost bottoms out at the velocity
        // mismatch instead of vanishing on the platform. Differences of the
        // reconstructed centers provide them without assuming a leader model.
        let dt = self.cfg.model.dt;
        let n = leader_positions.len();
        (0..n)
            .map(|k| {
                let p = &leader_positions[k];
                let v = if n < 2 {
                    Vector3::zeros()
                } else if k + 1 < n {
                    (leader_positions[k + 1] - p) / dt
                } else {
                    (p - leader_positions[n - 2]) / dt
                };
                let mut r = DVector::zeros(FOLLOWER_DIM);
                r[0] = p.x + offset.x;
                r[1] = p.y + offset.y;
                r[2] = p.z + offset.z;
                r[3] = v.x;
                r[4] = v.y;
                r[5] = v.z;
                r
            })
            .collect()
    }

    /// Collision-radius inflation for a stale peer: one step of latency is
    /// nominal; staleness beyond it inflates by the worst-case one-step
    /// displacement per extra step, capped.
    fn inflation(&self, staleness: Option<usize>) -> f64 {
        let cap = self.cfg.mitigation.inflation_cap;
        // Even a fresh plan deviates from what the peer actually flies, since
        // every agent re-optimizes each step; a small fixed margin absorbs
        // that replanning drift (and solver slack) so executed separations
        // stay at or above the required distance.
        const REPLAN_MARGIN: f64 = 0.01;
        match staleness {
            Some(k) if k > 1 => (self.wc_step_radius * (k - 1) as f64).min(cap) + REPLAN_MARGIN,
            Some(_) => REPLAN_MARGIN,
            None => cap + REPLAN_MARGIN,
        }
    }

    fn draw_disturbance(&mut self, t: usize, agent: usize, dim: usize) -> DVector<f64> {
        match &self.disturbance {
            Disturbance::None => DVector::zeros(dim),
            Disturbance::Seeded { follower, leader } => {
                let bounds = if agent == 0 { leader } else { follower };
                let mut w = DVector::zeros(dim);
                for i in 0..dim {
                    let b = bounds[i];
                    if b > 0.0 {
                        w[i] = Uniform::new_inclusive(-b, b).sample(&mut self.rng);
                    }
                }
                w
            }
            Disturbance::Replay(map) => map
                .get(&(t, agent))
                .map(|v| DVector::from_vec(v.clone()))
                .unwrap_or_else(|| DVector::zeros(dim)),
        }
    }

    /// One full sweep at step t. Returns the record; `self.agents` states
    /// advance to t+1.
    fn run_step(&mut self, t: usize) -> Result<StepRecord, CoordinatorError> {
        self.update_predictors(t);
        let n = self.cfg.horizon;
        let m = self.follower_count();

        // leader prediction + gate eigenvalue, per follower
        let mut leader_predictions: BTreeMap<usize, PredictionResult> = BTreeMap::new();
        let mut lambda_gate: f64 = 0.0;
        for i in 1..=m {
            let pred = predict_horizon(
                &self.agents[i].predictors[&0],
                &self.leader_model,
                &self.cfg.predictor.leader,
                n,
            );
            let lam = lambda_max(&DMatrix::from_iterator(
                2,
                2,
                horizontal_block(&pred.covariances[1]).iter().cloned(),
            ));
            lambda_gate = lambda_gate.max(lam);
            leader_predictions.insert(i, pred);
        }

        let mut records: Vec<AgentStepRecord> = Vec::with_capacity(m + 1);
        let mut broadcasts: Vec<SharedTrajectory> = Vec::new();

        for i in 0..=m {
            let record = if self.agents[i].role == Role::Leader {
                self.step_leader_agent(t, &mut broadcasts)?
            } else {
                self.step_follower_agent(t, i, &leader_predictions[&i], &mut broadcasts)?
            };
            // immediate visibility at t = 0 (sequential first iteration)
            if t == 0 {
                if let Some(traj) = broadcasts.pop() {
                    self.fabric.deliver_now(traj, t);
                }
            } else if let Some(traj) = broadcasts.pop() {
                self.fabric.broadcast(traj, t);
            }
            records.push(record);
        }
        self.fabric.commit_step();

        // safety metrics at the recorded (pre-step) states
        let mut min_h_c = f64::INFINITY;
        let mut min_h_ij: Option<f64> = None;
        let leader_pos = {
            let r = &records[0];
            Vector3::new(r.state[0], r.state[1], r.state[2])
        };
        for i in 1..=m {
            let p = Vector3::new(records[i].state[0], records[i].state[1], records[i].state[2]);
            min_h_c = min_h_c.min(eval_h_c(&p, &leader_pos, &self.cfg.funnel));
            for j in (i + 1)..=m {
                let q = Vector3::new(records[j].state[0], records[j].state[1], records[j].state[2]);
                let h = eval_h_ij(&p, &q, &self.cfg.collision);
                min_h_ij = Some(min_h_ij.map_or(h, |v: f64| v.min(h)));
            }
        }

        Ok(StepRecord { t, agents: records, min_h_c, min_h_ij, lambda_gate })
    }

    fn step_leader_agent(
        &mut self,
        t: usize,
        broadcasts: &mut Vec<SharedTrajectory>,
    ) -> Result<AgentStepRecord, CoordinatorError> {
        let n = self.cfg.horizon;
        let reference: Vec<DVector<f64>> =
            (0..=n).map(|k| self.leader_ref.state_at_step(t + k, self.cfg.model.dt)).collect();
        let spec = OcpSpec {
            model: &self.leader_model,
            horizon: n,
            weight: self.q_leader.clone(),
            reference,
            state_bounds: self.cfg.model.leader_state_bounds.clone(),
            input_bounds: self.cfg.model.leader_input_bounds.clone(),
            funnel: None,
            collisions: vec![],
            options: self.cfg.solver.clone(),
        };
        let x_now = self.agents[0].state.clone();
        let warm = self.agents[0].warm.clone();
        let (input, record) = match solve_docp(&x_now, &spec, warm.as_ref()) {
            Ok(sol) => {
                broadcasts.push(SharedTrajectory {
                    sender: 0,
                    birth: t,
                    positions: sol
                        .states
                        .iter()
                        .map(|x| Vector3::new(x[0], x[1], x[2]))
                        .collect(),
                });
                self.agents[0].warm = Some(sol.shifted(&self.leader_model));
                let rec = AgentStepRecord {
                    agent: 0,
                    role: "leader".into(),
                    state: x_now.iter().cloned().collect(),
                    input: sol.inputs[0].iter().cloned().collect(),
                    cost: sol.cost,
                    kkt_residual: sol.diagnostics.kkt_residual,
                    dynamics_defect: sol.diagnostics.dynamics_defect,
                    constraint_violation: sol.diagnostics.max_constraint_violation,
                    slack_active: sol.diagnostics.slack_active,
                    converged: sol.diagnostics.converged,
                    degraded: false,
                    latched: false,
                    staleness: BTreeMap::new(),
                    predictor_entries: BTreeMap::new(),
                    perturbed: false,
                };
                (sol.inputs[0].clone(), rec)
            }
            Err(err) => {
                log::warn!("leader solve failed at t={t}: {err}; applying fallback input");
                let fallback = warm
                    .as_ref()
                    .map(|w| w.inputs[0].clone())
                    .unwrap_or_else(|| DVector::zeros(LEADER_INPUT_DIM));
                let rec = AgentStepRecord {
                    agent: 0,
                    role: "leader".into(),
                    state: x_now.iter().cloned().collect(),
                    input: fallback.iter().cloned().collect(),
                    cost: f64::NAN,
                    kkt_residual: f64::NAN,
                    dynamics_defect: f64::NAN,
                    constraint_violation: f64::NAN,
                    slack_active: false,
                    converged: false,
                    degraded: true,
                    latched: false,
                    staleness: BTreeMap::new(),
                    predictor_entries: BTreeMap::new(),
                    perturbed: false,
                };
                (fallback, rec)
            }
        };
        let w = self.draw_disturbance(t, 0, LEADER_DIM);
        let next = step_leader(&self.leader_model, &self.agents[0].state, &input, &w)?;
        self.agents[0].state = next;
        Ok(record)
    }

    #[allow(clippy::too_many_arguments)]
    fn step_follower_agent(
        &mut self,
        t: usize,
        i: usize,
        leader_prediction: &PredictionResult,
        broadcasts: &mut Vec<SharedTrajectory>,
    ) -> Result<AgentStepRecord, CoordinatorError> {
        let n = self.cfg.horizon;
        let m = self.follower_count();
        let offset = self.agents[i].offset;

        // leader reconstruction and own reference
        let (leader_positions, leader_staleness, leader_pred_entries) =
            self.reconstruct_peer(i, 0, t, leader_prediction);
        let mut reference = self.follower_reference(&leader_positions, &offset);

        let mut staleness = BTreeMap::new();
        let mut predictor_entries = BTreeMap::new();
        staleness.insert(0, leader_staleness);
        predictor_entries.insert(0, leader_pred_entries);

        // latch gate on the position error to the landing reference
        let x_now = self.agents[i].state.clone();
        let pos_err = {
            let dx = x_now[0] - reference[0][0];
            let dy = x_now[1] - reference[0][1];
            let dz = x_now[2] - reference[0][2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        };
        if !self.agents[i].latched && pos_err <= self.cfg.epsilon {
            self.agents[i].latched = true;
            self.agents[i].latch_time = Some(t);
        }
        let latched = self.agents[i].latched;

        // peer avoidance against reconstructed trajectories
        let mut collisions = Vec::new();
        for j in 1..=m {
            if j == i {
                continue;
            }
            let pred = predict_horizon(
                &self.agents[i].predictors[&j],
                &self.follower_model,
                &self.cfg.predictor.follower,
                n,
            );
            let (positions, k, entries) = self.reconstruct_peer(i, j, t, &pred);
            staleness.insert(j, k);
            predictor_entries.insert(j, entries);
            collisions.push(PeerAvoidance {
                positions,
                min_distance: self.cfg.collision.min_distance + self.inflation(k),
                vertical_shaping: self.cfg.collision.vertical_shaping,
            });
        }

        // deadlock mitigation: tangential reference nudge after a stall
        let mut perturbed = false;
        if !latched && self.agents[i].stall >= self.cfg.mitigation.stall_steps {
            let to_ref = Vector3::new(
                reference[0][0] - x_now[0],
                reference[0][1] - x_now[1],
                0.0,
            );
            let tangent = if to_ref.norm() > 1e-9 {
                Vector3::new(-to_ref.y, to_ref.x, 0.0).normalize()
            } else {
                Vector3::new(1.0, 0.0, 0.0)
            };
            let sign: f64 = if Uniform::new(0u8, 2u8).sample(&mut self.rng) == 0 { 1.0 } else { -1.0 };
            let nudge = tangent * (sign * self.cfg.mitigation.perturbation);
            for r in reference.iter_mut() {
                r[0] += nudge.x;
                r[1] += nudge.y;
            }
            self.agents[i].stall = 0;
            perturbed = true;
            log::info!("deadlock mitigation fired for follower {i} at t={t}");
        }

        let funnel = FunnelConstraint {
            params: self.cfg.funnel,
            centers: leader_positions.clone(),
        };
        let spec = OcpSpec {
            model: &self.follower_model,
            horizon: n,
            weight: self.q_follower.clone(),
            reference: reference.clone(),
            state_bounds: self.cfg.model.follower_state_bounds.clone(),
            input_bounds: self.cfg.model.follower_input_bounds.clone(),
            funnel: Some(funnel),
            collisions,
            options: self.cfg.solver.clone(),
        };
        let warm = self.agents[i].warm.clone();
        let (input, record) = match solve_docp(&x_now, &spec, warm.as_ref()) {
            Ok(sol) => {
                // stall accounting for the deadlock mitigation
                if let Some(last) = self.agents[i].last_cost {
                    if last - sol.cost < self.cfg.mitigation.cost_decrease_tol && !latched {
                        self.agents[i].stall += 1;
                    } else {
                        self.agents[i].stall = 0;
                    }
                }
                self.agents[i].last_cost = Some(sol.cost);
                if !latched {
                    let traj = SharedTrajectory {
                        sender: i,
                        birth: t,
                        positions: sol
                            .states
                            .iter()
                            .map(|x| Vector3::new(x[0], x[1], x[2]))
                            .collect(),
                    };
                    broadcasts.push(traj);
                }
                self.agents[i].warm = Some(sol.shifted(&self.follower_model));
                let rec = AgentStepRecord {
                    agent: i,
                    role: "follower".into(),
                    state: x_now.iter().cloned().collect(),
                    input: sol.inputs[0].iter().cloned().collect(),
                    cost: sol.cost,
                    kkt_residual: sol.diagnostics.kkt_residual,
                    dynamics_defect: sol.diagnostics.dynamics_defect,
                    constraint_violation: sol.diagnostics.max_constraint_violation,
                    slack_active: sol.diagnostics.slack_active,
                    converged: sol.diagnostics.converged,
                    degraded: false,
                    latched,
                    staleness,
                    predictor_entries,
                    perturbed,
                };
                (sol.inputs[0].clone(), rec)
            }
            Err(err) => {
                log::warn!("follower {i} solve failed at t={t}: {err}; applying fallback input");
                let fallback = warm
                    .as_ref()
                    .map(|w| w.inputs[0].clone())
                    .unwrap_or_else(|| DVector::zeros(FOLLOWER_INPUT_DIM));
                let rec = AgentStepRecord {
                    agent: i,
                    role: "follower".into(),
                    state: x_now.iter().cloned().collect(),
                    input: fallback.iter().cloned().collect(),
                    cost: f64::NAN,
                    kkt_residual: f64::NAN,
                    dynamics_defect: f64::NAN,
                    constraint_violation: f64::NAN,
                    slack_active: false,
                    converged: false,
                    degraded: true,
                    latched,
                    staleness,
                    predictor_entries,
                    perturbed,
                };
                (fallback, rec)
            }
        };

        let w = self.draw_disturbance(t, i, FOLLOWER_DIM);
        let next = step_follower(&self.follower_model, &self.agents[i].state, &input, &w)?;
        self.agents[i].state = next;
        Ok(record)
    }

    /// Runs the scenario to completion, cap, or abort.
    pub fn run(mut self) -> Result<RunOutput, CoordinatorError> {
        let m = self.follower_count();
        let mut steps = Vec::new();
        let mut trajectory = Vec::new();
        let mut lambda_trace = Vec::new();
        let mut lyapunov: BTreeMap<usize, Vec<LyapunovSample>> = BTreeMap::new();
        let mut status = RunStatus::CapHit;
        let mut final_t = self.cfg.step_cap;

        for t in 0..self.cfg.step_cap {
            if self.agents[1..].iter().all(|a| a.latched) {
                status = RunStatus::Completed;
                final_t = t;
                break;
            }
            let record = self.run_step(t)?;
            lambda_trace.push((t, record.lambda_gate));

            // online gate with abort dwell
            let gate_radius = self.gate.safe_radius
                + (self.gate.confidence.s * record.lambda_gate).sqrt();
            if gate_radius >= self.gate.platform_radius {
                self.gate_fail_streak += 1;
            } else {
                self.gate_fail_streak = 0;
            }

            for a in &record.agents {
                trajectory.push(TrajectoryRow {
                    t,
                    agent: a.agent,
                    role: a.role.clone(),
                    state: a.state.clone(),
                    input: a.input.clone(),
                });
                // value-function sample while approaching (followers only)
                if a.role == "follower" && !a.latched && !a.degraded {
                    let x = DVector::from_vec(a.state.clone());
                    // reference position: the follower's own record cost is
                    // V_N; the error uses its landing reference at l = 0
                    let e = {
                        let i = a.agent;
                        let agent = &self.agents[i];
                        let zl = agent.predictors[&0].x.clone();
                        let dt = self.cfg.model.dt;
                        let u0 = DVector::zeros(self.leader_model.input_dim());
                        let zl1 = self.leader_model.step(&zl, &u0);
                        let mut r = DVector::zeros(FOLLOWER_DIM);
                        r[0] = zl[0] + agent.offset.x;
                        r[1] = zl[1] + agent.offset.y;
                        r[2] = zl[2] + agent.offset.z;
                        // platform velocity rows, consistent with the solver
                        // reference for a moving platform
                        r[3] = (zl1[0] - zl[0]) / dt;
                        r[4] = (zl1[1] - zl[1]) / dt;
                        r[5] = (zl1[2] - zl[2]) / dt;
                        &x - &r
                    };
                    let error_sq = e.dot(&(&self.q_follower * &e));
                    lyapunov
                        .entry(a.agent)
                        .or_default()
                        .push(LyapunovSample { t, v_n: a.cost, error_sq });
                }
            }
            steps.push(record);

            if self.gate_fail_streak >= self.gate.abort_dwell {
                status = RunStatus::SafetyAbort;
                final_t = t + 1;
                break;
            }
            if t + 1 == self.cfg.step_cap {
                final_t = self.cfg.step_cap;
            }
        }
        if self.agents[1..].iter().all(|a| a.latched) && status == RunStatus::CapHit {
            status = RunStatus::Completed;
        }

        // final states row
        for a in &self.agents {
            trajectory.push(TrajectoryRow {
                t: final_t,
                agent: a.id,
                role: if a.role == Role::Leader { "leader".into() } else { "follower".into() },
                state: a.state.iter().cloned().collect(),
                input: vec![],
            });
        }

        // collision verification over the true recorded trajectories
        let mut follower_tracks: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); m];
        let mut leader_track: Vec<Vector3<f64>> = Vec::new();
        for row in &trajectory {
            if row.agent == 0 {
                leader_track.push(row.position());
            } else {
                follower_tracks[row.agent - 1].push(row.position());
            }
        }
        let collision = verify_collision_free(
            &follower_tracks,
            &leader_track,
            &self.cfg.collision,
            &self.cfg.funnel,
        );

        let rho_hat = lyapunov
            .values()
            .filter_map(|samples| estimate_rho(samples, 1e-6))
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));

        let latch_times = self
            .agents
            .iter()
            .filter_map(|a| a.latch_time.map(|t| (a.id, t)))
            .collect();

        Ok(RunOutput {
            status,
            steps,
            trajectory,
            loss_audit: self.fabric.audit().to_vec(),
            lambda_trace,
            latch_times,
            lyapunov,
            collision,
            rho_hat,
        })
    }
}

fn load_disturbance_replay(
    path: &Path,
) -> Result<BTreeMap<(usize, usize), Vec<f64>>, CoordinatorError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CoordinatorError::Config(ConfigError::Csv(e)))?;
    let mut map = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CoordinatorError::Config(ConfigError::Csv(e)))?;
        let bad = |msg: String| CoordinatorError::Config(ConfigError::Invalid(vec![msg]));
        if record.len() < 3 {
            return Err(bad("disturbance replay rows need t, agent, w0..".into()));
        }
        let t: usize = record[0].parse().map_err(|_| bad(format!("bad t '{}'", &record[0])))?;
        let agent: usize =
            record[1].parse().map_err(|_| bad(format!("bad agent '{}'", &record[1])))?;
        let w: Result<Vec<f64>, _> = (2..record.len()).map(|i| record[i].parse::<f64>()).collect();
        let w = w.map_err(|_| bad("bad disturbance value".into()))?;
        map.insert((t, agent), w);
    }
    Ok(map)
}

/// Convenience wrapper: build and run.
pub fn run_scenario(cfg: ScenarioConfig) -> Result<RunOutput, CoordinatorError> {
    Coordinator::new(cfg)?.run()
}

/// Writes the full artifact set for a finished run and returns the summary.
pub fn write_run_artifacts(
    dir: &Path,
    cfg: &ScenarioConfig,
    output: &RunOutput,
) -> Result<RunSummary, CoordinatorError> {
    std::fs::create_dir_all(dir).map_err(ArtifactError::Io)?;
    artifacts::write_trajectory_csv(&dir.join(artifacts::TRAJECTORY_FILE), &output.trajectory)?;
    artifacts::write_jsonl(&dir.join(artifacts::STEPS_FILE), &output.steps)?;
    artifacts::write_loss_audit_csv(&dir.join(artifacts::LOSS_AUDIT_FILE), &output.loss_audit)?;

    let gate = cfg.gate_params();
    let gate_report = check_safety_gate(&output.lambda_trace, &gate);

    // empirical Lyapunov certificate over the pre-latch samples
    let (constants, violations, checked) = match (output.rho_hat, cfg.gamma_bar) {
        (Some(rho), Some(gamma_bar)) if rho < 1.0 => {
            let constants = crate::analysis::compute_constants(
                &cfg.follower_weight(),
                gamma_bar,
                rho,
                cfg.horizon,
            );
            let mut violations = 0;
            let mut checked = 0;
            for samples in output.lyapunov.values() {
                let report = crate::analysis::check_lyapunov_decrease(samples, &constants);
                violations += report.decrease_violations.len() + report.sandwich_violations.len();
                checked += report.steps_checked;
            }
            (Some(constants), violations, checked)
        }
        _ => (None, 0, 0),
    };

    let all_latched = output.all_latched(cfg.follower_count());
    let certificate = CertificationReport {
        schema: SCHEMA_VERSION.into(),
        status: output.status.as_str().into(),
        gate_pass: gate_report.pass(),
        gate_threshold: gate.lambda_threshold(),
        max_lambda: gate_report.max_lambda,
        collision: output.collision.clone(),
        rho_hat: output.rho_hat,
        constants,
        lyapunov_violations: violations,
        lyapunov_steps_checked: checked,
        cost_convention: "full_horizon".into(),
        latch_times: output.latch_times.clone(),
    };
    artifacts::write_json(&dir.join(artifacts::CERTIFICATE_FILE), &certificate)?;

    let exit_code = match output.status {
        RunStatus::Completed if certificate.gate_pass && certificate.collision.pass => 0,
        RunStatus::Completed => 3,
        RunStatus::CapHit => 2,
        RunStatus::SafetyAbort => 3,
    };
    let min_h_c = output
        .collision
        .min_h_c
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let summary = RunSummary {
        schema: SCHEMA_VERSION.into(),
        name: cfg.name.clone(),
        seed: cfg.seed,
        status: output.status.as_str().into(),
        steps_executed: output.steps.len(),
        all_latched,
        latch_times: output.latch_times.clone(),
        min_h_c,
        min_h_ij: output.collision.min_h_ij,
        max_lambda: gate_report.max_lambda,
        exit_code,
    };
    artifacts::write_json(&dir.join(artifacts::SUMMARY_FILE), &summary)?;
    Ok(summary)
}
