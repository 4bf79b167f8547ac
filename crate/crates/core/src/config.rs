//! Scenario configuration: TOML round-trip, validation (including the
//! landing-geometry assumption and the horizon advisory), and derivation of
//! the runtime parameter structures.

use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{GateParams, lambda_ratio};
use crate::comm::LossSchedule;
use crate::constraints::{
    diagonal_assignment, funnel_floor, make_hexagon_offsets, validate_landing_geometry,
    CollisionParams, FunnelParams, LandingGeometry,
};

/// Hover clearance above the funnel surface for generated landing slots.
pub const LANDING_CLEARANCE: f64 = 0.02;
use crate::ekf::{ConfidenceParams, NoiseConfig};
use crate::models::{ModelParams, FOLLOWER_DIM, LEADER_DIM};
use crate::solver::SolverOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot parse track file: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

/// How follower initial states are specified.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FollowerSpawn {
    /// Equidistant ring: state [r cos(2 i pi / M), r sin(2 i pi / M), alt, 0_6].
    Ring { count: usize, radius: f64, altitude: f64 },
    Explicit { states: Vec<Vec<f64>> },
}

impl FollowerSpawn {
    pub fn count(&self) -> usize {
        match self {
            FollowerSpawn::Ring { count, .. } => *count,
            FollowerSpawn::Explicit { states } => states.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Landing slot i goes to the follower that starts diagonally opposite.
    #[default]
    Diagonal,
    Identity,
}

/// Landing offset layout on the platform.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LandingSpec {
    Circle {
        radius: f64,
        #[serde(default)]
        assignment: Assignment,
    },
    Explicit { offsets: Vec<[f64; 3]> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub platform_radius: f64,
    pub safe_radius: f64,
    pub landing: LandingSpec,
}

/// The leader's exogenous reference path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeaderReference {
    Static {
        x: f64,
        y: f64,
        #[serde(default)]
        heading: f64,
    },
    Line {
        #[serde(default)]
        x: f64,
        #[serde(default)]
        y: f64,
        #[serde(default)]
        heading: f64,
        speed: f64,
    },
    Arc {
        #[serde(default)]
        x: f64,
        #[serde(default)]
        y: f64,
        #[serde(default)]
        heading: f64,
        speed: f64,
        yaw_rate: f64,
    },
    TrackFile { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeaderConfig {
    /// Initial state [px, py, pz, psi, nu, r]; pz must be 0.
    pub initial: Vec<f64>,
    pub reference: LeaderReference,
}

fn default_measurement_noise() -> f64 {
    0.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub leader: NoiseConfig,
    pub follower: NoiseConfig,
    /// Std of Gaussian noise injected into simulated position measurements
    /// (0 = noiseless sensors). The filter's assumed noise is set above.
    #[serde(default = "default_measurement_noise")]
    pub measurement_noise_std: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            leader: NoiseConfig::default_leader(),
            follower: NoiseConfig::default_follower(),
            measurement_noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceConfig {
    None,
    /// Uniform draws from the per-component boxes, seeded.
    Seeded {
        follower: Vec<f64>,
        leader: Vec<f64>,
    },
    /// Replayed from CSV: columns t, agent, w0..w8 (leader rows use w0..w5).
    Replay { path: String },
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        DisturbanceConfig::None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub abort_dwell: usize,
    /// Effective platform radius available to an offset landing point;
    /// defaults to platform_radius - max ||c_i|| + safe_radius.
    pub effective_platform_radius: Option<f64>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { abort_dwell: 5, effective_platform_radius: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MitigationConfig {
    /// Consecutive stalled steps before a deadlock perturbation fires.
    pub stall_steps: usize,
    /// A step is "stalled" when the cost decrease stays below this.
    pub cost_decrease_tol: f64,
    /// Magnitude of the one-step tangential reference perturbation (m).
    pub perturbation: f64,
    /// Ceiling on the staleness-driven collision radius inflation (m).
    pub inflation_cap: f64,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self { stall_steps: 10, cost_decrease_tol: 1e-3, perturbation: 0.3, inflation_cap: 0.25 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Weights {
    pub follower: Vec<f64>,
    pub leader: Vec<f64>,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_step_cap() -> usize {
    40
}

fn default_confidence() -> f64 {
    0.95
}

/// Full experiment description. All tunables live here; the shipped preset
/// carries the reference scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub horizon: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub v_n_max: f64,
    /// Certified upper sandwich constant; when absent, derived from v_n_max
    /// and the realized initial error.
    #[serde(default)]
    pub gamma_bar: Option<f64>,
    #[serde(default = "default_step_cap")]
    pub step_cap: usize,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub model: ModelParams,
    pub weights: Weights,
    pub funnel: FunnelParams,
    pub collision: CollisionParams,
    pub geometry: GeometryConfig,
    pub followers: FollowerSpawn,
    pub leader: LeaderConfig,
    #[serde(default)]
    pub loss: LossSchedule,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub disturbance: DisturbanceConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub mitigation: MitigationConfig,
    /// Directory for resolving relative file references; set on load.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

pub const HEX6_PRESET: &str = include_str!("../presets/hex6.toml");

/// Validation outcome for a well-formed config: derived constants and
/// non-fatal notes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Advisory {
    /// Minimal admissible horizon N_0 = gamma_bar * lambda_ratio (when
    /// gamma_bar is configured).
    pub n0: Option<f64>,
    pub horizon: usize,
    pub notes: Vec<String>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(|p| p.to_path_buf());
        Ok(cfg)
    }

    pub fn preset_hex6() -> Self {
        Self::from_toml_str(HEX6_PRESET).expect("shipped preset parses")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn follower_count(&self) -> usize {
        self.followers.count()
    }

    pub fn follower_weight(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.weights.follower.clone()))
    }

    pub fn leader_weight(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.weights.leader.clone()))
    }

    pub fn confidence_params(&self) -> ConfidenceParams {
        ConfidenceParams::new(self.confidence)
    }

    /// Landing offsets in platform-slot order (before assignment).
    ///
    /// Circle layouts place the vertical component just above the funnel
    /// surface at the landing radius, so a follower holding its slot keeps a
    /// positive funnel margin even with a slightly stale platform estimate.
    pub fn landing_offsets(&self) -> Vec<[f64; 3]> {
        match &self.geometry.landing {
            LandingSpec::Circle { radius, .. } => {
                let z = funnel_floor(*radius, &self.funnel) + LANDING_CLEARANCE;
                let mut slots = make_hexagon_offsets(self.follower_count(), *radius);
                for s in &mut slots {
                    s[2] = z;
                }
                slots
            }
            LandingSpec::Explicit { offsets } => offsets.clone(),
        }
    }

    /// Landing offset assigned to each follower (by follower index).
    pub fn assigned_offsets(&self) -> Vec<[f64; 3]> {
        let slots = self.landing_offsets();
        let assignment = match &self.geometry.landing {
            LandingSpec::Circle { assignment, .. } => *assignment,
            LandingSpec::Explicit { .. } => Assignment::Identity,
        };
        match assignment {
            Assignment::Identity => slots,
            Assignment::Diagonal => {
                let perm = diagonal_assignment(slots.len());
                (0..slots.len()).map(|i| slots[perm[i]]).collect()
            }
        }
    }

    pub fn landing_geometry(&self) -> LandingGeometry {
        LandingGeometry {
            platform_radius: self.geometry.platform_radius,
            safe_radius: self.geometry.safe_radius,
            offsets: self.landing_offsets(),
        }
    }

    pub fn gate_params(&self) -> GateParams {
        let effective = self.gate.effective_platform_radius.unwrap_or_else(|| {
            let max_offset = self
                .landing_offsets()
                .iter()
                .map(|c| (c[0] * c[0] + c[1] * c[1]).sqrt())
                .fold(0.0f64, f64::max);
            self.geometry.platform_radius - max_offset + self.geometry.safe_radius
        });
        GateParams {
            confidence: self.confidence_params(),
            platform_radius: effective,
            safe_radius: self.geometry.safe_radius,
            abort_dwell: self.gate.abort_dwell,
        }
    }

    pub fn initial_followers(&self) -> Vec<DVector<f64>> {
        match &self.followers {
            FollowerSpawn::Ring { count, radius, altitude } => (0..*count)
                .map(|i| {
                    let angle = 2.0 * std::f64::consts::PI * (i as f64) / (*count as f64);
                    let mut x = DVector::zeros(FOLLOWER_DIM);
                    x[0] = radius * angle.cos();
                    x[1] = radius * angle.sin();
                    x[2] = *altitude;
                    x
                })
                .collect(),
            FollowerSpawn::Explicit { states } => {
                states.iter().map(|s| DVector::from_vec(s.clone())).collect()
            }
        }
    }

    pub fn initial_leader(&self) -> DVector<f64> {
        DVector::from_vec(self.leader.initial.clone())
    }

    pub fn resolve_leader_reference(&self) -> Result<ResolvedLeaderRef, ConfigError> {
        Ok(match &self.leader.reference {
            LeaderReference::Static { x, y, heading } => {
                ResolvedLeaderRef::Static { x: *x, y: *y, heading: *heading }
            }
            LeaderReference::Line { x, y, heading, speed } => {
                ResolvedLeaderRef::Line { x: *x, y: *y, heading: *heading, speed: *speed }
            }
            LeaderReference::Arc { x, y, heading, speed, yaw_rate } => {
                ResolvedLeaderRef::Arc {
                    x: *x,
                    y: *y,
                    heading: *heading,
                    speed: *speed,
                    yaw_rate: *yaw_rate,
                }
            }
            LeaderReference::TrackFile { path } => {
                let full = match &self.base_dir {
                    Some(dir) => dir.join(path),
                    None => PathBuf::from(path),
                };
                let file = std::fs::File::open(&full)?;
                ResolvedLeaderRef::Track(parse_leader_track(file)?)
            }
        })
    }

    fn stochastic(&self) -> bool {
        self.loss.drop_probability > 0.0
            || matches!(self.disturbance, DisturbanceConfig::Seeded { .. })
            || self.predictor.measurement_noise_std > 0.0
    }

    /// Full invariant sweep. Violations are collected, not short-circuited.
    pub fn validate(&self) -> Result<Advisory, ConfigError> {
        let mut errors = Vec::new();
        let mut notes = Vec::new();

        if self.horizon < 1 {
            errors.push("horizon must be >= 1".into());
        }
        if self.model.dt <= 0.0 {
            errors.push("model.dt must be positive".into());
        }
        if self.epsilon <= 0.0 {
            errors.push("epsilon must be positive".into());
        }
        if self.v_n_max <= 0.0 {
            errors.push("v_n_max must be positive".into());
        }
        if !(0.0 < self.confidence && self.confidence < 1.0) {
            errors.push(format!("confidence {} outside (0,1)", self.confidence));
        }
        if let Some(g) = self.gamma_bar {
            if g < 1.0 {
                errors.push(format!("gamma_bar {g} must be >= 1"));
            }
        }

        if self.weights.follower.len() != FOLLOWER_DIM {
            errors.push(format!(
                "weights.follower needs {} entries, got {}",
                FOLLOWER_DIM,
                self.weights.follower.len()
            ));
        }
        if self.weights.leader.len() != LEADER_DIM {
            errors.push(format!(
                "weights.leader needs {} entries, got {}",
                LEADER_DIM,
                self.weights.leader.len()
            ));
        }
        for (name, w) in [("follower", &self.weights.follower), ("leader", &self.weights.leader)] {
            if w.iter().any(|&v| v <= 0.0) {
                errors.push(format!("weights.{name} must be strictly positive (diagonal PD)"));
            }
        }

        if let Err(e) = self.funnel.validate() {
            errors.push(e);
        }
        if let Err(e) = self.collision.validate() {
            errors.push(e);
        }
        if let Err(e) = self.loss.validate() {
            errors.push(e);
        }

        if self.leader.initial.len() != LEADER_DIM {
            errors.push(format!(
                "leader.initial needs {} entries, got {}",
                LEADER_DIM,
                self.leader.initial.len()
            ));
        } else if self.leader.initial[2] != 0.0 {
            errors.push("leader.initial pz must be 0".into());
        }

        if let FollowerSpawn::Explicit { states } = &self.followers {
            for (i, s) in states.iter().enumerate() {
                if s.len() != FOLLOWER_DIM {
                    errors.push(format!(
                        "followers.states[{i}] needs {} entries, got {}",
                        FOLLOWER_DIM,
                        s.len()
                    ));
                }
            }
        }
        if self.follower_count() == 0 {
            errors.push("at least one follower is required".into());
        }

        let offsets = self.landing_offsets();
        if offsets.len() != self.follower_count() {
            errors.push(format!(
                "{} landing offsets for {} followers",
                offsets.len(),
                self.follower_count()
            ));
        }
        let geometry = self.landing_geometry();
        let violations = validate_landing_geometry(&geometry, &self.collision);
        for v in violations {
            errors.push(format!("landing geometry: {v}"));
        }

        if self.stochastic() && self.seed.is_none() {
            errors.push("seed is required when any stochastic element is enabled".into());
        }

        if matches!(self.disturbance, DisturbanceConfig::Seeded { ref follower, ref leader }
            if follower.len() != FOLLOWER_DIM || leader.len() != LEADER_DIM)
        {
            errors.push("disturbance boxes must match the state dimensions".into());
        }

        // horizon advisory (non-fatal)
        let n0 = if self.weights.follower.len() == FOLLOWER_DIM
            && self.weights.follower.iter().all(|&v| v > 0.0)
        {
            self.gamma_bar.map(|g| g * lambda_ratio(&self.follower_weight()))
        } else {
            None
        };
        if let Some(n0) = n0 {
            if (self.horizon as f64) > n0 {
                notes.push(format!(
                    "horizon N = {} exceeds the minimal admissible N_0 = {n0:.4}",
                    self.horizon
                ));
            } else {
                notes.push(format!(
                    "WARNING: horizon N = {} does not exceed N_0 = {n0:.4}; the convergence certificate cannot hold",
                    self.horizon
                ));
            }
        }

        if errors.is_empty() {
            Ok(Advisory { n0, horizon: self.horizon, notes })
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }
}

/// Recorded leader path: columns t, p_x, p_y, psi with strictly increasing t.
#[derive(Debug, Clone)]
pub struct LeaderTrack {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub psis: Vec<f64>,
}

impl LeaderTrack {
    /// Leader reference state at a continuous time: positions/heading
    /// linearly interpolated (clamped at the ends), speed and yaw rate from
    /// local differences.
    pub fn state_at(&self, time: f64) -> DVector<f64> {
        let n = self.times.len();
        let mut x = DVector::zeros(LEADER_DIM);
        if n == 1 {
            x[0] = self.xs[0];
            x[1] = self.ys[0];
            x[3] = self.psis[0];
            return x;
        }
        let idx = match self.times.iter().position(|&tt| tt > time) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        };
        let (t0, t1) = (self.times[idx], self.times[idx + 1]);
        let frac = ((time - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let lerp = |a: f64, b: f64| a + frac * (b - a);
        x[0] = lerp(self.xs[idx], self.xs[idx + 1]);
        x[1] = lerp(self.ys[idx], self.ys[idx + 1]);
        x[3] = lerp(self.psis[idx], self.psis[idx + 1]);
        let dt = t1 - t0;
        let dx = self.xs[idx + 1] - self.xs[idx];
        let dy = self.ys[idx + 1] - self.ys[idx];
        x[4] = (dx * dx + dy * dy).sqrt() / dt;
        x[5] = (self.psis[idx + 1] - self.psis[idx]) / dt;
        x
    }
}

/// Parses a leader track CSV (header t,p_x,p_y,psi).
pub fn parse_leader_track(reader: impl Read) -> Result<LeaderTrack, ConfigError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["t", "p_x", "p_y", "psi"];
    let idx: Vec<usize> = expected
        .iter()
        .map(|name| {
            headers.iter().position(|h| h == *name).ok_or_else(|| {
                ConfigError::Invalid(vec![format!("track file is missing column '{name}'")])
            })
        })
        .collect::<Result<_, _>>()?;

    let mut track = LeaderTrack { times: vec![], xs: vec![], ys: vec![], psis: vec![] };
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let mut vals = [0.0f64; 4];
        for (slot, &col) in idx.iter().enumerate() {
            let raw = record.get(col).unwrap_or("");
            vals[slot] = raw.parse::<f64>().map_err(|_| {
                ConfigError::Invalid(vec![format!(
                    "track row {}: cannot parse '{}' in column '{}'",
                    row + 2,
                    raw,
                    expected[slot]
                )])
            })?;
            if !vals[slot].is_finite() {
                return Err(ConfigError::Invalid(vec![format!(
                    "track row {}: non-finite value in column '{}'",
                    row + 2,
                    expected[slot]
                )]));
            }
        }
        if let Some(&last) = track.times.last() {
            if vals[0] <= last {
                return Err(ConfigError::Invalid(vec![format!(
                    "track row {}: time {} not strictly increasing",
                    row + 2,
                    vals[0]
                )]));
            }
        }
        track.times.push(vals[0]);
        track.xs.push(vals[1]);
        track.ys.push(vals[2]);
        track.psis.push(vals[3]);
    }
    if track.times.is_empty() {
        return Err(ConfigError::Invalid(vec!["track file has no data rows".into()]));
    }
    Ok(track)
}

/// Leader reference path resolved to closed forms or a loaded track.
#[derive(Debug, Clone)]
pub enum ResolvedLeaderRef {
    Static { x: f64, y: f64, heading: f64 },
    Line { x: f64, y: f64, heading: f64, speed: f64 },
    Arc { x: f64, y: f64, heading: f64, speed: f64, yaw_rate: f64 },
    Track(LeaderTrack),
}

impl ResolvedLeaderRef {
    /// Leader reference state at discrete step t.
    pub fn state_at_step(&self, t: usize, dt: f64) -> DVector<f64> {
        let tau = t as f64 * dt;
        let mut x = DVector::zeros(LEADER_DIM);
        match self {
            ResolvedLeaderRef::Static { x: px, y: py, heading } => {
                x[0] = *px;
                x[1] = *py;
                x[3] = *heading;
            }
            ResolvedLeaderRef::Line { x: px, y: py, heading, speed } => {
                x[0] = px + speed * tau * heading.cos();
                x[1] = py + speed * tau * heading.sin();
                x[3] = *heading;
                x[4] = *speed;
            }
            ResolvedLeaderRef::Arc { x: px, y: py, heading, speed, yaw_rate } => {
                let psi = heading + yaw_rate * tau;
                if yaw_rate.abs() < 1e-12 {
                    x[0] = px + speed * tau * heading.cos();
                    x[1] = py + speed * tau * heading.sin();
                } else {
                    x[0] = px + speed / yaw_rate * (psi.sin() - heading.sin());
                    x[1] = py - speed / yaw_rate * (psi.cos() - heading.cos());
                }
                x[3] = psi;
                x[4] = *speed;
                x[5] = *yaw_rate;
            }
            ResolvedLeaderRef::Track(track) => return track.state_at(tau),
        }
        x
    }

    /// Position component of the reference at discrete step t.
    pub fn position_at_step(&self, t: usize, dt: f64) -> Vector3<f64> {
        let x = self.state_at_step(t, dt);
        Vector3::new(x[0], x[1], x[2])
    }
}
