//! Run artifacts: trajectory CSV, step-record JSONL, loss audit CSV,
//! certification report JSON, and run summary JSON. Column sets are
//! versioned constants with golden tests so downstream tooling can rely on
//! them.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{CollisionReport, ConvergenceConstants};
use crate::comm::LossEvent;

pub const SCHEMA_VERSION: &str = "v1";

/// Column set of trajectory.csv. Leader rows leave s6..s8 and u2..u3 empty.
pub const TRAJECTORY_HEADER: [&str; 16] = [
    "t", "agent", "role", "s0", "s1", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "u0", "u1", "u2",
    "u3",
];

pub const LOSS_AUDIT_HEADER: [&str; 4] = ["t", "from", "to", "delivered"];

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const LOSS_AUDIT_FILE: &str = "loss_audit.csv";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("artifact json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("artifact malformed: {0}")]
    Malformed(String),
}

/// One row of the trajectory table: the state at step t and the input applied
/// at step t.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: usize,
    pub agent: usize,
    pub role: String,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
}

impl TrajectoryRow {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.state[0], self.state[1], self.state[2])
    }
}

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<(), ArtifactError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAJECTORY_HEADER)?;
    for row in rows {
        let mut record: Vec<String> = Vec::with_capacity(TRAJECTORY_HEADER.len());
        record.push(row.t.to_string());
        record.push(row.agent.to_string());
        record.push(row.role.clone());
        for i in 0..9 {
            record.push(row.state.get(i).map_or(String::new(), |v| format!("{v:.12e}")));
        }
        for i in 0..4 {
            record.push(row.input.get(i).map_or(String::new(), |v| format!("{v:.12e}")));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>, ArtifactError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(TRAJECTORY_HEADER.iter().copied()) {
        return Err(ArtifactError::Malformed(format!(
            "unexpected trajectory header: {headers:?}"
        )));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let parse_num = |s: &str, what: &str| -> Result<f64, ArtifactError> {
            s.parse::<f64>()
                .map_err(|_| ArtifactError::Malformed(format!("bad {what} value '{s}'")))
        };
        let t = record[0]
            .parse::<usize>()
            .map_err(|_| ArtifactError::Malformed(format!("bad t '{}'", &record[0])))?;
        let agent = record[1]
            .parse::<usize>()
            .map_err(|_| ArtifactError::Malformed(format!("bad agent '{}'", &record[1])))?;
        let role = record[2].to_string();
        let mut state = Vec::new();
        for i in 3..12 {
            let s = &record[i];
            if s.is_empty() {
                break;
            }
            state.push(parse_num(s, "state")?);
        }
        let mut input = Vec::new();
        for i in 12..16 {
            let s = &record[i];
            if s.is_empty() {
                break;
            }
            input.push(parse_num(s, "input")?);
        }
        rows.push(TrajectoryRow { t, agent, role, state, input });
    }
    Ok(rows)
}

pub fn write_loss_audit_csv(path: &Path, events: &[LossEvent]) -> Result<(), ArtifactError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOSS_AUDIT_HEADER)?;
    for e in events {
        w.write_record(&[
            e.t.to_string(),
            e.from.to_string(),
            e.to.to_string(),
            if e.delivered { "delivered".into() } else { "dropped".to_string() },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes items as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ArtifactError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ArtifactError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut items = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Machine-checkable certificates of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationReport {
    pub schema: String,
    pub status: String,
    /// Probabilistic landing gate.
    pub gate_pass: bool,
    pub gate_threshold: f64,
    pub max_lambda: f64,
    pub collision: CollisionReport,
    /// Empirical contraction factor measured on the run.
    pub rho_hat: Option<f64>,
    pub constants: Option<ConvergenceConstants>,
    pub lyapunov_violations: usize,
    pub lyapunov_steps_checked: usize,
    /// Cost convention used for the value-function samples.
    pub cost_convention: String,
    pub latch_times: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub name: String,
    pub seed: Option<u64>,
    pub status: String,
    pub steps_executed: usize,
    pub all_latched: bool,
    pub latch_times: BTreeMap<usize, usize>,
    pub min_h_c: f64,
    pub min_h_ij: Option<f64>,
    pub max_lambda: f64,
    pub exit_code: i32,
}
