//! Simulated broadcast fabric: one-step delivery latency, per-directed-link
//! loss schedules (blackout windows and optional i.i.d. drops), and each
//! agent's data collection of the newest trajectory per peer.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A broadcast horizon of predicted positions, stamped with its birth step.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedTrajectory {
    pub sender: usize,
    /// Step at which the horizon was computed.
    pub birth: usize,
    /// N+1 predicted positions.
    pub positions: Vec<Vector3<f64>>,
}

/// The newest trajectory an agent holds for one peer, with its age.
#[derive(Debug, Clone)]
pub struct PeerData {
    pub trajectory: SharedTrajectory,
    /// k = t - t_a at collection time.
    pub staleness: usize,
}

/// D_i(t): newest trajectory per peer, keyed by sender id.
pub type DataCollection = BTreeMap<usize, PeerData>;

/// A half-open blackout interval [start, end); `end = None` is permanent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlackoutWindow {
    pub start: usize,
    #[serde(default)]
    pub end: Option<usize>,
}

impl BlackoutWindow {
    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && self.end.map_or(true, |e| t < e)
    }
}

/// Loss rule for directed links from one sender. `to = None` matches every
/// receiver (e.g. a muted sender).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkLoss {
    pub from: usize,
    #[serde(default)]
    pub to: Option<usize>,
    #[serde(default)]
    pub windows: Vec<BlackoutWindow>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossSchedule {
    #[serde(default)]
    pub links: Vec<LinkLoss>,
    /// Additional i.i.d. drop probability applied to every otherwise-open link.
    #[serde(default)]
    pub drop_probability: f64,
}

impl LossSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(format!("drop_probability {} outside [0,1]", self.drop_probability));
        }
        for link in &self.links {
            for w in &link.windows {
                if let Some(end) = w.end {
                    if end <= w.start {
                        return Err(format!(
                            "blackout window [{}, {}) on link {} -> {:?} is empty",
                            w.start, end, link.from, link.to
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn blocked(&self, from: usize, to: usize, t: usize) -> bool {
        self.links.iter().any(|l| {
            l.from == from && l.to.map_or(true, |r| r == to) && l.windows.iter().any(|w| w.contains(t))
        })
    }
}

/// One audit entry per attempted directed delivery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossEvent {
    pub t: usize,
    pub from: usize,
    pub to: usize,
    pub delivered: bool,
}

/// The fabric is the single synchronization point of a step: broadcasts are
/// staged during the step and become visible after `commit_step` (one-step
/// latency). The sequential first iteration uses `deliver_now` instead.
pub struct CommFabric {
    schedule: LossSchedule,
    n_agents: usize,
    seed: u64,
    staged: Vec<(usize, SharedTrajectory)>,
    mailboxes: Vec<BTreeMap<usize, SharedTrajectory>>,
    audit: Vec<LossEvent>,
}

impl CommFabric {
    pub fn new(schedule: LossSchedule, n_agents: usize, seed: u64) -> Self {
        Self {
            schedule,
            n_agents,
            seed,
            staged: Vec::new(),
            mailboxes: vec![BTreeMap::new(); n_agents],
            audit: Vec::new(),
        }
    }

    /// Random drops are keyed by (t, from, to) so the outcome is independent
    /// of call order — determinism does not depend on scheduling.
    fn random_drop(&self, t: usize, from: usize, to: usize) -> bool {
        if self.schedule.drop_probability <= 0.0 {
            return false;
        }
        let key = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((t as u64) << 32)
            .wrapping_add((from as u64) << 16)
            .wrapping_add(to as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.gen::<f64>() < self.schedule.drop_probability
    }

    fn link_delivers(&mut self, t: usize, from: usize, to: usize) -> bool {
        let delivered = !self.schedule.blocked(from, to, t) && !self.random_drop(t, from, to);
        self.audit.push(LossEvent { t, from, to, delivered });
        delivered
    }

    /// Stages a broadcast at step t; it becomes visible to peers at t+1.
    pub fn broadcast(&mut self, traj: SharedTrajectory, t: usize) {
        debug_assert_eq!(traj.birth, t);
        for to in 0..self.n_agents {
            if to == traj.sender {
                continue;
            }
            if self.link_delivers(t, traj.sender, to) {
                self.staged.push((to, traj.clone()));
            }
        }
    }

    /// Immediate delivery for the sequential first iteration: the same loss
    /// rules apply, but open-link messages land in peer mailboxes at once.
    pub fn deliver_now(&mut self, traj: SharedTrajectory, t: usize) {
        for to in 0..self.n_agents {
            if to == traj.sender {
                continue;
            }
            if self.link_delivers(t, traj.sender, to) {
                self.mailboxes[to].insert(traj.sender, traj.clone());
            }
        }
    }

    /// Commits staged messages at the step barrier.
    pub fn commit_step(&mut self) {
        for (to, traj) in self.staged.drain(..) {
            self.mailboxes[to].insert(traj.sender, traj);
        }
    }

    /// Returns the newest trajectory per peer visible to `agent` at step t.
    pub fn collect(&self, agent: usize, t: usize) -> DataCollection {
        self.mailboxes[agent]
            .iter()
            .map(|(&sender, traj)| {
                (
                    sender,
                    PeerData { trajectory: traj.clone(), staleness: t.saturating_sub(traj.birth) },
                )
            })
            .collect()
    }

    pub fn audit(&self) -> &[LossEvent] {
        &self.audit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(sender: usize, birth: usize) -> SharedTrajectory {
        SharedTrajectory {
            sender,
            birth,
            positions: vec![Vector3::new(sender as f64, birth as f64, 0.0); 21],
        }
    }

    #[test]
    fn lossless_broadcast_arrives_with_staleness_one() {
        let mut fabric = CommFabric::new(LossSchedule::default(), 3, 0);
        fabric.broadcast(traj(0, 5), 5);
        // not visible before the barrier
        assert!(fabric.collect(1, 5).is_empty());
        fabric.commit_step();
        let d = fabric.collect(1, 6);
        assert_eq!(d.len(), 1);
        assert_eq!(d[&0].staleness, 1);
        assert_eq!(d[&0].trajectory.birth, 5);
        // sender does not receive its own broadcast
        assert!(fabric.collect(0, 6).is_empty());
    }

    #[test]
    fn blackout_window_blocks_and_staleness_grows() {
        let schedule = LossSchedule {
            links: vec![LinkLoss {
                from: 1,
                to: None,
                windows: vec![BlackoutWindow { start: 10, end: None }],
            }],
            drop_probability: 0.0,
        };
        let mut fabric = CommFabric::new(schedule, 3, 0);
        fabric.broadcast(traj(1, 9), 9);
        fabric.commit_step();
        assert_eq!(fabric.collect(0, 10)[&1].staleness, 1);
        // blocked from t = 10 on: peers keep the t = 9 trajectory
        for t in 10..15 {
            fabric.broadcast(traj(1, t), t);
            fabric.commit_step();
        }
        let d = fabric.collect(0, 15);
        assert_eq!(d[&1].trajectory.birth, 9);
        assert_eq!(d[&1].staleness, 6);
        // audit records the dropped attempts
        let dropped = fabric.audit().iter().filter(|e| e.from == 1 && !e.delivered).count();
        assert_eq!(dropped, 10); // 5 steps x 2 receivers
    }

    #[test]
    fn permanent_leader_mute_leaves_inbox_empty() {
        let schedule = LossSchedule {
            links: vec![LinkLoss {
                from: 0,
                to: None,
                windows: vec![BlackoutWindow { start: 0, end: None }],
            }],
            drop_probability: 0.0,
        };
        let mut fabric = CommFabric::new(schedule, 2, 0);
        for t in 0..20 {
            fabric.broadcast(traj(0, t), t);
            fabric.commit_step();
        }
        assert!(fabric.collect(1, 20).get(&0).is_none());
    }

    #[test]
    fn directed_loss_is_asymmetric() {
        let schedule = LossSchedule {
            links: vec![LinkLoss {
                from: 0,
                to: Some(1),
                windows: vec![BlackoutWindow { start: 0, end: None }],
            }],
            drop_probability: 0.0,
        };
        let mut fabric = CommFabric::new(schedule, 3, 0);
        fabric.broadcast(traj(0, 0), 0);
        fabric.broadcast(traj(1, 0), 0);
        fabric.commit_step();
        assert!(fabric.collect(1, 1).get(&0).is_none());
        assert!(fabric.collect(2, 1).get(&0).is_some());
        assert!(fabric.collect(0, 1).get(&1).is_some());
    }

    #[test]
    fn deliver_now_is_visible_within_the_step()
    {
        let mut fabric = CommFabric::new(LossSchedule::default(), 3, 0);
        fabric.deliver_now(traj(0, 0), 0);
        let d = fabric.collect(1, 0);
        assert_eq!(d[&0].staleness, 0);
    }

    #[test]
    fn random_drops_are_deterministic_and_order_independent() {
        let schedule = LossSchedule { links: vec![], drop_probability: 0.5 };
        let run = |order: &[usize]| {
            let mut fabric = CommFabric::new(schedule.clone(), 4, 42);
            for t in 0..50 {
                for &s in order {
                    fabric.broadcast(traj(s, t), t);
                }
                fabric.commit_step();
            }
            let mut pattern: Vec<(usize, usize, usize, bool)> =
                fabric.audit().iter().map(|e| (e.t, e.from, e.to, e.delivered)).collect();
            pattern.sort();
            pattern
        };
        let a = run(&[0, 1, 2, 3]);
        let b = run(&[3, 1, 0, 2]);
        assert_eq!(a, b);
        let delivered = a.iter().filter(|e| e.3).count();
        let total = a.len();
        let rate = delivered as f64 / total as f64;
        assert!((rate - 0.5).abs() < 0.1, "delivery rate {rate}");
    }

    #[test]
    fn staleness_law_and_newest_wins() {
        let mut fabric = CommFabric::new(LossSchedule::default(), 2, 0);
        fabric.broadcast(traj(0, 3), 3);
        fabric.commit_step();
        fabric.broadcast(traj(0, 4), 4);
        fabric.commit_step();
        let d = fabric.collect(1, 7);
        assert_eq!(d[&0].trajectory.birth, 4);
        assert_eq!(d[&0].staleness, 3);
    }

    #[test]
    fn schedule_validation() {
        let bad = LossSchedule {
            links: vec![LinkLoss {
                from: 0,
                to: None,
                windows: vec![BlackoutWindow { start: 5, end: Some(5) }],
            }],
            drop_probability: 0.0,
        };
        assert!(bad.validate().is_err());
        assert!(LossSchedule { links: vec![], drop_probability: 1.5 }.validate().is_err());
        assert!(LossSchedule::default().validate().is_ok());
    }
}
