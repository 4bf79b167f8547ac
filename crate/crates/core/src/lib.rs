//! Distributed MPC simulation library for autonomous landing of follower
//! quadrotors on a moving leader surface vehicle.
//!
//! The library is organized around the per-agent receding-horizon loop:
//! vehicle models ([`models`]), safety constraint geometry ([`constraints`]),
//! EKF trajectory prediction for lost communication ([`ekf`]), the
//! finite-horizon optimal control solver ([`solver`]), the simulated
//! broadcast fabric ([`comm`]), the rendezvous coordinator ([`coordinator`]),
//! and offline/online convergence certification ([`analysis`]).

pub mod analysis;
pub mod artifacts;
pub mod comm;
pub mod config;
pub mod constraints;
pub mod coordinator;
pub mod ekf;
pub mod models;
pub mod solver;

pub use config::ScenarioConfig;
