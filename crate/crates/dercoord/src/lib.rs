//! Fleet coordination for prosumer-owned energy resources.
//!
//! A fleet of prosumers (HVAC, shiftable appliances, rooftop renewables,
//! battery storage) schedules its devices and trades energy pairwise over a
//! daily horizon. The joint cost-minimization problem is solved two ways:
//!
//! - centrally, as one quadratic program (`subproblem::solve_dcm_central`),
//!   used as the reference oracle, and
//! - distributed, by consensus ADMM (`coordinator::run_admm`) where each
//!   prosumer solves only its local subproblem and a deterministic smart
//!   contract reconciles the pairwise trades. The contract runs either
//!   in-memory or on a simulated proof-of-authority chain (`ledger`).
//!
//! `harness` loads and generates scenarios, and writes run reports.

pub mod coordinator;
pub mod harness;
pub mod ledger;
pub mod model;
pub mod subproblem;
