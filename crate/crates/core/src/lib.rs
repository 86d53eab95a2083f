//! Distributed optimal power flow for radial distribution feeders.
//!
//! Every bus with a DER solves a small local optimal power flow each round,
//! treating its parent as a fixed voltage source and its children as fixed
//! loads, and exchanges boundary voltages and flows with its tree neighbours
//! until the boundary residual falls below tolerance.
//!
//! Module map:
//!
//! - [`network`]: feeder model, file format, synthetic feeders
//! - [`powerflow`]: backward/forward sweep oracle
//! - [`almcore`]: method-of-multipliers solver
//! - [`subproblem`]: the per-node problem and its brute-force oracle
//! - [`coordinator`]: synchronous message-passing rounds
//! - [`certificates`]: sufficient convergence condition evaluators
//! - [`central`]: whole-network baseline
//! - [`trace`]: trace, summary and certificate file formats

pub mod almcore;
pub mod network;
pub mod powerflow;
pub mod subproblem;
pub mod certificates;
pub mod central;
pub mod coordinator;
pub mod trace;
