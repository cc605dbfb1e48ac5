//! Cooperative two-agent transport testbed.
//!
//! The crate is layered the same way the decision pipeline is composed:
//! [`cognition`] turns an occupancy view into a shared anchor sequence,
//! [`mdp`] and [`marl`] learn residual task-space commands on top of a
//! nominal anchor tracker, and [`sim`] realizes those commands with a
//! fast first-order tracking proxy.

pub mod cognition;
pub mod env;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod marl;
pub mod mdp;
pub mod neural;
pub mod replay;
pub mod scenario;
pub mod sim;
