//! Deterministic event-driven federated learning simulator.
//!
//! The crate is organised around a virtual-time event loop: participants
//! exchange typed messages through a seeded discrete-event queue, a server
//! aggregates client updates under a configurable asynchronous strategy, and
//! every run is reproducible bit for bit from `(config, seed)`.

pub mod analytics;
pub mod autotune;
pub mod config;
pub mod datasynth;
pub mod fedcore;
pub mod learnkit;
pub mod msgflow;
pub mod runlog;
pub mod simnet;
