//! Fault-resilient communicators for embarrassingly parallel programs,
//! running on a deterministic simulated process world.
//!
//! Layers, bottom up:
//! - [`simnet`]: crash-stop processes, messages, fault injection, traces.
//! - [`ftcomm`]: fault-tolerant communicators (shrink, agree, revoke, reform).
//! - [`flat`]: transparent substitution with agree/shrink/retry repair.
//! - [`hier`]: local/global/POV topology and the master repair procedure.
//! - [`cost`]: analytical repair-cost model and sub-communicator sizing.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cost;
pub mod flat;
pub mod ftcomm;
pub mod hier;
pub mod simnet;
