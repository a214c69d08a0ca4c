//! Discrete-event model of a statically partitioned embedded hypervisor
//! with a pluggable vCPU scheduler, an emulated GICv2 distributor, stage-2
//! memory partitioning and shared-memory inter-VM channels.
//!
//! Start at [`engine::run`] with a [`model::SystemSpec`] loaded through
//! [`config::load_config`].

pub mod cli;
pub mod config;
pub mod engine;
pub mod framework;
pub mod gen;
pub mod ivc;
pub mod memmap;
pub mod metrics;
pub mod model;
pub mod schedulers;
pub mod sweep;
pub mod time;
pub mod trace;
pub mod vgic;

pub use engine::{run, run_with, RunFailure, RunOutput, SimError};
pub use model::{SystemSpec, VmId};
pub use time::Time;
