use thiserror::Error;

use crate::types::{ConfigViolation, TaskKey};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid configuration: {}", join_violations(.0))]
    InvalidConfig(Vec<ConfigViolation>),

    #[error("slot conflict on worker {worker} at slot {slot}")]
    Conflict { worker: u32, slot: u32 },

    #[error("schedule carries no timing; run the simulator first")]
    UntimedSchedule,

    #[error("cyclic dependency: {} task(s) can never start, first blocked {first:?}", .blocked)]
    CyclicDependency { blocked: usize, first: Option<TaskKey> },

    #[error("no (W, D, B) configuration fits in memory, with or without recomputation")]
    NoFeasibleConfig,

    #[error("missing activation for {0:?}")]
    MissingActivation(TaskKey),

    #[error("weight version {version} for {key:?} is no longer stashed")]
    VersionMismatch { key: TaskKey, version: u32 },

    #[error("{0}")]
    InvalidArgument(String),
}

fn join_violations(v: &[ConfigViolation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
