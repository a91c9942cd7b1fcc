//! Pipeline-parallel training schedules: generation, static analysis,
//! simulation, an analytic performance model with a planner, and a
//! numerical replay that checks synchronous schedules against plain SGD.
//!
//! ```
//! use pipesim_core::{analysis, dessim, schedgen, CostProfile, PipelineConfig, Rational, Scheme};
//!
//! let cfg = PipelineConfig::new(Scheme::Chimera, 4, 4);
//! let s = schedgen::gen_schedule(&cfg).unwrap();
//! let timed = dessim::timed_compute(&s, &CostProfile::default()).unwrap();
//! assert_eq!(analysis::bubble_ratio(&timed).unwrap(), Rational::new(1, 4));
//! ```

pub mod analysis;
pub mod dessim;
pub mod error;
pub mod graph;
pub mod oracle;
pub mod perfmodel;
pub mod render;
pub mod schedgen;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    validate_config, AnalysisReport, ConfigViolation, CostProfile, Interval, PipelineConfig, Rational, Scaling,
    Schedule, Scheme, Task, TaskKey, TaskKind,
};

/// Static and simulated summary of one plan. The bubble ratio comes from a
/// compute-only simulation; `T_simulated` uses `profile` and `policy`.
pub fn analyze(config: &PipelineConfig, profile: &CostProfile, policy: dessim::SyncPolicy) -> Result<AnalysisReport> {
    let s = schedgen::gen_schedule(config)?;
    let compute = dessim::timed_compute(&s, &profile.without_communication())?;
    let bubble_ratio = analysis::bubble_ratio(&compute)?;
    let mem = analysis::memory_profile(&s, profile);
    let pred = perfmodel::predict(config, profile)?;
    let sim = dessim::simulate(&s, profile, policy)?;
    Ok(AnalysisReport {
        config: *config,
        bubble_ratio,
        peak_mem: mem.peak(),
        weight_mem: mem.per_worker_weights,
        act_mem: mem.per_worker_acts,
        forward_on_path: pred.forwards,
        backward_on_path: pred.backwards,
        predicted_time: pred.total,
        simulated_time: sim.makespan,
    })
}
