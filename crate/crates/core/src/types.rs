//! Domain types shared by every module: the plan being evaluated, the tasks a
//! plan decomposes into, per-worker schedules, and the cost profile that turns
//! task counts into time and bytes.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pipeline scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "gpipe")]
    GPipe,
    #[serde(rename = "dapple")]
    Dapple,
    #[serde(rename = "gems")]
    Gems,
    #[serde(rename = "pipedream")]
    PipeDream,
    #[serde(rename = "pipedream-2bw")]
    PipeDream2BW,
    #[serde(rename = "chimera")]
    Chimera,
}

impl Scheme {
    pub const ALL: [Scheme; 6] =
        [Scheme::PipeDream, Scheme::PipeDream2BW, Scheme::GPipe, Scheme::Gems, Scheme::Dapple, Scheme::Chimera];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::GPipe => "gpipe",
            Scheme::Dapple => "dapple",
            Scheme::Gems => "gems",
            Scheme::PipeDream => "pipedream",
            Scheme::PipeDream2BW => "pipedream-2bw",
            Scheme::Chimera => "chimera",
        }
    }

    /// Synchronous schemes flush the pipeline and apply one update per iteration.
    pub fn is_synchronous(self) -> bool {
        !matches!(self, Scheme::PipeDream | Scheme::PipeDream2BW)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == norm || (norm == "pipedream2bw" && *x == Scheme::PipeDream2BW))
            .ok_or_else(|| format!("unknown scheme `{s}`"))
    }
}

/// How Chimera schedules more than `D` micro-batches per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    #[default]
    Direct,
    ForwardDoubling,
    BackwardHalving,
}

impl Scaling {
    pub const ALL: [Scaling; 3] = [Scaling::Direct, Scaling::ForwardDoubling, Scaling::BackwardHalving];

    pub fn name(self) -> &'static str {
        match self {
            Scaling::Direct => "direct",
            Scaling::ForwardDoubling => "forward-doubling",
            Scaling::BackwardHalving => "backward-halving",
        }
    }
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scaling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        match norm.as_str() {
            "direct" => Ok(Scaling::Direct),
            "forward-doubling" | "doubling" => Ok(Scaling::ForwardDoubling),
            "backward-halving" | "halving" => Ok(Scaling::BackwardHalving),
            _ => Err(format!("unknown scaling strategy `{s}`")),
        }
    }
}

/// One training plan: scheme plus the (D, W, N, B, f) shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scheme: Scheme,
    /// Pipeline stages.
    #[serde(rename = "D")]
    pub depth: u32,
    /// Replicated pipelines (data-parallel width).
    #[serde(rename = "W")]
    pub width: u32,
    /// Micro-batches per worker per iteration.
    #[serde(rename = "N")]
    pub micro_batches: u32,
    /// Micro-batch size in samples.
    #[serde(rename = "B")]
    pub micro_batch_size: u32,
    /// Down-pipeline count (Chimera only).
    #[serde(default = "one")]
    pub f: u32,
    #[serde(default)]
    pub scaling: Scaling,
    #[serde(default)]
    pub recompute: bool,
}

fn one() -> u32 {
    1
}

impl PipelineConfig {
    pub fn new(scheme: Scheme, depth: u32, micro_batches: u32) -> Self {
        Self {
            scheme,
            depth,
            width: 1,
            micro_batches,
            micro_batch_size: 1,
            f: 1,
            scaling: Scaling::Direct,
            recompute: false,
        }
    }

    pub fn with_width(mut self, width: u32) -> Self {
        self.width = width;
        self
    }

    pub fn with_micro_batch_size(mut self, b: u32) -> Self {
        self.micro_batch_size = b;
        self
    }

    pub fn with_f(mut self, f: u32) -> Self {
        self.f = f;
        self
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn with_recompute(mut self, recompute: bool) -> Self {
        self.recompute = recompute;
        self
    }

    /// Number of workers, `W * D`.
    pub fn workers(&self) -> u32 {
        self.width * self.depth
    }

    /// Whether the Chimera N > D scaling strategy applies to this plan.
    pub fn scaled(&self) -> bool {
        self.scheme == Scheme::Chimera && self.micro_batches > self.depth
    }

    /// Effective scaling strategy (always `Direct` unless Chimera runs N > D).
    pub fn effective_scaling(&self) -> Scaling {
        if self.scaled() {
            self.scaling
        } else {
            Scaling::Direct
        }
    }

    /// Forward doubling cannot run without activation recomputation.
    pub fn effective_recompute(&self) -> bool {
        self.recompute || self.effective_scaling() == Scaling::ForwardDoubling
    }

    /// Samples carried by one micro-batch id. Under backward halving an id is
    /// a half micro-batch.
    pub fn samples_per_id(&self) -> f64 {
        match self.effective_scaling() {
            Scaling::BackwardHalving => self.micro_batch_size as f64 / 2.0,
            _ => self.micro_batch_size as f64,
        }
    }

    /// Mini-batch size: samples consumed by one iteration across all replicas.
    pub fn mini_batch_size(&self) -> f64 {
        self.samples_per_id() * self.micro_batches as f64 * self.width as f64
    }

    /// Number of stage copies each pipeline group keeps of one stage.
    pub fn stage_copies(&self) -> u32 {
        match self.scheme {
            Scheme::Chimera => 2 * self.f,
            Scheme::Gems => 2,
            _ => 1,
        }
    }

    /// Participants in the gradient allreduce of one stage.
    pub fn stage_replicas(&self) -> u32 {
        self.stage_copies() * self.width
    }

    /// Every structural violation; memory is checked separately by
    /// [`validate_config`].
    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut v = Vec::new();
        for (name, value) in [
            ("D", self.depth),
            ("W", self.width),
            ("N", self.micro_batches),
            ("B", self.micro_batch_size),
            ("f", self.f),
        ] {
            if value == 0 {
                v.push(ConfigViolation::NotPositive { name: name.into() });
            }
        }
        if !v.is_empty() {
            return v;
        }
        let d = self.depth;
        let n = self.micro_batches;
        match self.scheme {
            Scheme::Chimera => {
                if d % 2 == 1 {
                    v.push(ConfigViolation::OddDepth { depth: d });
                } else {
                    let half = d / 2;
                    if self.f > half || !half.is_multiple_of(self.f) {
                        v.push(ConfigViolation::PipelineCountNotDivisor { f: self.f, half_depth: half });
                    }
                }
                if n > d {
                    if !n.is_multiple_of(d) {
                        v.push(ConfigViolation::MicroBatchesNotUnitMultiple { n, depth: d });
                    }
                    if self.scaling == Scaling::BackwardHalving && self.micro_batch_size % 2 == 1 {
                        v.push(ConfigViolation::OddMicroBatchForHalving { b: self.micro_batch_size });
                    }
                }
            }
            Scheme::PipeDream if n != 1 => {
                v.push(ConfigViolation::PipeDreamMicroBatches { n });
            }
            _ => {}
        }
        if self.scheme != Scheme::Chimera {
            if self.f != 1 {
                v.push(ConfigViolation::ChimeraOnly { field: "f".into() });
            }
            if self.scaling != Scaling::Direct {
                v.push(ConfigViolation::ChimeraOnly { field: "scaling".into() });
            }
        }
        v
    }
}

/// A reason a configuration or profile cannot be used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfigViolation {
    #[error("{name} must be positive")]
    NotPositive { name: String },
    #[error("Chimera needs an even number of stages, got D={depth}")]
    OddDepth { depth: u32 },
    #[error("f={f} must divide D/2={half_depth}")]
    PipelineCountNotDivisor { f: u32, half_depth: u32 },
    #[error("N={n} > D={depth} must be a multiple of D")]
    MicroBatchesNotUnitMultiple { n: u32, depth: u32 },
    #[error("backward halving needs an even micro-batch size, got B={b}")]
    OddMicroBatchForHalving { b: u32 },
    #[error("PipeDream updates after every micro-batch, N must be 1 (got {n})")]
    PipeDreamMicroBatches { n: u32 },
    #[error("`{field}` only applies to Chimera")]
    ChimeraOnly { field: String },
    #[error("profile field {field} is invalid: {reason}")]
    InvalidProfile { field: String, reason: String },
    #[error("peak worker memory {peak} bytes exceeds capacity {capacity} bytes")]
    ExceedsMemory { peak: f64, capacity: f64 },
}

/// Returns every violated invariant of `config` and `profile`, including the
/// memory predicate. Empty means the plan is usable.
pub fn validate_config(config: &PipelineConfig, profile: &CostProfile) -> Vec<ConfigViolation> {
    let mut v = config.violations();
    v.extend(profile.violations());
    if v.is_empty() {
        let peak = crate::analysis::peak_memory(config, profile);
        match peak {
            Ok(peak) if peak <= profile.mem_capacity => {}
            Ok(peak) => v.push(ConfigViolation::ExceedsMemory { peak, capacity: profile.mem_capacity }),
            Err(e) => v.push(ConfigViolation::InvalidProfile { field: "schedule".into(), reason: e.to_string() }),
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Forward,
    Backward,
    Recompute,
    P2PSend,
    P2PRecv,
    AllReduceStart,
    AllReduceWait,
}

impl TaskKind {
    pub fn is_compute(self) -> bool {
        matches!(self, TaskKind::Forward | TaskKind::Backward | TaskKind::Recompute)
    }
}

/// One unit of work on one worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub kind: TaskKind,
    pub pipeline_id: u32,
    /// First micro-batch id covered by this task.
    pub micro_batch: u32,
    /// Number of consecutive micro-batch ids covered (2 for a doubled forward).
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub covers: u32,
    pub stage: u32,
    pub worker: u32,
    pub replica_group: u32,
    /// Weight version read by this task (asynchronous schemes only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_version: Option<u32>,
}

fn is_one(x: &u32) -> bool {
    *x == 1
}

impl Task {
    pub fn new(kind: TaskKind, pipeline_id: u32, micro_batch: u32, stage: u32, worker: u32) -> Self {
        Self { kind, pipeline_id, micro_batch, covers: 1, stage, worker, replica_group: 0, weight_version: None }
    }

    pub fn forward(pipeline_id: u32, micro_batch: u32, stage: u32, worker: u32) -> Self {
        Self::new(TaskKind::Forward, pipeline_id, micro_batch, stage, worker)
    }

    pub fn backward(pipeline_id: u32, micro_batch: u32, stage: u32, worker: u32) -> Self {
        Self::new(TaskKind::Backward, pipeline_id, micro_batch, stage, worker)
    }

    pub fn key(&self) -> TaskKey {
        TaskKey { kind: self.kind, pipeline_id: self.pipeline_id, micro_batch: self.micro_batch, stage: self.stage }
    }

    pub fn micro_batch_ids(&self) -> std::ops::Range<u32> {
        self.micro_batch..self.micro_batch + self.covers
    }

    pub fn label(&self) -> String {
        let k = match self.kind {
            TaskKind::Forward => "F",
            TaskKind::Backward => "B",
            TaskKind::Recompute => "R",
            TaskKind::P2PSend => "S",
            TaskKind::P2PRecv => "V",
            TaskKind::AllReduceStart => "A",
            TaskKind::AllReduceWait => "W",
        };
        if self.covers > 1 {
            format!("{k}{}+{}", self.micro_batch, self.micro_batch + self.covers - 1)
        } else {
            format!("{k}{}", self.micro_batch)
        }
    }
}

/// Identity of a task within one replica group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskKey {
    pub kind: TaskKind,
    pub pipeline_id: u32,
    pub micro_batch: u32,
    pub stage: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

/// Per-worker task orders, optionally with uniform-slot positions and
/// simulated start/end times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub config: PipelineConfig,
    pub per_worker: Vec<Vec<Task>>,
    /// Uniform-slot position of each task, parallel to `per_worker`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<Vec<Vec<u32>>>,
    /// Start/end times, parallel to `per_worker`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Vec<Vec<Interval>>>,
}

impl Schedule {
    pub fn workers(&self) -> usize {
        self.per_worker.len()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.per_worker.iter().flatten()
    }

    pub fn task_count(&self) -> usize {
        self.per_worker.iter().map(Vec::len).sum()
    }

    pub fn is_timed(&self) -> bool {
        self.timing.is_some()
    }

    /// Largest task end time, or zero for an empty or untimed schedule.
    pub fn makespan(&self) -> f64 {
        self.timing.iter().flatten().flatten().map(|i| i.end).fold(0.0, f64::max)
    }

    /// Micro-batch ids processed by each worker, sorted.
    pub fn micro_batch_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .tasks()
            .filter(|t| t.kind == TaskKind::Forward && t.stage == 0)
            .flat_map(|t| t.micro_batch_ids())
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// Measured or assumed scalars that turn a schedule into time and bytes.
///
/// Time is in abstract units; bytes are plain numbers. `F_t`, `L_act`, `M_a`
/// and `M_a_ckpt` are per sample, so a micro-batch of `B` samples takes
/// `B * F_t` to run forward and holds `B * M_a` bytes on a stage. With the
/// default `B = 1` they are per micro-batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    /// Forward time of one sample on one stage.
    #[serde(rename = "F_t")]
    pub forward_time: f64,
    /// `B_t = backward_ratio * F_t`.
    pub backward_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Gradient bytes of one stage.
    #[serde(rename = "L_grad")]
    pub grad_bytes: f64,
    /// Stage-boundary activation bytes of one sample.
    #[serde(rename = "L_act")]
    pub act_bytes: f64,
    /// Weight bytes of one stage.
    #[serde(rename = "M_theta")]
    pub weight_mem: f64,
    /// Activation bytes per sample on one stage.
    #[serde(rename = "M_a")]
    pub act_mem: f64,
    /// Activation bytes per sample kept under recomputation.
    #[serde(rename = "M_a_ckpt")]
    pub act_mem_ckpt: f64,
    /// Bytes per worker; `null` in JSON means unlimited.
    #[serde(with = "capacity")]
    pub mem_capacity: f64,
    /// Charge one extra `M_theta` to every replica of stage 0.
    #[serde(default)]
    pub embedding_surcharge: bool,
}

impl Default for CostProfile {
    fn default() -> Self {
        Self {
            forward_time: 1.0,
            backward_ratio: 2.0,
            alpha: 0.0,
            beta: 0.0,
            grad_bytes: 1.0,
            act_bytes: 1.0,
            weight_mem: 1.0,
            act_mem: 1.0,
            act_mem_ckpt: 0.25,
            mem_capacity: f64::INFINITY,
            embedding_surcharge: false,
        }
    }
}

impl CostProfile {
    /// Unit compute, zero communication, unlimited memory.
    pub fn compute_only() -> Self {
        Self::default()
    }

    pub fn with_backward_ratio(mut self, r: f64) -> Self {
        self.backward_ratio = r;
        self
    }

    pub fn backward_time(&self) -> f64 {
        self.backward_ratio * self.forward_time
    }

    /// Same compute, all communication removed.
    pub fn without_communication(&self) -> Self {
        Self { alpha: 0.0, beta: 0.0, ..*self }
    }

    /// Every time-valued field multiplied by `c`.
    pub fn scale_time(&self, c: f64) -> Self {
        Self { forward_time: self.forward_time * c, alpha: self.alpha * c, beta: self.beta * c, ..*self }
    }

    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut v = Vec::new();
        let mut check = |field: &str, x: f64, allow_zero: bool| {
            let ok = x.is_finite() && if allow_zero { x >= 0.0 } else { x > 0.0 };
            if !ok {
                let reason = if allow_zero { "must be finite and non-negative" } else { "must be finite and positive" };
                v.push(ConfigViolation::InvalidProfile { field: field.into(), reason: reason.into() });
            }
        };
        check("F_t", self.forward_time, false);
        check("backward_ratio", self.backward_ratio, false);
        check("alpha", self.alpha, true);
        check("beta", self.beta, true);
        check("L_grad", self.grad_bytes, false);
        check("L_act", self.act_bytes, false);
        check("M_theta", self.weight_mem, false);
        check("M_a", self.act_mem, false);
        check("M_a_ckpt", self.act_mem_ckpt, false);
        if self.mem_capacity.is_nan() || self.mem_capacity <= 0.0 {
            v.push(ConfigViolation::InvalidProfile { field: "mem_capacity".into(), reason: "must be positive".into() });
        }
        if self.act_mem_ckpt > self.act_mem {
            v.push(ConfigViolation::InvalidProfile { field: "M_a_ckpt".into(), reason: "must not exceed M_a".into() });
        }
        v
    }
}

mod capacity {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Exact rational used for bubble ratios.
pub type Rational = Ratio<i64>;

/// Combined static and simulated view of one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: PipelineConfig,
    /// `[numerator, denominator]`.
    pub bubble_ratio: Rational,
    pub weight_mem: Vec<f64>,
    pub act_mem: Vec<f64>,
    pub peak_mem: f64,
    #[serde(rename = "C_f")]
    pub forward_on_path: u32,
    #[serde(rename = "C_b")]
    pub backward_on_path: u32,
    #[serde(rename = "T_predicted")]
    pub predicted_time: f64,
    #[serde(rename = "T_simulated")]
    pub simulated_time: f64,
}
