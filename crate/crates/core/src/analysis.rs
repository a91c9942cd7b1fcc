//! Static analysis: dependency validation, bubble ratio, memory.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TaskGraph;
use crate::schedgen::gen_schedule;
use crate::types::{CostProfile, PipelineConfig, Rational, Schedule, Scheme, TaskKey, TaskKind};

/// A broken ordering invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DependencyViolation {
    DuplicateTask {
        task: TaskKey,
    },
    /// A backward (or a downstream forward) whose producing task is absent.
    MissingProducer {
        task: TaskKey,
        missing: TaskKey,
    },
    /// A backward placed before its own forward on the same worker.
    BackwardBeforeForward {
        task: TaskKey,
        worker: u32,
    },
    /// A forward and its backward on different workers.
    WorkerMismatch {
        task: TaskKey,
        forward_worker: u32,
        backward_worker: u32,
    },
    /// Cross-worker orders admit no execution.
    Deadlock {
        blocked: usize,
        first: Option<TaskKey>,
    },
}

/// Every violated ordering invariant of `s`. Local checks run first; the
/// global deadlock check runs only when they all pass.
pub fn validate_dependencies(s: &Schedule) -> Vec<DependencyViolation> {
    let mut v = Vec::new();
    let mut seen: HashMap<TaskKey, (u32, usize)> = HashMap::new();
    let mut fwd_ids: HashMap<(u32, u32, u32), (u32, usize)> = HashMap::new();
    for (w, row) in s.per_worker.iter().enumerate() {
        for (p, t) in row.iter().enumerate() {
            if !matches!(t.kind, TaskKind::Forward | TaskKind::Backward) {
                continue;
            }
            if seen.insert(t.key(), (w as u32, p)).is_some() {
                v.push(DependencyViolation::DuplicateTask { task: t.key() });
            }
            if t.kind == TaskKind::Forward {
                for id in t.micro_batch_ids() {
                    fwd_ids.insert((t.pipeline_id, id, t.stage), (w as u32, p));
                }
            }
        }
    }
    let last = s.config.depth.saturating_sub(1);
    for (w, row) in s.per_worker.iter().enumerate() {
        for (p, t) in row.iter().enumerate() {
            let key = t.key();
            match t.kind {
                TaskKind::Forward if t.stage > 0 => {
                    if !fwd_ids.contains_key(&(t.pipeline_id, t.micro_batch, t.stage - 1)) {
                        let missing = TaskKey { stage: t.stage - 1, ..key };
                        v.push(DependencyViolation::MissingProducer { task: key, missing });
                    }
                }
                TaskKind::Backward => {
                    match fwd_ids.get(&(t.pipeline_id, t.micro_batch, t.stage)) {
                        None => v.push(DependencyViolation::MissingProducer {
                            task: key,
                            missing: TaskKey { kind: TaskKind::Forward, ..key },
                        }),
                        Some(&(fw, _)) if fw != w as u32 => v.push(DependencyViolation::WorkerMismatch {
                            task: key,
                            forward_worker: fw,
                            backward_worker: w as u32,
                        }),
                        Some(&(_, fp)) if fp > p => {
                            v.push(DependencyViolation::BackwardBeforeForward { task: key, worker: w as u32 })
                        }
                        _ => {}
                    }
                    if t.stage < last {
                        let up = TaskKey { stage: t.stage + 1, ..key };
                        if !seen.contains_key(&up) {
                            v.push(DependencyViolation::MissingProducer { task: key, missing: up });
                        }
                    }
                }
                _ => {}
            }
        }
    }
    if v.is_empty() {
        if let Err(Error::CyclicDependency { blocked, first }) = TaskGraph::build(s) {
            v.push(DependencyViolation::Deadlock { blocked, first });
        }
    }
    v
}

/// Exact value of a float; dyadic times convert without loss, anything
/// else is rounded to the nearest multiple of `2^-40`.
pub fn to_rational(x: f64) -> Rational {
    let mut den: i64 = 1;
    while (x * den as f64).fract() != 0.0 && den < 1 << 40 {
        den *= 2;
    }
    Rational::new((x * den as f64).round() as i64, den)
}

fn timing(s: &Schedule) -> Result<&Vec<Vec<crate::types::Interval>>> {
    s.timing.as_ref().ok_or(Error::UntimedSchedule)
}

/// Per-worker compute busy time and the `[first start, last end]` span of
/// all compute tasks.
fn busy_and_span(s: &Schedule) -> Result<(Vec<f64>, f64, f64)> {
    let timing = timing(s)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut busy = vec![0.0; s.workers()];
    for (w, (row, times)) in s.per_worker.iter().zip(timing).enumerate() {
        for (t, iv) in row.iter().zip(times) {
            if t.kind.is_compute() {
                busy[w] += iv.len();
                lo = lo.min(iv.start);
                hi = hi.max(iv.end);
            }
        }
    }
    if busy.iter().all(|&b| b == 0.0) {
        return Ok((busy, 0.0, 0.0));
    }
    Ok((busy, lo, hi))
}

/// Idle compute time of each worker inside the schedule-wide span.
pub fn idle_per_worker(s: &Schedule) -> Result<Vec<f64>> {
    let (busy, lo, hi) = busy_and_span(s)?;
    Ok(busy.iter().map(|b| (hi - lo - b).max(0.0)).collect())
}

/// Idle time of the most idle worker divided by the span of the timed
/// schedule. With balanced stages every worker does the same work, so this
/// is the scheme's bubble ratio.
pub fn bubble_ratio(s: &Schedule) -> Result<Rational> {
    let (busy, lo, hi) = busy_and_span(s)?;
    if hi <= lo {
        return Ok(Rational::from_integer(0));
    }
    let min_busy = busy.iter().copied().fold(f64::INFINITY, f64::min);
    let span = to_rational(hi - lo);
    Ok((span - to_rational(min_busy)) / span)
}

/// Largest idle time any worker sees between its first backward start and
/// its last forward end: zero when no bubbles appear once the pipeline is
/// full.
pub fn steady_state_idle(s: &Schedule) -> Result<f64> {
    let timing = timing(s)?;
    let mut worst: f64 = 0.0;
    for (row, times) in s.per_worker.iter().zip(timing) {
        let first_b = row.iter().zip(times).find(|(t, _)| t.kind == TaskKind::Backward).map(|(_, i)| i.start);
        let last_f = row.iter().zip(times).filter(|(t, _)| t.kind == TaskKind::Forward).map(|(_, i)| i.end).next_back();
        let (Some(a), Some(b)) = (first_b, last_f) else { continue };
        let mut idle = 0.0;
        let mut cursor = a;
        for (t, iv) in row.iter().zip(times) {
            if !t.kind.is_compute() || iv.end <= a || iv.start >= b {
                continue;
            }
            idle += (iv.start - cursor).max(0.0);
            cursor = cursor.max(iv.end);
        }
        worst = worst.max(idle);
    }
    Ok(worst)
}

/// Per-worker weights and peak activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryProfile {
    /// Stage replicas (or weight versions) held by each worker.
    pub weight_counts: Vec<u32>,
    /// Peak number of micro-batch ids with live activations on each worker.
    pub act_counts: Vec<u32>,
    pub per_worker_weights: Vec<f64>,
    pub per_worker_acts: Vec<f64>,
    pub peak_worker: usize,
}

impl MemoryProfile {
    pub fn per_worker_total(&self) -> Vec<f64> {
        self.per_worker_weights.iter().zip(&self.per_worker_acts).map(|(w, a)| w + a).collect()
    }

    pub fn peak(&self) -> f64 {
        self.per_worker_total().get(self.peak_worker).copied().unwrap_or(0.0)
    }
}

/// Activation bytes on a worker holding `live` ids, `in_backward` of which
/// are being recomputed and back-propagated right now.
pub(crate) fn act_bytes(config: &PipelineConfig, profile: &CostProfile, live: usize, in_backward: usize) -> f64 {
    let per_id = config.samples_per_id();
    if config.effective_recompute() {
        per_id * (live as f64 * profile.act_mem_ckpt + in_backward as f64 * (profile.act_mem - profile.act_mem_ckpt))
    } else {
        per_id * live as f64 * profile.act_mem
    }
}

fn weight_count(s: &Schedule, row: &[crate::types::Task]) -> u32 {
    match s.config.scheme {
        Scheme::PipeDream => {
            // versions still needed by in-flight micro-batches plus the newest
            let mut inflight: HashMap<u32, u32> = HashMap::new();
            let mut newest = 0;
            let mut peak = 0;
            for t in row {
                let v = t.weight_version.unwrap_or(0);
                match t.kind {
                    TaskKind::Forward => {
                        inflight.insert(t.micro_batch, v);
                        newest = newest.max(v);
                    }
                    TaskKind::Backward => {
                        inflight.remove(&t.micro_batch);
                        newest = newest.max(v + 1);
                    }
                    _ => continue,
                }
                let live: BTreeSet<u32> = inflight.values().copied().chain([newest]).collect();
                peak = peak.max(live.len() as u32);
            }
            peak.min(s.config.depth)
        }
        Scheme::PipeDream2BW => 2,
        _ => {
            let held: HashSet<(u32, u32)> =
                row.iter().filter(|t| t.kind.is_compute()).map(|t| (t.pipeline_id, t.stage)).collect();
            held.len() as u32
        }
    }
}

/// Weights and peak activation memory per worker, replaying each worker's
/// order: an id's activations are live from its forward until its backward
/// completes.
pub fn memory_profile(s: &Schedule, profile: &CostProfile) -> MemoryProfile {
    let cfg = &s.config;
    let mut weight_counts = Vec::with_capacity(s.workers());
    let mut act_counts = Vec::with_capacity(s.workers());
    let mut per_worker_weights = Vec::with_capacity(s.workers());
    let mut per_worker_acts = Vec::with_capacity(s.workers());
    for row in &s.per_worker {
        let wc = weight_count(s, row);
        let stage0 = row.iter().filter(|t| t.kind == TaskKind::Forward && t.stage == 0).map(|t| t.pipeline_id);
        let surcharge = if profile.embedding_surcharge { stage0.collect::<HashSet<_>>().len() } else { 0 };
        weight_counts.push(wc);
        per_worker_weights.push((wc as usize + surcharge) as f64 * profile.weight_mem);

        let mut live = 0usize;
        let (mut peak_live, mut peak_bytes) = (0usize, 0.0f64);
        for t in row {
            match t.kind {
                TaskKind::Forward => {
                    live += t.covers as usize;
                    peak_live = peak_live.max(live);
                    peak_bytes = peak_bytes.max(act_bytes(cfg, profile, live, 0));
                }
                TaskKind::Backward => {
                    peak_bytes = peak_bytes.max(act_bytes(cfg, profile, live, 1));
                    live = live.saturating_sub(1);
                }
                _ => {}
            }
        }
        act_counts.push(peak_live as u32);
        per_worker_acts.push(peak_bytes);
    }
    let totals: Vec<f64> = per_worker_weights.iter().zip(&per_worker_acts).map(|(a, b)| a + b).collect();
    let peak_worker = totals.iter().enumerate().fold(0, |best, (i, &x)| if x > totals[best] { i } else { best });
    MemoryProfile { weight_counts, act_counts, per_worker_weights, per_worker_acts, peak_worker }
}

/// Peak per-worker memory of the plan in bytes.
pub fn peak_memory(config: &PipelineConfig, profile: &CostProfile) -> Result<f64> {
    let s = gen_schedule(config)?;
    Ok(memory_profile(&s, profile).peak())
}

/// Whether the plan's peak worker fits into `mem_capacity` (inclusive).
pub fn fits_memory(config: &PipelineConfig, profile: &CostProfile) -> bool {
    peak_memory(config, profile).is_ok_and(|p| p <= profile.mem_capacity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dessim::timed_compute;
    use crate::types::Scaling;

    fn cfg(scheme: Scheme, d: u32, n: u32) -> PipelineConfig {
        PipelineConfig::new(scheme, d, n)
    }

    fn ratio(c: PipelineConfig) -> Rational {
        bubble_ratio(&timed_compute(&gen_schedule(&c).unwrap(), &CostProfile::default()).unwrap()).unwrap()
    }

    #[test]
    fn generated_schedules_are_valid() {
        for scheme in Scheme::ALL {
            let n = if scheme == Scheme::PipeDream { 1 } else { 4 };
            let s = gen_schedule(&cfg(scheme, 4, n)).unwrap();
            assert_eq!(validate_dependencies(&s), vec![], "{scheme}");
        }
    }

    #[test]
    fn backward_before_forward_detected() {
        let mut s = gen_schedule(&cfg(Scheme::Dapple, 4, 1)).unwrap();
        s.per_worker[2].swap(0, 1);
        let v = validate_dependencies(&s);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], DependencyViolation::BackwardBeforeForward { worker: 2, .. }));
    }

    #[test]
    fn orphan_backward_named() {
        let mut s = gen_schedule(&cfg(Scheme::Dapple, 4, 2)).unwrap();
        s.per_worker[3].retain(|t| !(t.kind == TaskKind::Forward && t.micro_batch == 1));
        let v = validate_dependencies(&s);
        assert_eq!(v.len(), 1);
        let DependencyViolation::MissingProducer { task, .. } = v[0] else { panic!("{v:?}") };
        assert_eq!((task.kind, task.micro_batch, task.stage), (TaskKind::Backward, 1, 3));
    }

    #[test]
    fn cross_worker_deadlock() {
        let mut s = gen_schedule(&cfg(Scheme::Dapple, 2, 2)).unwrap();
        let r0 = s.per_worker[0].clone();
        s.per_worker[0] = vec![r0[0], r0[2], r0[1], r0[3]];
        let r1 = s.per_worker[1].clone();
        s.per_worker[1] = vec![r1[0], r1[2], r1[1], r1[3]];
        let v = validate_dependencies(&s);
        assert!(matches!(v.as_slice(), [DependencyViolation::Deadlock { .. }]), "{v:?}");
    }

    #[test]
    fn reference_bubble_ratios() {
        assert_eq!(ratio(cfg(Scheme::Chimera, 4, 4)), Rational::new(1, 4));
        assert_eq!(ratio(cfg(Scheme::GPipe, 4, 4)), Rational::new(3, 7));
        assert_eq!(ratio(cfg(Scheme::Dapple, 4, 4)), Rational::new(3, 7));
        let c = cfg(Scheme::Chimera, 4, 8).with_scaling(Scaling::ForwardDoubling);
        assert_eq!(ratio(c), Rational::new(1, 9));
        assert_eq!(ratio(cfg(Scheme::Chimera, 4, 4).with_f(2)), Rational::new(0, 1));
    }

    #[test]
    fn untimed_is_an_error() {
        let s = gen_schedule(&cfg(Scheme::GPipe, 2, 2)).unwrap();
        assert_eq!(bubble_ratio(&s), Err(Error::UntimedSchedule));
    }

    #[test]
    fn rational_conversion() {
        assert_eq!(to_rational(0.375), Rational::new(3, 8));
        assert_eq!(to_rational(16.0), Rational::from_integer(16));
    }

    #[test]
    fn memory_counts() {
        let p = CostProfile::default();
        let m = memory_profile(&gen_schedule(&cfg(Scheme::Chimera, 4, 4)).unwrap(), &p);
        assert_eq!(m.act_counts, [3, 4, 4, 3]);
        assert_eq!(m.weight_counts, [2; 4]);
        let m = memory_profile(&gen_schedule(&cfg(Scheme::Dapple, 4, 4)).unwrap(), &p);
        assert_eq!(m.act_counts, [4, 3, 2, 1]);
        assert_eq!(m.peak_worker, 0);
        let m = memory_profile(&gen_schedule(&cfg(Scheme::GPipe, 4, 4)).unwrap(), &p);
        assert_eq!(m.act_counts, [4; 4]);
        let m = memory_profile(&gen_schedule(&cfg(Scheme::Gems, 4, 4)).unwrap(), &p);
        assert_eq!(m.act_counts, [1; 4]);
        let m = memory_profile(&gen_schedule(&cfg(Scheme::PipeDream, 4, 1)).unwrap(), &p);
        assert_eq!(m.weight_counts[0], 4);
        assert!(m.weight_counts.iter().all(|&c| (1..=4).contains(&c)));
    }

    #[test]
    fn recompute_keeps_checkpoints_only() {
        let p = CostProfile { act_mem: 4.0, act_mem_ckpt: 1.0, ..CostProfile::default() };
        let c = cfg(Scheme::Dapple, 4, 4).with_micro_batch_size(2);
        let plain = memory_profile(&gen_schedule(&c).unwrap(), &p);
        assert_eq!(plain.per_worker_acts[0], 4.0 * 2.0 * 4.0);
        let rc = memory_profile(&gen_schedule(&c.with_recompute(true)).unwrap(), &p);
        // 4 checkpoints of 2 samples plus one full activation being recomputed
        assert_eq!(rc.per_worker_acts[0], 2.0 * (4.0 * 1.0 + 3.0));
    }

    #[test]
    fn fits_memory_boundaries() {
        let c = cfg(Scheme::Chimera, 4, 4).with_micro_batch_size(2);
        let mut p = CostProfile::default();
        assert!(fits_memory(&c, &p));
        // 2 weight replicas + 4 micro-batches of 2 samples
        p.mem_capacity = 2.0 + 8.0;
        assert!(fits_memory(&c, &p));
        p.mem_capacity = 9.5;
        assert!(!fits_memory(&c, &p));
        p.embedding_surcharge = true;
        p.mem_capacity = 11.0;
        assert!(fits_memory(&c, &p));
    }

    #[test]
    fn surcharge_only_on_stage_zero_holders() {
        let p = CostProfile { embedding_surcharge: true, ..CostProfile::default() };
        let m = memory_profile(&gen_schedule(&cfg(Scheme::Dapple, 4, 4)).unwrap(), &p);
        assert_eq!(m.per_worker_weights, [2.0, 1.0, 1.0, 1.0]);
    }
}
