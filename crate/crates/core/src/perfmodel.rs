//! Analytic iteration-time model and the `(W, D, B)` planner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::fits_memory;
use crate::dessim::interior_slack;
use crate::error::{Error, Result};
use crate::graph::{compute_duration, compute_timing, Lag, TaskGraph};
use crate::schedgen::gen_schedule;
use crate::types::{CostProfile, Interval, PipelineConfig, Scaling, Schedule, Scheme, Task, TaskKind};

/// `alpha + beta * payload`.
pub fn p2p_cost(payload: f64, profile: &CostProfile) -> f64 {
    profile.alpha + profile.beta * payload
}

/// Rabenseifner allreduce of `bytes` over `r` participants:
/// `2 log2(r) alpha + 2 (r - 1) beta L / r`.
pub fn allreduce_cost(bytes: f64, r: u32, profile: &CostProfile) -> f64 {
    if r <= 1 {
        return 0.0;
    }
    if !r.is_power_of_two() {
        log::warn!("allreduce over {r} participants: cost formula assumes a power of two");
    }
    let r = r as f64;
    2.0 * r.log2() * profile.alpha + 2.0 * (r - 1.0) * profile.beta * bytes / r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPath {
    #[serde(rename = "C_f")]
    pub forwards: u32,
    #[serde(rename = "C_b")]
    pub backwards: u32,
    pub path: Vec<Task>,
    /// Compute time along the path.
    pub length: f64,
}

/// The chain of tasks that determines the compute makespan: walks back from
/// the last task to finish through predecessors whose constraint is tight.
/// Ties prefer data dependencies, then the lowest node index.
pub fn critical_path(s: &Schedule, profile: &CostProfile) -> Result<CriticalPath> {
    let profile = profile.without_communication();
    let (g, times) = compute_timing(s, &profile)?;
    let tol = 1e-9 * times.iter().map(|t| t.1).fold(1.0, f64::max);
    let Some(mut cur) = (0..g.len()).fold(None, |best: Option<usize>, n| match best {
        Some(b) if times[b].1 >= times[n].1 - tol => Some(b),
        _ => Some(n),
    }) else {
        return Ok(CriticalPath { forwards: 0, backwards: 0, path: Vec::new(), length: 0.0 });
    };
    let mut path = vec![cur];
    loop {
        let start = times[cur].0;
        let tight = |e: &&crate::graph::Edge| {
            let (st, en) = times[e.from];
            let c = match e.lag {
                Lag::End => en,
                Lag::Half => st + (en - st) / 2.0,
            };
            (c - start).abs() <= tol
        };
        let (w, _) = g.nodes[cur];
        let next = g.preds[cur]
            .iter()
            .filter(tight)
            .min_by_key(|e| (g.nodes[e.from].0 == w && e.lag == Lag::End && !is_data(&g, s, cur, e.from), e.from));
        match next {
            Some(e) => {
                cur = e.from;
                path.push(cur);
            }
            None => break,
        }
    }
    path.reverse();
    let tasks: Vec<Task> = path.iter().map(|&n| *g.task(s, n)).collect();
    let count = |k| tasks.iter().filter(|t| t.kind == k).count() as u32;
    let length = tasks.iter().map(|t| compute_duration(t, s, &profile)).sum();
    Ok(CriticalPath { forwards: count(TaskKind::Forward), backwards: count(TaskKind::Backward), path: tasks, length })
}

/// Whether `from -> to` is a data dependency rather than worker order.
fn is_data(g: &TaskGraph, s: &Schedule, to: usize, from: usize) -> bool {
    let (a, b) = (g.task(s, from), g.task(s, to));
    a.pipeline_id == b.pipeline_id
        && a.micro_batch_ids().any(|i| b.micro_batch_ids().any(|j| i == j))
        && a.kind.is_compute()
}

/// Slack available to one stage replica's gradient allreduce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSlack {
    pub stage: u32,
    /// Completion of the stage's last backward on the worker.
    pub completion: f64,
    /// Bubbles between completion and the end of local compute.
    pub interior: f64,
    /// Time between the end of local compute and the end of the iteration.
    pub tail: f64,
}

impl StageSlack {
    pub fn total(&self) -> f64 {
        self.interior + self.tail
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeRegions {
    /// Per worker, one entry per held stage in completion order.
    pub per_worker: Vec<Vec<StageSlack>>,
    /// End of the iteration's compute.
    pub end: f64,
    /// Idle intervals of each worker after its first stage completion,
    /// including the tail up to `end`.
    pub gaps: Vec<Vec<Interval>>,
}

/// Free regions of a timed schedule.
pub fn free_regions(s: &Schedule) -> Result<FreeRegions> {
    let timing = s.timing.as_ref().ok_or(Error::UntimedSchedule)?;
    let end = s
        .per_worker
        .iter()
        .zip(timing)
        .flat_map(|(r, t)| r.iter().zip(t))
        .filter(|(t, _)| t.kind.is_compute())
        .map(|(_, i)| i.end)
        .fold(0.0, f64::max);
    let mut per_worker = Vec::with_capacity(s.workers());
    let mut gaps = Vec::with_capacity(s.workers());
    for (row, times) in s.per_worker.iter().zip(timing) {
        let mut last = std::collections::BTreeMap::new();
        for (p, t) in row.iter().enumerate() {
            if t.kind == TaskKind::Backward {
                last.insert(t.stage, p);
            }
        }
        let local_end =
            row.iter().zip(times).filter(|(t, _)| t.kind.is_compute()).map(|(_, i)| i.end).fold(0.0, f64::max);
        let mut v: Vec<StageSlack> = last
            .iter()
            .map(|(&stage, &p)| StageSlack {
                stage,
                completion: times[p].end,
                interior: interior_slack(row, times, p),
                tail: end - local_end,
            })
            .collect();
        v.sort_by(|a, b| a.completion.total_cmp(&b.completion).then(a.stage.cmp(&b.stage)));
        let mut g = Vec::new();
        if let Some(first) = v.first() {
            let mut cursor = first.completion;
            for (t, iv) in row.iter().zip(times) {
                if t.kind.is_compute() && iv.end > cursor {
                    if iv.start > cursor {
                        g.push(Interval { start: cursor, end: iv.start });
                    }
                    cursor = iv.end;
                }
            }
            if end > cursor {
                g.push(Interval { start: cursor, end });
            }
        }
        per_worker.push(v);
        gaps.push(g);
    }
    Ok(FreeRegions { per_worker, end, gaps })
}

/// Allreduce time of each worker that no free region can hide. Stages are
/// served in completion order; each consumes free time after its own
/// completion and after the previous stage's allreduce.
pub fn unoverlapped_comm(regions: &FreeRegions, cost: f64) -> Vec<f64> {
    regions
        .per_worker
        .iter()
        .zip(&regions.gaps)
        .map(|(stages, gaps)| {
            let mut cursor = f64::NEG_INFINITY;
            let mut spill = 0.0;
            for st in stages {
                let mut need = cost;
                cursor = cursor.max(st.completion);
                for gap in gaps {
                    if need <= 0.0 {
                        break;
                    }
                    let from = gap.start.max(cursor);
                    if from >= gap.end {
                        continue;
                    }
                    let used = need.min(gap.end - from);
                    need -= used;
                    cursor = from + used;
                }
                spill += need;
            }
            spill
        })
        .collect()
}

/// Components of the predicted iteration time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "C_f")]
    pub forwards: u32,
    #[serde(rename = "C_b")]
    pub backwards: u32,
    /// Compute plus p2p along the critical path.
    pub path_time: f64,
    /// `max_i Comm_unoverlapped(i)`.
    pub unoverlapped: f64,
    #[serde(rename = "T")]
    pub total: f64,
}

/// Iteration time of `config`: every critical-path task costs its compute
/// time plus one p2p message, and the worst worker adds the allreduce time
/// its free regions cannot hide.
pub fn predict(config: &PipelineConfig, profile: &CostProfile) -> Result<Prediction> {
    let s = gen_schedule(config)?;
    let cp = critical_path(&s, profile)?;
    let frac = config.samples_per_id();
    let path_time = cp
        .path
        .iter()
        .map(|t| {
            let payload = profile.act_bytes * frac * if t.kind == TaskKind::Forward { t.covers as f64 } else { 1.0 };
            compute_duration(t, &s, profile) + p2p_cost(payload, profile)
        })
        .sum();
    let timed = crate::dessim::timed_compute(&s, &profile.without_communication())?;
    let regions = free_regions(&timed)?;
    let cost = allreduce_cost(profile.grad_bytes, config.stage_replicas(), profile);
    let unoverlapped = unoverlapped_comm(&regions, cost).into_iter().fold(0.0, f64::max);
    Ok(Prediction {
        forwards: cp.forwards,
        backwards: cp.backwards,
        path_time,
        unoverlapped,
        total: path_time + unoverlapped,
    })
}

/// Predicted iteration time `T`.
#[allow(non_snake_case)]
pub fn predict_T(config: &PipelineConfig, profile: &CostProfile) -> Result<f64> {
    Ok(predict(config, profile)?.total)
}

/// One ranked planner candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub config: PipelineConfig,
    #[serde(rename = "T_predicted")]
    pub predicted_time: f64,
    /// Mini-batch samples per time unit.
    pub throughput: f64,
    pub peak_mem: f64,
}

/// Profile used to evaluate a plan: recomputation adds one forward to every
/// backward (ratio 2 becomes 3).
pub fn effective_profile(config: &PipelineConfig, profile: &CostProfile) -> CostProfile {
    if config.effective_recompute() {
        profile.with_backward_ratio(profile.backward_ratio * 1.5)
    } else {
        *profile
    }
}

fn candidates_for_depth(
    p: u32,
    d: u32,
    b_hat: u32,
    profile: &CostProfile,
    scheme: Scheme,
    recompute: bool,
) -> Vec<PlanEntry> {
    let w = p / d;
    if !b_hat.is_multiple_of(w) || (scheme == Scheme::Chimera && d % 2 == 1) {
        return Vec::new();
    }
    let per_replica = b_hat / w;
    let largest = 1u32 << (31 - per_replica.leading_zeros());
    let mut out = Vec::new();
    // each scaling strategy gets its own largest fitting micro-batch
    for sc in Scaling::ALL {
        let mut b = largest;
        while b >= 1 {
            if let Some(e) = evaluate(scheme, d, w, b, per_replica, sc, recompute, b_hat, profile) {
                out.push(e);
                break;
            }
            b /= 2;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    scheme: Scheme,
    d: u32,
    w: u32,
    b: u32,
    per_replica: u32,
    sc: Scaling,
    recompute: bool,
    b_hat: u32,
    profile: &CostProfile,
) -> Option<PlanEntry> {
    if !per_replica.is_multiple_of(b) {
        return None;
    }
    let n = per_replica / b;
    let mut c = PipelineConfig::new(scheme, d, n).with_width(w).with_micro_batch_size(b).with_recompute(recompute);
    if sc != Scaling::Direct && !c.scaled() {
        return None;
    }
    c = c.with_scaling(sc);
    if sc == Scaling::BackwardHalving {
        // half micro-batches: twice the ids for the same samples
        c.micro_batches = 2 * n;
    }
    if !c.violations().is_empty() || !fits_memory(&c, profile) {
        return None;
    }
    let eff = effective_profile(&c, profile);
    let t = predict_T(&c, &eff).ok()?;
    let peak = crate::analysis::peak_memory(&c, profile).unwrap_or(f64::NAN);
    Some(PlanEntry { config: c, predicted_time: t, throughput: b_hat as f64 / t, peak_mem: peak })
}

/// Ranks every `W * D = P` plan for `scheme` by predicted iteration time.
/// For each factorization the largest power-of-two micro-batch that fits in
/// memory is used; if nothing fits, recomputation is switched on.
pub fn plan(p: u32, b_hat: u32, profile: &CostProfile, scheme: Scheme) -> Result<Vec<PlanEntry>> {
    if p < 1 || b_hat < 1 {
        return Err(Error::InvalidArgument("P and B_hat must be positive".into()));
    }
    let depths: Vec<u32> = (1..=p).filter(|d| p.is_multiple_of(*d)).collect();
    for recompute in [false, true] {
        let mut all: Vec<PlanEntry> = depths
            .par_iter()
            .flat_map_iter(|&d| candidates_for_depth(p, d, b_hat, profile, scheme, recompute))
            .collect();
        if !all.is_empty() {
            all.sort_by(|a, b| {
                a.predicted_time
                    .total_cmp(&b.predicted_time)
                    .then(a.config.depth.cmp(&b.config.depth))
                    .then(a.config.width.cmp(&b.config.width))
                    .then(a.config.scaling.cmp(&b.config.scaling))
            });
            return Ok(all);
        }
    }
    Err(Error::NoFeasibleConfig)
}
