//! Discrete-event simulation of one training iteration: list-scheduled
//! compute and p2p transfers, then gradient allreduce under a sync policy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::act_bytes;
use crate::error::Result;
use crate::graph::{compute_duration, compute_timing, message_cost, TaskGraph};
use crate::perfmodel::allreduce_cost;
use crate::types::{CostProfile, Interval, Schedule, Task, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncPolicy {
    /// Every allreduce starts after the worker's last compute task.
    #[default]
    EndOfIteration,
    /// Every stage replica launches its allreduce right after its last
    /// local backward, paying the launch overhead.
    EagerSync,
    /// Eager only for stage replicas that have a bubble between their last
    /// backward and the end of local compute.
    EagerSyncOpt,
}

impl SyncPolicy {
    pub const ALL: [SyncPolicy; 3] = [SyncPolicy::EndOfIteration, SyncPolicy::EagerSync, SyncPolicy::EagerSyncOpt];

    pub fn name(self) -> &'static str {
        match self {
            SyncPolicy::EndOfIteration => "end-of-iteration",
            SyncPolicy::EagerSync => "eager-sync",
            SyncPolicy::EagerSyncOpt => "eager-sync-opt",
        }
    }
}

impl fmt::Display for SyncPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyncPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SyncPolicy::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| format!("unknown sync policy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub policy: SyncPolicy,
    /// Launch overhead of an eager allreduce; `None` means `0.02 * F_t`.
    pub eager_overhead: Option<f64>,
}

impl SimOptions {
    pub fn new(policy: SyncPolicy) -> Self {
        Self { policy, eager_overhead: None }
    }

    pub fn with_eager_overhead(mut self, eps: f64) -> Self {
        self.eager_overhead = Some(eps);
        self
    }

    fn overhead(&self, profile: &CostProfile) -> f64 {
        self.eager_overhead.unwrap_or(0.02 * profile.forward_time)
    }
}

/// One stage's gradient allreduce across all its replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collective {
    pub stage: u32,
    /// Workers of one pipeline group holding the stage.
    pub workers: Vec<u32>,
    /// Participants including data-parallel replicas.
    pub replicas: u32,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// The schedule with allreduce start/wait tasks inserted and timed.
    pub timed: Schedule,
    pub makespan: f64,
    /// Largest end time among compute tasks.
    pub compute_makespan: f64,
    pub per_worker_idle: Vec<f64>,
    /// Part of the makespan spent only waiting for gradient allreduce.
    pub allreduce_exposed: f64,
    pub collectives: Vec<Collective>,
}

/// Times the compute tasks of `s` (no allreduce) under list scheduling.
pub fn timed_compute(s: &Schedule, profile: &CostProfile) -> Result<Schedule> {
    let (g, times) = compute_timing(s, profile)?;
    Ok(with_times(s, &g, &times))
}

fn with_times(s: &Schedule, g: &TaskGraph, times: &[(f64, f64)]) -> Schedule {
    let mut timing: Vec<Vec<Interval>> =
        s.per_worker.iter().map(|r| vec![Interval { start: 0.0, end: 0.0 }; r.len()]).collect();
    for (n, &(w, p)) in g.nodes.iter().enumerate() {
        timing[w][p] = Interval { start: times[n].0, end: times[n].1 };
    }
    Schedule { timing: Some(timing), ..s.clone() }
}

/// Position of the last backward of each held stage on each worker.
fn last_backwards(s: &Schedule) -> Vec<BTreeMap<u32, usize>> {
    s.per_worker
        .iter()
        .map(|row| {
            let mut m = BTreeMap::new();
            for (p, t) in row.iter().enumerate() {
                if t.kind == TaskKind::Backward {
                    m.insert(t.stage, p);
                }
            }
            m
        })
        .collect()
}

/// Idle time on the worker between `pos` and its last compute task.
pub(crate) fn interior_slack(row: &[Task], times: &[Interval], pos: usize) -> f64 {
    let mut idle = 0.0;
    let mut cursor = times[pos].end;
    for (t, iv) in row.iter().zip(times).skip(pos + 1) {
        if t.kind.is_compute() {
            idle += (iv.start - cursor).max(0.0);
            cursor = cursor.max(iv.end);
        }
    }
    idle
}

/// Simulates one iteration with the default eager overhead.
pub fn simulate(s: &Schedule, profile: &CostProfile, policy: SyncPolicy) -> Result<SimResult> {
    simulate_with(s, profile, &SimOptions::new(policy))
}

/// Simulates one iteration.
///
/// Each stage replica gets an `AllReduceStart` task: right after the stage's
/// last backward when eager (occupying the worker for the launch
/// overhead), or after the worker's last compute task otherwise. A stage's
/// collective starts once every holder has launched it and every holder's
/// communication channel is free; collectives on a worker run one at a time
/// and overlap any later compute. Every worker ends with an `AllReduceWait`
/// lasting until its collectives finish.
pub fn simulate_with(s: &Schedule, profile: &CostProfile, opts: &SimOptions) -> Result<SimResult> {
    let base = timed_compute(s, profile)?;
    let base_times = base.timing.as_ref().expect("timed");
    let eps = opts.overhead(profile);
    let lasts = last_backwards(s);

    // insert launch tasks
    let mut per_worker: Vec<Vec<Task>> = Vec::with_capacity(s.workers());
    let mut launch_dur: Vec<Vec<f64>> = Vec::with_capacity(s.workers());
    for (w, row) in s.per_worker.iter().enumerate() {
        let mut eager_after: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        let mut deferred = Vec::new();
        for (&stage, &pos) in &lasts[w] {
            let eager = match opts.policy {
                SyncPolicy::EndOfIteration => false,
                SyncPolicy::EagerSync => true,
                SyncPolicy::EagerSyncOpt => interior_slack(row, &base_times[w], pos) > 0.0,
            };
            if eager {
                eager_after.entry(pos).or_default().push(stage);
            } else {
                deferred.push(stage);
            }
        }
        let mut out = Vec::with_capacity(row.len() + lasts[w].len() + 1);
        let mut durs = Vec::with_capacity(out.capacity());
        let launch = |stage: u32| Task::new(TaskKind::AllReduceStart, 0, 0, stage, w as u32);
        for (p, t) in row.iter().enumerate() {
            out.push(*t);
            durs.push(0.0);
            for &stage in eager_after.get(&p).into_iter().flatten() {
                out.push(launch(stage));
                durs.push(eps);
            }
        }
        for stage in deferred {
            out.push(launch(stage));
            durs.push(0.0);
        }
        per_worker.push(out);
        launch_dur.push(durs);
    }
    let aug = Schedule { per_worker, timing: None, ..s.clone() };
    let g = TaskGraph::build(&aug)?;
    let msg = message_cost(s, profile);
    let times = g.asap(
        |n| {
            let (w, p) = g.nodes[n];
            let t = &aug.per_worker[w][p];
            if t.kind.is_compute() {
                compute_duration(t, &aug, profile)
            } else {
                launch_dur[w][p]
            }
        },
        |_| msg,
    );
    let mut timed = with_times(&aug, &g, &times);
    let timing = timed.timing.as_mut().expect("timed");

    let compute_makespan = timed_end(&aug, timing, |k| k.is_compute());
    let local_end: Vec<f64> = timing.iter().map(|r| r.iter().map(|i| i.end).fold(0.0, f64::max)).collect();

    // stage -> (holders, ready time)
    let mut ready: BTreeMap<u32, (Vec<u32>, f64)> = BTreeMap::new();
    for (w, row) in aug.per_worker.iter().enumerate() {
        for (t, iv) in row.iter().zip(&timing[w]) {
            if t.kind == TaskKind::AllReduceStart {
                let e = ready.entry(t.stage).or_insert((Vec::new(), 0.0));
                e.0.push(w as u32);
                e.1 = e.1.max(iv.end);
            }
        }
    }
    let replicas = s.config.stage_replicas();
    let cost = allreduce_cost(profile.grad_bytes, replicas, profile);
    let mut channel = vec![0.0f64; s.workers()];
    let mut pending: Vec<(u32, Vec<u32>, f64)> = ready.into_iter().map(|(st, (ws, r))| (st, ws, r)).collect();
    let mut collectives = Vec::with_capacity(pending.len());
    while !pending.is_empty() {
        let (i, start) = pending
            .iter()
            .enumerate()
            .map(|(i, (_, ws, r))| (i, ws.iter().map(|&w| channel[w as usize]).fold(*r, f64::max)))
            .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
        let (stage, workers, _) = pending.remove(i);
        let end = start + cost;
        for &w in &workers {
            channel[w as usize] = end;
        }
        collectives.push(Collective { stage, workers, replicas, start, end });
    }

    for (w, row) in timed.per_worker.iter_mut().enumerate() {
        let done = channel[w].max(local_end[w]);
        row.push(Task::new(TaskKind::AllReduceWait, 0, 0, 0, w as u32));
        timing[w].push(Interval { start: local_end[w], end: done });
    }
    let makespan = timing.iter().flatten().map(|i| i.end).fold(0.0, f64::max);
    let per_worker_idle = timed
        .per_worker
        .iter()
        .map(|row| {
            let busy: f64 =
                row.iter().filter(|t| t.kind.is_compute()).map(|t| compute_duration(t, &timed, profile)).sum();
            makespan - busy
        })
        .collect();
    Ok(SimResult {
        timed,
        makespan,
        compute_makespan,
        per_worker_idle,
        allreduce_exposed: makespan - compute_makespan,
        collectives,
    })
}

fn timed_end(s: &Schedule, timing: &[Vec<Interval>], keep: impl Fn(TaskKind) -> bool) -> f64 {
    s.per_worker
        .iter()
        .zip(timing)
        .flat_map(|(r, t)| r.iter().zip(t))
        .filter(|(t, _)| keep(t.kind))
        .map(|(_, i)| i.end)
        .fold(0.0, f64::max)
}

/// Live activation bytes of one worker as a step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryTrace {
    /// `(time, bytes)`: the level holds from `time` until the next point.
    pub points: Vec<(f64, f64)>,
    pub peak: f64,
}

/// Per-worker activation memory over time. An id is live from the start of
/// its forward to the end of its backward; under recomputation the full
/// activation is resident only while the backward runs.
pub fn memory_trace(result: &SimResult, profile: &CostProfile) -> Vec<MemoryTrace> {
    let s = &result.timed;
    let Some(timing) = s.timing.as_ref() else {
        return vec![MemoryTrace { points: vec![(0.0, 0.0)], peak: 0.0 }; s.workers()];
    };
    s.per_worker
        .iter()
        .zip(timing)
        .map(|(row, times)| {
            // (time, order, live delta, backward delta); releases sort first
            let mut ev: Vec<(f64, u8, i64, i64)> = Vec::new();
            for (t, iv) in row.iter().zip(times) {
                match t.kind {
                    TaskKind::Forward => ev.push((iv.start, 1, t.covers as i64, 0)),
                    TaskKind::Backward => {
                        ev.push((iv.start, 1, 0, 1));
                        ev.push((iv.end, 0, -1, -1));
                    }
                    _ => {}
                }
            }
            ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (mut live, mut bw) = (0i64, 0i64);
            let mut points = vec![(0.0, 0.0)];
            let mut peak: f64 = 0.0;
            for (time, _, dl, db) in ev {
                live += dl;
                bw += db;
                let bytes = act_bytes(&s.config, profile, live as usize, bw as usize);
                peak = peak.max(bytes);
                points.push((time, bytes));
            }
            MemoryTrace { points, peak }
        })
        .collect()
}
