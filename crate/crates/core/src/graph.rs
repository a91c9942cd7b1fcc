//! Task dependency DAG of a schedule and its as-soon-as-possible timing.

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::types::{CostProfile, Schedule, Task, TaskKey, TaskKind};

/// When a successor may start relative to its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lag {
    /// After the predecessor ends.
    End,
    /// Halfway through the predecessor: a two-micro-batch forward hands its
    /// first micro-batch on before starting the second.
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub lag: Lag,
    /// Data edge between different workers, charged one p2p message.
    pub transfer: bool,
}

#[derive(Debug, Clone)]
pub struct TaskGraph {
    /// `(worker, position)` of every node, worker-major.
    pub nodes: Vec<(usize, usize)>,
    pub preds: Vec<Vec<Edge>>,
    /// A topological order of all nodes.
    pub order: Vec<usize>,
}

impl TaskGraph {
    /// Builds the DAG: per-worker order edges plus the forward chain, the
    /// turnaround at the last stage, and the backward chain of every
    /// micro-batch. Fails on a missing producer or a cycle.
    pub fn build(s: &Schedule) -> Result<TaskGraph> {
        let mut nodes = Vec::with_capacity(s.task_count());
        let mut index: HashMap<TaskKey, usize> = HashMap::new();
        // (pipeline, id, stage) -> forward node containing that id
        let mut fwd_of: HashMap<(u32, u32, u32), usize> = HashMap::new();
        for (w, row) in s.per_worker.iter().enumerate() {
            for (p, t) in row.iter().enumerate() {
                let n = nodes.len();
                nodes.push((w, p));
                if matches!(t.kind, TaskKind::Forward | TaskKind::Backward) && index.insert(t.key(), n).is_some() {
                    return Err(Error::InvalidArgument(format!("duplicate task {:?}", t.key())));
                }
                if t.kind == TaskKind::Forward {
                    for id in t.micro_batch_ids() {
                        fwd_of.insert((t.pipeline_id, id, t.stage), n);
                    }
                }
            }
        }
        let last_stage = s.config.depth.saturating_sub(1);
        let task = |n: usize| -> &Task {
            let (w, p) = nodes[n];
            &s.per_worker[w][p]
        };
        let mut preds = vec![Vec::new(); nodes.len()];
        for n in 0..nodes.len() {
            let (w, p) = nodes[n];
            let t = task(n);
            if p > 0 {
                preds[n].push(Edge { from: n - 1, lag: Lag::End, transfer: false });
            }
            let producer = match t.kind {
                TaskKind::Forward if t.stage > 0 => Some(
                    fwd_of
                        .get(&(t.pipeline_id, t.micro_batch, t.stage - 1))
                        .copied()
                        .ok_or(Error::MissingActivation(TaskKey { stage: t.stage - 1, ..t.key() }))?,
                ),
                TaskKind::Backward if t.stage == last_stage => Some(
                    fwd_of
                        .get(&(t.pipeline_id, t.micro_batch, t.stage))
                        .copied()
                        .ok_or(Error::MissingActivation(TaskKey { kind: TaskKind::Forward, ..t.key() }))?,
                ),
                TaskKind::Backward => {
                    let k = TaskKey { stage: t.stage + 1, ..t.key() };
                    Some(index.get(&k).copied().ok_or(Error::MissingActivation(k))?)
                }
                _ => None,
            };
            if let Some(from) = producer {
                let src = task(from);
                let lag = if t.kind == TaskKind::Forward && src.covers > 1 { Lag::Half } else { Lag::End };
                preds[n].push(Edge { from, lag, transfer: nodes[from].0 != w });
            }
        }
        let order = topo_order(&preds).map_err(|blocked| {
            let first = blocked.first().map(|&n| task(n).key());
            Error::CyclicDependency { blocked: blocked.len(), first }
        })?;
        Ok(TaskGraph { nodes, preds, order })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn task<'a>(&self, s: &'a Schedule, n: usize) -> &'a Task {
        let (w, p) = self.nodes[n];
        &s.per_worker[w][p]
    }

    /// Earliest start of `n` given the already-timed predecessors.
    pub fn ready_time(&self, n: usize, times: &[(f64, f64)], transfer_cost: impl Fn(usize) -> f64) -> f64 {
        self.preds[n]
            .iter()
            .map(|e| {
                let (st, en) = times[e.from];
                let base = match e.lag {
                    Lag::End => en,
                    Lag::Half => st + (en - st) / 2.0,
                };
                if e.transfer {
                    base + transfer_cost(e.from)
                } else {
                    base
                }
            })
            .fold(0.0, f64::max)
    }

    /// List-scheduling times with `duration` per node and `transfer_cost`
    /// per outgoing message of the source node.
    pub fn asap(&self, duration: impl Fn(usize) -> f64, transfer_cost: impl Fn(usize) -> f64) -> Vec<(f64, f64)> {
        let mut times = vec![(0.0, 0.0); self.len()];
        for &n in &self.order {
            let start = self.ready_time(n, &times, &transfer_cost);
            times[n] = (start, start + duration(n));
        }
        times
    }
}

/// Kahn's algorithm; on a cycle returns the nodes that never became ready.
fn topo_order(preds: &[Vec<Edge>]) -> std::result::Result<Vec<usize>, Vec<usize>> {
    let n = preds.len();
    let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut succs = vec![Vec::new(); n];
    for (v, es) in preds.iter().enumerate() {
        for e in es {
            succs[e.from].push(v);
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &u in &succs[v] {
            indeg[u] -= 1;
            if indeg[u] == 0 {
                queue.push_back(u);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n).filter(|&v| indeg[v] > 0).collect())
    }
}

/// Compute time of one task: per-sample cost times the samples it covers. A
/// forward covering two ids costs two forwards; under backward halving each
/// id is half a micro-batch.
pub fn compute_duration(t: &Task, s: &Schedule, profile: &CostProfile) -> f64 {
    let frac = s.config.samples_per_id();
    match t.kind {
        TaskKind::Forward => profile.forward_time * t.covers as f64 * frac,
        TaskKind::Backward => profile.backward_time() * frac,
        _ => 0.0,
    }
}

/// Cost of one stage-boundary message for one micro-batch id.
pub fn message_cost(s: &Schedule, profile: &CostProfile) -> f64 {
    let frac = s.config.samples_per_id();
    profile.alpha + profile.beta * profile.act_bytes * frac
}

/// Start and end times of every task under list scheduling.
pub fn compute_timing(s: &Schedule, profile: &CostProfile) -> Result<(TaskGraph, Vec<(f64, f64)>)> {
    let g = TaskGraph::build(s)?;
    let msg = message_cost(s, profile);
    let times = g.asap(|n| compute_duration(g.task(s, n), s, profile), |_| msg);
    Ok((g, times))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedgen::gen_schedule;
    use crate::types::{PipelineConfig, Scaling, Scheme};

    fn makespan(c: PipelineConfig) -> f64 {
        let s = gen_schedule(&c).unwrap();
        let (_, t) = compute_timing(&s, &CostProfile::default()).unwrap();
        t.iter().map(|x| x.1).fold(0.0, f64::max)
    }

    #[test]
    fn reference_makespans() {
        assert_eq!(makespan(PipelineConfig::new(Scheme::Chimera, 4, 4)), 16.0);
        assert_eq!(makespan(PipelineConfig::new(Scheme::GPipe, 4, 4)), 21.0);
        assert_eq!(makespan(PipelineConfig::new(Scheme::Dapple, 4, 4)), 21.0);
        let c = PipelineConfig::new(Scheme::Chimera, 4, 8).with_scaling(Scaling::ForwardDoubling);
        assert_eq!(makespan(c), 27.0);
    }

    #[test]
    fn cycle_is_reported() {
        let mut s = gen_schedule(&PipelineConfig::new(Scheme::Dapple, 2, 2)).unwrap();
        // worker 1 waits for F1 before F0, worker 0 waits for B0 before F1
        s.per_worker[1].swap(0, 2);
        s.per_worker[0] = vec![s.per_worker[0][0], s.per_worker[0][2], s.per_worker[0][1], s.per_worker[0][3]];
        assert!(matches!(TaskGraph::build(&s), Err(Error::CyclicDependency { .. })));
    }

    #[test]
    fn missing_producer() {
        let mut s = gen_schedule(&PipelineConfig::new(Scheme::Dapple, 2, 1)).unwrap();
        s.per_worker[1].remove(0);
        assert!(matches!(TaskGraph::build(&s), Err(Error::MissingActivation(_))));
    }
}
