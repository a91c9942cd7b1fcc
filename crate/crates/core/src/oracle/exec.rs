//! Replays a schedule numerically on the toy model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dessim::timed_compute;
use crate::error::{Error, Result};
use crate::graph::TaskGraph;
use crate::oracle::model::{Batch, Matrix, ToyModel};
use crate::types::{CostProfile, Schedule, Scheme, Task, TaskKey, TaskKind};

/// How tasks of different workers are interleaved during replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecOrder {
    /// By simulated start time under unit compute costs.
    #[default]
    Simulated,
    /// Kahn's order of the dependency DAG.
    Topological,
}

/// Neumaier-compensated running sum of a matrix.
#[derive(Debug, Clone)]
struct Accumulator {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl Accumulator {
    fn new(len: usize) -> Self {
        Self { sum: vec![0.0; len], comp: vec![0.0; len] }
    }

    fn add(&mut self, i: usize, v: f64) {
        let s = self.sum[i];
        let t = s + v;
        if s.abs() >= v.abs() {
            self.comp[i] += (s - t) + v;
        } else {
            self.comp[i] += (v - t) + s;
        }
        self.sum[i] = t;
    }

    fn merge(&mut self, other: &Accumulator) {
        for i in 0..self.sum.len() {
            self.add(i, other.sum[i]);
            self.add(i, other.comp[i]);
        }
    }

    fn value(&self, i: usize) -> f64 {
        self.sum[i] + self.comp[i]
    }

    fn clear(&mut self) {
        self.sum.iter_mut().for_each(|x| *x = 0.0);
        self.comp.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Result of replaying one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub model: ToyModel,
    /// Peak stashed micro-batch ids per worker (replica 0).
    pub peak_stash: Vec<u32>,
    /// Stashed ids on each worker after every task of replica 0.
    pub stash_trace: Vec<Vec<u32>>,
}

/// Samples one iteration of `s` consumes: every replica runs every id.
pub fn samples_needed(s: &Schedule) -> usize {
    let ids = id_count(s);
    s.config.width as usize * ids * samples_per_id(s)
}

fn id_count(s: &Schedule) -> usize {
    s.micro_batch_ids().len()
}

fn samples_per_id(s: &Schedule) -> usize {
    s.config.samples_per_id() as usize
}

fn sample_index(s: &Schedule, replica: usize, id: u32, j: usize) -> usize {
    (replica * id_count(s) + id as usize) * samples_per_id(s) + j
}

fn task_order(s: &Schedule, order: ExecOrder) -> Result<Vec<(usize, usize)>> {
    match order {
        ExecOrder::Topological => {
            let g = TaskGraph::build(s)?;
            Ok(g.order.iter().map(|&n| g.nodes[n]).collect())
        }
        ExecOrder::Simulated => {
            let t = timed_compute(s, &CostProfile::default())?;
            let timing = t.timing.as_ref().expect("timed");
            let mut v: Vec<(f64, usize, usize)> = timing
                .iter()
                .enumerate()
                .flat_map(|(w, r)| r.iter().enumerate().map(move |(p, i)| (i.start, w, p)))
                .collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            Ok(v.into_iter().map(|(_, w, p)| (w, p)).collect())
        }
    }
}

type StashKey = (usize, u32, u32, u32);
/// Per-sample `(input, output)` of one stage forward.
type Saved = Vec<(Vec<f64>, Vec<f64>)>;

/// Replays `s` on `model` with plain SGD at rate `lr` and returns the
/// updated model.
pub fn run_iteration(s: &Schedule, model: &ToyModel, batch: &Batch, lr: f64) -> Result<ToyModel> {
    Ok(execute(s, model, batch, lr, ExecOrder::Simulated)?.model)
}

/// Replays `s`. Synchronous schemes sum the gradients of every stage copy
/// and replica, divide by the mini-batch size and update once at the end.
/// PipeDream updates a stage after every backward with weight stashing;
/// PipeDream-2BW commits a new version after each accumulation window.
pub fn execute(s: &Schedule, model: &ToyModel, batch: &Batch, lr: f64, order: ExecOrder) -> Result<ExecReport> {
    let d = s.config.depth as usize;
    if model.depth() != d {
        return Err(Error::InvalidArgument(format!("model has {} stages, schedule {d}", model.depth())));
    }
    if batch.len() != samples_needed(s) {
        return Err(Error::InvalidArgument(format!(
            "batch has {} samples, schedule needs {}",
            batch.len(),
            samples_needed(s)
        )));
    }
    let spid = samples_per_id(s);
    if spid == 0 {
        return Err(Error::InvalidArgument("micro-batch id carries no samples".into()));
    }
    let replicas = s.config.width as usize;
    let act = model.activation;
    let sync = s.config.scheme.is_synchronous();
    let order = task_order(s, order)?;

    // sync: one copy per (replica, pipeline, stage); async: versions per stage
    let mut copies: HashMap<(usize, u32, u32), Matrix> = HashMap::new();
    let mut versions: Vec<Vec<Matrix>> = model.weights.iter().map(|w| vec![w.clone()]).collect();
    let mut acc: HashMap<(usize, u32, u32), Accumulator> = HashMap::new();
    let mut window_acc: Vec<Accumulator> = model.weights.iter().map(|w| Accumulator::new(w.data.len())).collect();
    let mut backwards_done = vec![0u32; d];
    // per-sample (input, output) of a forward, and the gradient a backward sends upstream
    let mut stash: HashMap<StashKey, Saved> = HashMap::new();
    let mut upstream: HashMap<StashKey, Vec<Vec<f64>>> = HashMap::new();

    let mut live = vec![0u32; s.workers()];
    let mut peak_stash = vec![0u32; s.workers()];
    let mut stash_trace = vec![Vec::new(); s.workers()];

    for (w, p) in order {
        let t: Task = s.per_worker[w][p];
        if !t.kind.is_compute() {
            continue;
        }
        let stage = t.stage as usize;
        let weights_for = |copies: &mut HashMap<(usize, u32, u32), Matrix>,
                           versions: &[Vec<Matrix>],
                           r: usize|
         -> Result<Matrix> {
            if sync {
                Ok(copies.entry((r, t.pipeline_id, t.stage)).or_insert_with(|| model.weights[stage].clone()).clone())
            } else {
                let v = t.weight_version.unwrap_or(0);
                versions[stage].get(v as usize).cloned().ok_or(Error::VersionMismatch { key: t.key(), version: v })
            }
        };
        let mut step_grad = Accumulator::new(model.weights[stage].data.len());
        for r in 0..replicas {
            let wm = weights_for(&mut copies, &versions, r)?;
            match t.kind {
                TaskKind::Forward => {
                    // a multi-id forward runs its ids one after another
                    for id in t.micro_batch_ids() {
                        let mut out = Vec::with_capacity(spid);
                        for j in 0..spid {
                            let x = if stage == 0 {
                                batch.inputs[sample_index(s, r, id, j)].clone()
                            } else {
                                let k = (r, t.pipeline_id, id, t.stage - 1);
                                let prev = stash.get(&k).ok_or(Error::MissingActivation(TaskKey {
                                    micro_batch: id,
                                    stage: t.stage - 1,
                                    ..t.key()
                                }))?;
                                prev[j].1.clone()
                            };
                            let y = ToyModel::layer_forward(&wm, act, &x);
                            out.push((x, y));
                        }
                        stash.insert((r, t.pipeline_id, id, t.stage), out);
                    }
                }
                TaskKind::Backward => {
                    let key = (r, t.pipeline_id, t.micro_batch, t.stage);
                    let saved = stash
                        .remove(&key)
                        .ok_or(Error::MissingActivation(TaskKey { kind: TaskKind::Forward, ..t.key() }))?;
                    let grads_in = if stage + 1 == d {
                        (0..spid)
                            .map(|j| {
                                let tgt = &batch.targets[sample_index(s, r, t.micro_batch, j)];
                                saved[j].1.iter().zip(tgt).map(|(y, t)| y - t).collect()
                            })
                            .collect()
                    } else {
                        upstream
                            .remove(&(r, t.pipeline_id, t.micro_batch, t.stage + 1))
                            .ok_or(Error::MissingActivation(TaskKey { stage: t.stage + 1, ..t.key() }))?
                    };
                    let target = if sync {
                        acc.entry((r, t.pipeline_id, t.stage)).or_insert_with(|| Accumulator::new(wm.data.len()))
                    } else {
                        &mut step_grad
                    };
                    let mut sent = Vec::with_capacity(spid);
                    for ((x, y), da) in saved.iter().zip(&grads_in) {
                        sent.push(ToyModel::layer_backward(&wm, act, x, y, da, &mut |i, v| target.add(i, v)));
                    }
                    if stage > 0 {
                        upstream.insert(key, sent);
                    }
                }
                _ => unreachable!(),
            }
        }
        {
            match t.kind {
                TaskKind::Forward => live[w] += t.covers,
                _ => live[w] -= 1,
            }
            peak_stash[w] = peak_stash[w].max(live[w]);
            stash_trace[w].push(live[w]);
        }
        if t.kind == TaskKind::Backward && !sync {
            backwards_done[stage] += 1;
            let latest = versions[stage].last().expect("initial version").clone();
            match s.config.scheme {
                Scheme::PipeDream => {
                    let scale = lr / (spid * replicas) as f64;
                    versions[stage].push(apply(&latest, &step_grad, scale));
                }
                _ => {
                    window_acc[stage].merge(&step_grad);
                    let n = s.config.micro_batches;
                    if backwards_done[stage].is_multiple_of(n) {
                        let scale = lr / (n as usize * spid * replicas) as f64;
                        versions[stage].push(apply(&latest, &window_acc[stage], scale));
                        window_acc[stage].clear();
                    }
                }
            }
        }
    }

    let weights = if sync {
        let b_hat = samples_needed(s) as f64;
        (0..d)
            .map(|st| {
                let mut total = Accumulator::new(model.weights[st].data.len());
                let mut keys: Vec<_> = acc.keys().filter(|k| k.2 as usize == st).copied().collect();
                keys.sort_unstable();
                for k in keys {
                    total.merge(&acc[&k]);
                }
                apply(&model.weights[st], &total, lr / b_hat)
            })
            .collect()
    } else {
        versions.into_iter().map(|mut v| v.pop().expect("initial version")).collect()
    };
    Ok(ExecReport { model: ToyModel { weights, activation: act }, peak_stash, stash_trace })
}

fn apply(w: &Matrix, g: &Accumulator, scale: f64) -> Matrix {
    Matrix { data: w.data.iter().enumerate().map(|(i, x)| x - scale * g.value(i)).collect(), ..w.clone() }
}

/// Sequential SGD with one step per micro-batch id, in id order, each step
/// averaging the id's samples across all replicas: what an asynchronous
/// pipeline would compute without staleness.
pub fn sequential_micro_batch_sgd(s: &Schedule, model: &ToyModel, batch: &Batch, lr: f64) -> ToyModel {
    let spid = samples_per_id(s);
    let mut m = model.clone();
    for id in s.micro_batch_ids() {
        let idx: Vec<usize> = (0..s.config.width as usize)
            .flat_map(|r| (0..spid).map(move |j| (r, j)))
            .map(|(r, j)| sample_index(s, r, id, j))
            .collect();
        let sub = Batch {
            inputs: idx.iter().map(|&i| batch.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| batch.targets[i].clone()).collect(),
        };
        m = m.sgd_step(&sub, lr);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::memory_profile;
    use crate::oracle::model::sequential_sgd;
    use crate::schedgen::gen_schedule;
    use crate::types::{PipelineConfig, Scaling};

    fn setup(c: PipelineConfig) -> (Schedule, ToyModel, Batch) {
        let s = gen_schedule(&c).unwrap();
        let m = ToyModel::uniform(c.depth as usize, 5, 3);
        let b = Batch::random(samples_needed(&s), 5, 5, 11);
        (s, m, b)
    }

    #[test]
    fn chimera_matches_sequential() {
        let (s, m, b) = setup(PipelineConfig::new(Scheme::Chimera, 4, 4).with_width(2).with_micro_batch_size(2));
        let out = run_iteration(&s, &m, &b, 0.1).unwrap();
        assert!(out.rel_diff(&sequential_sgd(&m, &b, 0.1)) <= 1e-12);
    }

    #[test]
    fn halving_uses_half_micro_batches() {
        let c =
            PipelineConfig::new(Scheme::Chimera, 4, 8).with_micro_batch_size(2).with_scaling(Scaling::BackwardHalving);
        let (s, m, b) = setup(c);
        assert_eq!(b.len(), 8);
        let out = run_iteration(&s, &m, &b, 0.1).unwrap();
        assert!(out.rel_diff(&sequential_sgd(&m, &b, 0.1)) <= 1e-12);
    }

    #[test]
    fn orders_agree() {
        let (s, m, b) = setup(PipelineConfig::new(Scheme::Chimera, 4, 8).with_scaling(Scaling::ForwardDoubling));
        let a = execute(&s, &m, &b, 0.1, ExecOrder::Simulated).unwrap().model;
        let t = execute(&s, &m, &b, 0.1, ExecOrder::Topological).unwrap().model;
        assert!(a.rel_diff(&t) <= 1e-10);
    }

    #[test]
    fn stash_peaks_match_memory_profile() {
        for scheme in [Scheme::GPipe, Scheme::Dapple, Scheme::Chimera, Scheme::Gems] {
            let (s, m, b) = setup(PipelineConfig::new(scheme, 4, 4));
            let rep = execute(&s, &m, &b, 0.1, ExecOrder::Simulated).unwrap();
            assert_eq!(rep.peak_stash, memory_profile(&s, &CostProfile::default()).act_counts, "{scheme}");
        }
    }

    #[test]
    fn pipedream_is_stale() {
        let (s, m, b) = setup(PipelineConfig::new(Scheme::PipeDream, 4, 1));
        let out = run_iteration(&s, &m, &b, 0.1).unwrap();
        assert!(out.rel_diff(&sequential_micro_batch_sgd(&s, &m, &b, 0.1)) > 1e-6);
    }

    #[test]
    fn wrong_batch_rejected() {
        let (s, m, _) = setup(PipelineConfig::new(Scheme::Dapple, 4, 4));
        let b = Batch::random(3, 5, 5, 0);
        assert!(matches!(run_iteration(&s, &m, &b, 0.1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn missing_forward_reported() {
        let (mut s, m, b) = setup(PipelineConfig::new(Scheme::Dapple, 2, 2));
        s.per_worker[1].retain(|t| !(t.kind == TaskKind::Forward && t.micro_batch == 0));
        assert!(execute(&s, &m, &b, 0.1, ExecOrder::Topological).is_err());
    }
}
