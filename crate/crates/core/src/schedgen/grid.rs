//! Uniform-slot grids: every forward and every backward occupies one slot.
//! Pipelines are built as grids, overlaid, and then linearized into
//! per-worker task orders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{PipelineConfig, Schedule, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Stage `s` runs on worker `(origin + s) mod D`.
    Down,
    /// Stage `s` runs on worker `(origin + D - 1 - s) mod D`.
    Up,
}

impl Direction {
    pub fn worker_of(self, depth: u32, origin: u32, stage: u32) -> u32 {
        match self {
            Direction::Down => (origin + stage) % depth,
            Direction::Up => (origin + depth - 1 - stage) % depth,
        }
    }
}

/// `slots[worker][slot]`, at most one task per cell.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SlotGrid {
    slots: Vec<Vec<Option<Task>>>,
}

impl SlotGrid {
    pub fn new(workers: usize) -> Self {
        Self { slots: vec![Vec::new(); workers] }
    }

    pub fn workers(&self) -> usize {
        self.slots.len()
    }

    /// One past the last occupied slot on any worker.
    pub fn width(&self) -> u32 {
        self.slots.iter().map(|row| row.iter().rposition(Option::is_some).map_or(0, |i| i + 1)).max().unwrap_or(0)
            as u32
    }

    pub fn get(&self, worker: usize, slot: u32) -> Option<&Task> {
        self.slots.get(worker)?.get(slot as usize)?.as_ref()
    }

    pub fn is_free(&self, worker: usize, slot: u32) -> bool {
        self.get(worker, slot).is_none()
    }

    pub fn place(&mut self, worker: usize, slot: u32, task: Task) -> Result<()> {
        let row = &mut self.slots[worker];
        let idx = slot as usize;
        if row.len() <= idx {
            row.resize(idx + 1, None);
        }
        if row[idx].is_some() {
            return Err(Error::Conflict { worker: worker as u32, slot });
        }
        row[idx] = Some(task);
        Ok(())
    }

    /// All `(worker, slot, task)` triples in worker-major slot order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, u32, &Task)> {
        self.slots
            .iter()
            .enumerate()
            .flat_map(|(w, row)| row.iter().enumerate().filter_map(move |(s, t)| t.as_ref().map(|t| (w, s as u32, t))))
    }

    pub fn len(&self) -> usize {
        self.cells().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Idle cells inside `[0, width)` on one worker.
    pub fn idle_slots(&self, worker: usize) -> u32 {
        let width = self.width() as usize;
        let row = &self.slots[worker];
        (0..width).filter(|&i| row.get(i).is_none_or(Option::is_none)).count() as u32
    }

    /// The same grid moved `offset` slots to the right.
    pub fn shifted(&self, offset: u32) -> SlotGrid {
        let mut out = SlotGrid::new(self.workers());
        for (w, s, t) in self.cells() {
            out.place(w, s + offset, *t).expect("shift preserves disjointness");
        }
        out
    }

    /// Applies `f` to every task.
    pub fn map_tasks(&self, mut f: impl FnMut(&Task) -> Task) -> SlotGrid {
        let mut out = SlotGrid::new(self.workers());
        for (w, s, t) in self.cells() {
            out.place(w, s, f(t)).expect("map preserves disjointness");
        }
        out
    }

    /// Per-worker orders sorted by slot.
    pub fn linearize(&self, config: PipelineConfig) -> Schedule {
        let mut per_worker = Vec::with_capacity(self.workers());
        let mut slots = Vec::with_capacity(self.workers());
        for row in &self.slots {
            let (tasks, pos): (Vec<Task>, Vec<u32>) =
                row.iter().enumerate().filter_map(|(s, t)| t.map(|t| (t, s as u32))).unzip();
            per_worker.push(tasks);
            slots.push(pos);
        }
        Schedule { config, per_worker, slots: Some(slots), timing: None }
    }

    /// Rebuilds the grid from a schedule that carries slot positions.
    pub fn from_schedule(s: &Schedule) -> Result<SlotGrid> {
        let slots =
            s.slots.as_ref().ok_or_else(|| Error::InvalidArgument("schedule carries no slot positions".into()))?;
        let mut g = SlotGrid::new(s.workers());
        for (w, (tasks, pos)) in s.per_worker.iter().zip(slots).enumerate() {
            for (t, &p) in tasks.iter().zip(pos) {
                g.place(w, p, *t)?;
            }
        }
        Ok(g)
    }

    /// Smallest offset at which `other` overlays `self` without conflict.
    pub fn first_free_offset(&self, other: &SlotGrid) -> u32 {
        (0..)
            .find(|&off| other.cells().all(|(w, s, _)| self.is_free(w, s + off)))
            .expect("an offset past the grid width always fits")
    }
}

/// One pipeline of `n_micro` micro-batches under 1F1B on `depth` stages.
///
/// Micro-batch `k` runs its forward on stage `s` at slot `s + 2k` and its
/// backward at slot `2D - 1 - s + 2k`: every stage keeps the steady-state
/// one-forward-one-backward cadence, stage `s` holds up to `D - s` forwards
/// in flight, and forward and backward slots on a stage have opposite parity.
/// The parity split is what lets an up pipeline interleave with a down
/// pipeline on the same workers.
pub fn gen_1f1b_pipeline(
    depth: u32,
    n_micro: u32,
    direction: Direction,
    pipeline_id: u32,
    origin_worker: u32,
    first_micro_batch: u32,
) -> SlotGrid {
    assert!(depth >= 1 && origin_worker < depth, "origin worker outside pipeline");
    let mut g = SlotGrid::new(depth as usize);
    for k in 0..n_micro {
        let mb = first_micro_batch + k;
        for s in 0..depth {
            let w = direction.worker_of(depth, origin_worker, s);
            g.place(w as usize, s + 2 * k, Task::forward(pipeline_id, mb, s, w)).expect("forward slots are distinct");
            g.place(w as usize, 2 * depth - 1 - s + 2 * k, Task::backward(pipeline_id, mb, s, w))
                .expect("backward slots are distinct");
        }
    }
    g
}

/// Union of all grids; fails on the first doubly-claimed cell.
pub fn merge_grids(grids: &[SlotGrid]) -> Result<SlotGrid> {
    let Some(first) = grids.first() else {
        return Ok(SlotGrid::default());
    };
    let workers = first.workers();
    if let Some(bad) = grids.iter().find(|g| g.workers() != workers) {
        return Err(Error::InvalidArgument(format!(
            "cannot merge grids over {} and {} workers",
            workers,
            bad.workers()
        )));
    }
    let mut out = SlotGrid::new(workers);
    for g in grids {
        for (w, s, t) in g.cells() {
            out.place(w, s, *t)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TaskKind;

    fn row(g: &SlotGrid, w: usize) -> String {
        (0..g.width())
            .map(|s| match g.get(w, s) {
                Some(t) => t.label(),
                None => "..".into(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn down_pipeline_two_micro_batches() {
        let g = gen_1f1b_pipeline(4, 2, Direction::Down, 0, 0, 0);
        assert_eq!(row(&g, 0), "F0 .. F1 .. .. .. .. B0 .. B1");
        assert_eq!(row(&g, 1), ".. F0 .. F1 .. .. B0 .. B1 ..");
        assert_eq!(row(&g, 2), ".. .. F0 .. F1 B0 .. B1 .. ..");
        assert_eq!(row(&g, 3), ".. .. .. F0 B0 F1 B1 .. .. ..");
    }

    #[test]
    fn single_stage_has_no_idle_slots() {
        let g = gen_1f1b_pipeline(1, 3, Direction::Down, 0, 0, 0);
        assert_eq!(row(&g, 0), "F0 B0 F1 B1 F2 B2");
        assert_eq!(g.idle_slots(0), 0);
    }

    #[test]
    fn up_pipeline_mirrors_down() {
        let down = gen_1f1b_pipeline(4, 2, Direction::Down, 0, 0, 0);
        let up = gen_1f1b_pipeline(4, 2, Direction::Up, 1, 0, 0);
        for (w, s, t) in down.cells() {
            let mirrored = up.get(3 - w, s).expect("mirror cell occupied");
            assert_eq!((mirrored.kind, mirrored.micro_batch, mirrored.stage), (t.kind, t.micro_batch, t.stage));
            assert_eq!(mirrored.pipeline_id, 1);
        }
        assert_eq!(down.len(), up.len());
    }

    #[test]
    fn merging_two_directions_is_conflict_free() {
        let down = gen_1f1b_pipeline(4, 2, Direction::Down, 0, 0, 0);
        let up = gen_1f1b_pipeline(4, 2, Direction::Up, 1, 0, 2);
        let m = merge_grids(&[down, up]).unwrap();
        assert_eq!(m.len(), 32);
        assert_eq!(row(&m, 0), "F0 .. F1 F2 B2 F3 B3 B0 .. B1");
        assert_eq!(row(&m, 1), ".. F0 F2 F1 F3 B2 B0 B3 B1 ..");
        for w in 0..4 {
            assert_eq!(m.idle_slots(w), 2);
        }
    }

    #[test]
    fn merge_identity_and_self_conflict() {
        let g = gen_1f1b_pipeline(4, 2, Direction::Down, 0, 0, 0);
        assert_eq!(merge_grids(&[g.clone(), SlotGrid::new(4)]).unwrap(), g);
        assert_eq!(merge_grids(&[g.clone(), g.clone()]), Err(Error::Conflict { worker: 0, slot: 0 }));
        assert!(merge_grids(&[g, SlotGrid::new(3)]).is_err());
    }

    #[test]
    fn linearize_keeps_slot_order() {
        let g = gen_1f1b_pipeline(2, 2, Direction::Down, 0, 0, 0);
        let s = g.linearize(PipelineConfig::new(crate::types::Scheme::Dapple, 2, 2));
        let kinds: Vec<_> = s.per_worker[1].iter().map(|t| t.kind).collect();
        assert_eq!(kinds, [TaskKind::Forward, TaskKind::Backward, TaskKind::Forward, TaskKind::Backward]);
        assert_eq!(SlotGrid::from_schedule(&s).unwrap(), g);
    }
}
