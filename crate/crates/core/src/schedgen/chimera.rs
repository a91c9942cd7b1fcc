//! Bidirectional pipelines: `f` down and `f` up pipelines overlaid on the
//! same `D` workers, plus the three ways of running more than `D`
//! micro-batches per iteration.

use crate::error::{Error, Result};
use crate::schedgen::grid::{gen_1f1b_pipeline, merge_grids, Direction, SlotGrid};
use crate::types::{PipelineConfig, Scaling, Schedule, Scheme, Task, TaskKind};

/// Splits `total` into `parts` near-equal shares, earlier parts first.
fn split_evenly(total: u32, parts: u32) -> Vec<u32> {
    let (q, r) = (total / parts, total % parts);
    (0..parts).map(|i| q + u32::from(i < r)).collect()
}

/// Grid for one basic unit of `n` micro-batches (`n <= D`), ids starting at
/// `first_id`. Down pipeline `i` has id `2i` and originates at worker
/// `i * D / f`; up pipeline `i` has id `2i + 1` and uses the reverse mapping.
pub fn chimera_unit(depth: u32, f: u32, n: u32, first_id: u32) -> Result<SlotGrid> {
    let origin_step = depth / f;
    let down = split_evenly(n.div_ceil(2), f);
    let up = split_evenly(n / 2, f);
    let mut next = first_id;
    let mut grids = Vec::with_capacity(2 * f as usize);
    for (dir, shares) in [(Direction::Down, &down), (Direction::Up, &up)] {
        for (i, &count) in shares.iter().enumerate() {
            let i = i as u32;
            let id = 2 * i + u32::from(dir == Direction::Up);
            grids.push(gen_1f1b_pipeline(depth, count, dir, id, i * origin_step, next));
            next += count;
        }
    }
    merge_grids(&grids)
}

/// Generates the Chimera schedule for `config`. Timing is left unassigned.
pub fn gen_chimera(config: &PipelineConfig) -> Result<Schedule> {
    let v = config.violations();
    if !v.is_empty() || config.scheme != Scheme::Chimera {
        return Err(Error::InvalidConfig(v));
    }
    let d = config.depth;
    let n = config.micro_batches;
    if n <= d {
        return Ok(chimera_unit(d, config.f, n, 0)?.linearize(*config));
    }
    let base_cfg = PipelineConfig { micro_batches: d, scaling: Scaling::Direct, ..*config };
    let base = chimera_unit(d, config.f, d, 0)?.linearize(base_cfg);
    let k = n / d;
    let scaled = match config.scaling {
        Scaling::Direct => scale_direct(&base, k)?,
        Scaling::ForwardDoubling => scale_forward_doubling(&base, k)?,
        Scaling::BackwardHalving => scale_backward_halving(&base, k)?,
    };
    Ok(Schedule { config: PipelineConfig { recompute: scaled.config.recompute, ..*config }, ..scaled })
}

fn renumbered(grid: &SlotGrid, offset: u32) -> SlotGrid {
    grid.map_tasks(|t| Task { micro_batch: t.micro_batch + offset, ..*t })
}

/// Appends `next` to `acc` at the first conflict-free offset.
fn concat(acc: SlotGrid, next: &SlotGrid) -> Result<SlotGrid> {
    let off = acc.first_free_offset(next);
    merge_grids(&[acc, next.shifted(off)])
}

fn unit_size(base: &Schedule) -> u32 {
    base.micro_batch_ids().len() as u32
}

/// `K` copies of the basic unit, each overlaid at the earliest slot where it
/// fits, so the next unit's forwards fill the previous unit's trailing
/// bubbles. Micro-batch ids of copy `u` are shifted by `u` units.
pub fn scale_direct(base: &Schedule, k: u32) -> Result<Schedule> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let unit = SlotGrid::from_schedule(base)?;
    let size = unit_size(base);
    let mut acc = unit.clone();
    for u in 1..k {
        acc = concat(acc, &renumbered(&unit, u * size))?;
    }
    let config = PipelineConfig { micro_batches: base.config.micro_batches * k, ..base.config };
    Ok(acc.linearize(config))
}

/// Two-unit block with every forward carrying two micro-batches: virtual
/// micro-batch `v` of the basic unit becomes ids `2v` and `2v + 1`. The
/// backwards of the first ids keep the basic unit's slots; the backwards of
/// the second ids follow as a second chunk `D` slots later.
fn doubled_unit(unit: &SlotGrid, depth: u32, first_id: u32) -> Result<SlotGrid> {
    let mut out = SlotGrid::new(unit.workers());
    for (w, s, t) in unit.cells() {
        let pair = first_id + 2 * t.micro_batch;
        match t.kind {
            TaskKind::Forward => {
                out.place(w, s, Task { micro_batch: pair, covers: 2, ..*t })?;
            }
            _ => {
                out.place(w, s, Task { micro_batch: pair, ..*t })?;
                out.place(w, s + depth, Task { micro_batch: pair + 1, ..*t })?;
            }
        }
    }
    Ok(out)
}

fn scale_equalized(base: &Schedule, k: u32, scaling: Scaling) -> Result<Schedule> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("{scaling} needs K >= 2, got {k}")));
    }
    let unit = SlotGrid::from_schedule(base)?;
    let size = unit_size(base);
    let depth = base.config.depth;
    let block = doubled_unit(&unit, depth, 0)?;
    let mut acc = block.clone();
    for u in 1..k / 2 {
        acc = concat(acc, &renumbered(&block, u * 2 * size))?;
    }
    if k % 2 == 1 {
        acc = concat(acc, &renumbered(&unit, (k - 1) * size))?;
    }
    let config = PipelineConfig {
        micro_batches: base.config.micro_batches * k,
        scaling,
        recompute: base.config.recompute || scaling == Scaling::ForwardDoubling,
        ..base.config
    };
    Ok(acc.linearize(config))
}

/// Forward doubling: each forward covers two micro-batches (twice the
/// compute and payload), backwards stay per micro-batch, and activation
/// recomputation is switched on. For `K > 2`, `K / 2` two-unit blocks are
/// concatenated and one basic unit is appended when `K` is odd.
pub fn scale_forward_doubling(base: &Schedule, k: u32) -> Result<Schedule> {
    scale_equalized(base, k, Scaling::ForwardDoubling)
}

/// Backward halving: the task pattern of forward doubling, but an id is a
/// half micro-batch, so a forward processes one full micro-batch and every
/// backward processes `B / 2` samples. Recomputation stays as configured.
pub fn scale_backward_halving(base: &Schedule, k: u32) -> Result<Schedule> {
    if base.config.micro_batch_size % 2 == 1 {
        return Err(Error::InvalidConfig(vec![crate::types::ConfigViolation::OddMicroBatchForHalving {
            b: base.config.micro_batch_size,
        }]));
    }
    scale_equalized(base, k, Scaling::BackwardHalving)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: u32, n: u32) -> PipelineConfig {
        PipelineConfig::new(Scheme::Chimera, d, n)
    }

    #[test]
    fn micro_batch_split_favours_down() {
        for n in 1..=8 {
            let s = gen_chimera(&cfg(8, n)).unwrap();
            let down: u32 =
                s.tasks().filter(|t| t.kind == TaskKind::Forward && t.stage == 0 && t.pipeline_id % 2 == 0).count()
                    as u32;
            assert_eq!(down, n.div_ceil(2), "N={n}");
            assert_eq!(s.micro_batch_ids(), (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_micro_batch_runs_on_one_pipeline() {
        let s = gen_chimera(&cfg(4, 1)).unwrap();
        assert!(s.tasks().all(|t| t.pipeline_id == 0));
        assert_eq!(s.task_count(), 8);
    }

    #[test]
    fn generalized_down_pipeline_origin() {
        let s = gen_chimera(&cfg(8, 8).with_f(2)).unwrap();
        // down pipeline 1 maps stages 0..7 to workers 4,5,6,7,0,1,2,3
        for t in s.tasks().filter(|t| t.pipeline_id == 2) {
            assert_eq!(t.worker, (4 + t.stage) % 8);
        }
        // up pipeline 1 is its complete reverse
        for t in s.tasks().filter(|t| t.pipeline_id == 3) {
            assert_eq!(t.worker, (4 + 7 - t.stage) % 8);
        }
    }

    #[test]
    fn direct_k1_is_identity() {
        let base = gen_chimera(&cfg(4, 4)).unwrap();
        assert_eq!(scale_direct(&base, 1).unwrap(), base);
    }

    #[test]
    fn direct_concatenation_fills_trailing_bubbles() {
        let base = gen_chimera(&cfg(4, 4)).unwrap();
        let two = scale_direct(&base, 2).unwrap();
        let g = SlotGrid::from_schedule(&two).unwrap();
        // the second unit starts 2D slots later and the merged grid is
        // as wide as two units minus the overlap
        assert_eq!(g.width(), 18);
        assert_eq!(two.micro_batch_ids(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn doubling_pattern_and_residual() {
        let base = gen_chimera(&cfg(4, 4)).unwrap();
        let s = scale_forward_doubling(&base, 2).unwrap();
        assert!(s.config.recompute);
        assert_eq!(s.config.scaling, Scaling::ForwardDoubling);
        let fwd: Vec<_> = s.tasks().filter(|t| t.kind == TaskKind::Forward).collect();
        assert!(fwd.iter().all(|t| t.covers == 2));
        assert_eq!(fwd.len(), 16);
        assert_eq!(s.tasks().filter(|t| t.kind == TaskKind::Backward).count(), 32);

        let odd = scale_forward_doubling(&base, 3).unwrap();
        let covers: Vec<u32> =
            odd.tasks().filter(|t| t.kind == TaskKind::Forward && t.stage == 0).map(|t| t.covers).collect();
        assert_eq!(covers.iter().filter(|&&c| c == 2).count(), 4);
        assert_eq!(covers.iter().filter(|&&c| c == 1).count(), 4);
        assert_eq!(odd.micro_batch_ids(), (0..12).collect::<Vec<_>>());
        assert!(scale_forward_doubling(&base, 1).is_err());
    }

    #[test]
    fn halving_shares_doubling_slots() {
        let c = cfg(4, 4).with_micro_batch_size(2);
        let base = gen_chimera(&c).unwrap();
        let d = scale_forward_doubling(&base, 2).unwrap();
        let h = scale_backward_halving(&base, 2).unwrap();
        assert_eq!(d.per_worker, h.per_worker);
        assert_eq!(d.slots, h.slots);
        assert!(!h.config.recompute);
        let odd = base.clone();
        let odd = Schedule { config: PipelineConfig { micro_batch_size: 3, ..odd.config }, ..odd };
        assert!(matches!(scale_backward_halving(&odd, 2), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(gen_chimera(&cfg(5, 4)), Err(Error::InvalidConfig(_))));
        assert!(matches!(gen_chimera(&cfg(4, 6)), Err(Error::InvalidConfig(_))));
    }
}
