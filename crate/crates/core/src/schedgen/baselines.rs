//! The single-direction schemes Chimera is compared against.

use crate::error::{Error, Result};
use crate::schedgen::grid::{gen_1f1b_pipeline, Direction, SlotGrid};
use crate::types::{PipelineConfig, Schedule, Scheme, Task, TaskKind};

fn check(config: &PipelineConfig, scheme: Scheme) -> Result<()> {
    let v = config.violations();
    if v.is_empty() && config.scheme == scheme {
        Ok(())
    } else if v.is_empty() {
        Err(Error::InvalidArgument(format!("expected a {scheme} config, got {}", config.scheme)))
    } else {
        Err(Error::InvalidConfig(v))
    }
}

/// All `N` forwards first, then all backwards in reverse stage order.
pub fn gen_gpipe(config: &PipelineConfig) -> Result<Schedule> {
    check(config, Scheme::GPipe)?;
    let (d, n) = (config.depth, config.micro_batches);
    let mut g = SlotGrid::new(d as usize);
    for k in 0..n {
        for s in 0..d {
            g.place(s as usize, s + k, Task::forward(0, k, s, s))?;
            g.place(s as usize, n + d - 1 + (d - 1 - s) + k, Task::backward(0, k, s, s))?;
        }
    }
    Ok(g.linearize(*config))
}

/// 1F1B with a flush at the end of every iteration.
pub fn gen_dapple(config: &PipelineConfig) -> Result<Schedule> {
    check(config, Scheme::Dapple)?;
    Ok(gen_1f1b_pipeline(config.depth, config.micro_batches, Direction::Down, 0, 0, 0).linearize(*config))
}

/// Two model replicas in opposite directions; micro-batch `m` runs on
/// replica `m % 2`. Every worker completes the forward and backward of one
/// micro-batch before starting the next, so at most two micro-batches are
/// active at a time and each worker holds one activation.
pub fn gen_gems(config: &PipelineConfig) -> Result<Schedule> {
    check(config, Scheme::Gems)?;
    let d = config.depth;
    let mut per_worker = vec![Vec::new(); d as usize];
    for m in 0..config.micro_batches {
        let (pipe, dir) = if m % 2 == 0 { (0, Direction::Down) } else { (1, Direction::Up) };
        for s in 0..d {
            let w = dir.worker_of(d, 0, s);
            per_worker[w as usize].push((s, Task::forward(pipe, m, s, w)));
        }
    }
    // each worker alternates F_m B_m in micro-batch order
    let per_worker = per_worker
        .into_iter()
        .map(|row| row.into_iter().flat_map(|(_, f)| [f, Task { kind: TaskKind::Backward, ..f }]).collect())
        .collect();
    Ok(Schedule { config: *config, per_worker, slots: None, timing: None })
}

/// Micro-batches in one asynchronous 1F1B stream; stamps come from `version`.
fn async_stream(config: &PipelineConfig, len: u32, version: impl Fn(&Task, u32) -> u32) -> Schedule {
    let mut s = gen_1f1b_pipeline(config.depth, len, Direction::Down, 0, 0, 0).linearize(*config);
    for row in &mut s.per_worker {
        let mut done = 0;
        let mut fwd_version = std::collections::HashMap::new();
        for t in row.iter_mut() {
            let v = match t.kind {
                TaskKind::Forward => {
                    let v = version(t, done);
                    fwd_version.insert(t.micro_batch, v);
                    v
                }
                _ => {
                    done += 1;
                    fwd_version[&t.micro_batch]
                }
            };
            t.weight_version = Some(v);
        }
    }
    s
}

/// Micro-batches in the stream PipeDream schedules are generated for.
pub fn pipedream_stream_len(config: &PipelineConfig) -> u32 {
    match config.scheme {
        Scheme::PipeDream => 2 * config.depth,
        _ => 2 * config.micro_batches,
    }
}

/// 1F1B with no flush over `2D` micro-batches. A stage updates its weights
/// after every backward, so a forward reads the version produced by all
/// earlier backwards on its worker, and its backward reuses the stashed
/// version.
pub fn gen_pipedream(config: &PipelineConfig) -> Result<Schedule> {
    check(config, Scheme::PipeDream)?;
    Ok(async_stream(config, pipedream_stream_len(config), |_, done| done))
}

/// 1F1B with no flush over two accumulation windows of `N` micro-batches.
/// Gradients of window `k` are committed after the window drains, and
/// forwards of window `k` read the version committed one window earlier,
/// so only two versions are ever live.
pub fn gen_pipedream_2bw(config: &PipelineConfig) -> Result<Schedule> {
    check(config, Scheme::PipeDream2BW)?;
    let n = config.micro_batches;
    Ok(async_stream(config, pipedream_stream_len(config), |t, _| (t.micro_batch / n).saturating_sub(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(s: &Schedule, w: usize) -> String {
        s.per_worker[w].iter().map(Task::label).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn gpipe_injects_all_forwards_first() {
        let s = gen_gpipe(&PipelineConfig::new(Scheme::GPipe, 4, 4)).unwrap();
        for w in 0..4 {
            assert_eq!(row(&s, w), "F0 F1 F2 F3 B0 B1 B2 B3");
        }
        assert_eq!(s.slots.as_ref().unwrap()[0], [0, 1, 2, 3, 10, 11, 12, 13]);
        assert_eq!(s.slots.as_ref().unwrap()[3], [3, 4, 5, 6, 7, 8, 9, 10]);
    }

    #[test]
    fn dapple_warmup_depth() {
        let s = gen_dapple(&PipelineConfig::new(Scheme::Dapple, 4, 4)).unwrap();
        assert_eq!(row(&s, 0), "F0 F1 F2 F3 B0 B1 B2 B3");
        assert_eq!(row(&s, 1), "F0 F1 F2 B0 F3 B1 B2 B3");
        assert_eq!(row(&s, 3), "F0 B0 F1 B1 F2 B2 F3 B3");
    }

    #[test]
    fn gems_alternates_replicas() {
        let s = gen_gems(&PipelineConfig::new(Scheme::Gems, 4, 4)).unwrap();
        assert_eq!(row(&s, 0), "F0 B0 F1 B1 F2 B2 F3 B3");
        let stages: Vec<u32> = s.per_worker[0].iter().map(|t| t.stage).collect();
        assert_eq!(stages, [0, 0, 3, 3, 0, 0, 3, 3]);
        assert!(s.per_worker[0].iter().all(|t| t.pipeline_id == t.micro_batch % 2));
    }

    #[test]
    fn pipedream_versions_advance_per_backward() {
        let s = gen_pipedream(&PipelineConfig::new(Scheme::PipeDream, 4, 1)).unwrap();
        assert_eq!(s.micro_batch_ids().len(), 8);
        // last stage alternates, so micro-batch k reads version k
        for t in &s.per_worker[3] {
            assert_eq!(t.weight_version, Some(t.micro_batch));
        }
        // first stage runs D forwards before its first backward
        let v: Vec<_> =
            s.per_worker[0].iter().filter(|t| t.kind == TaskKind::Forward).map(|t| t.weight_version.unwrap()).collect();
        assert_eq!(v, [0, 0, 0, 0, 1, 2, 3, 4]);
        assert!(gen_pipedream(&PipelineConfig::new(Scheme::PipeDream, 4, 4)).is_err());
    }

    #[test]
    fn two_bw_uses_two_versions() {
        let s = gen_pipedream_2bw(&PipelineConfig::new(Scheme::PipeDream2BW, 4, 4)).unwrap();
        assert_eq!(s.micro_batch_ids().len(), 8);
        for t in s.tasks() {
            assert_eq!(t.weight_version, Some((t.micro_batch / 4).saturating_sub(1)));
        }
    }

    #[test]
    fn wrong_scheme_rejected() {
        assert!(gen_gpipe(&PipelineConfig::new(Scheme::Dapple, 4, 4)).is_err());
    }
}
