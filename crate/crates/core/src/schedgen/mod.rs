//! Schedule generators for every scheme.

mod baselines;
mod chimera;
pub mod grid;

pub use baselines::{gen_dapple, gen_gems, gen_gpipe, gen_pipedream, gen_pipedream_2bw, pipedream_stream_len};
pub use chimera::{chimera_unit, gen_chimera, scale_backward_halving, scale_direct, scale_forward_doubling};
pub use grid::{gen_1f1b_pipeline, merge_grids, Direction, SlotGrid};

use crate::error::Result;
use crate::types::{PipelineConfig, Schedule, Scheme};

/// Generates the untimed schedule of `config` with the scheme's generator.
pub fn gen_schedule(config: &PipelineConfig) -> Result<Schedule> {
    match config.scheme {
        Scheme::GPipe => gen_gpipe(config),
        Scheme::Dapple => gen_dapple(config),
        Scheme::Gems => gen_gems(config),
        Scheme::PipeDream => gen_pipedream(config),
        Scheme::PipeDream2BW => gen_pipedream_2bw(config),
        Scheme::Chimera => gen_chimera(config),
    }
}
