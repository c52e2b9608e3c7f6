use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dist::PlanDistribution;
use super::network::Planner;
use super::samples::{build_sample, enumerate_samples};
use crate::error::Result;
use crate::raster::{GridSpec, TargetTrack};
use crate::scene::Scene;

/// Planner quality on ego trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerEval {
    /// Fraction of (sample, timestep) pairs whose target is the mode.
    pub top1: f64,
    pub top5: f64,
    /// Mean distance (m) between target and mode cell centers.
    pub l2_mode: f64,
    pub n_samples: usize,
    pub n_pairs: usize,
}

/// Counts for one sample: (top-1 hits, top-5 hits, summed mode distance,
/// evaluated timesteps).
pub fn rank_metrics(
    dist: &PlanDistribution,
    target: &TargetTrack,
    grid: &GridSpec,
) -> (usize, usize, f64, usize) {
    let (mut h1, mut h5, mut l2, mut n) = (0, 0, 0.0, 0);
    for (h, c) in target.cells.iter().enumerate().take(dist.horizon) {
        let Some((r, col)) = *c else { continue };
        let cell = grid.flat(r, col);
        let rank = dist.rank_of(h, cell);
        h1 += (rank < 1) as usize;
        h5 += (rank < 5) as usize;
        let m = dist.argmax(h);
        let [tx, ty] = grid.cell_center(r, col);
        let [mx, my] = grid.cell_center(m / grid.n_cols, m % grid.n_cols);
        l2 += (tx - mx).hypot(ty - my);
        n += 1;
    }
    (h1, h5, l2, n)
}

pub fn evaluate_planner(
    planner: &Planner,
    scenes: &[Scene],
    parallel: bool,
) -> Result<PlannerEval> {
    let grid = planner.config().grid;
    let refs = enumerate_samples(scenes, planner.config(), false);
    let one = |r: &super::SampleRef| -> Result<(usize, usize, f64, usize)> {
        let s = build_sample(&scenes[r.scene], r, &grid)?;
        let dist = planner.forward(&s.input, None)?;
        Ok(rank_metrics(&dist, &s.target, &grid))
    };
    let per: Vec<(usize, usize, f64, usize)> = if parallel {
        refs.par_iter().map(one).collect::<Result<_>>()?
    } else {
        refs.iter().map(one).collect::<Result<_>>()?
    };
    let (mut h1, mut h5, mut l2, mut n) = (0, 0, 0.0, 0);
    for (a, b, c, d) in per {
        h1 += a;
        h5 += b;
        l2 += c;
        n += d;
    }
    let nf = n.max(1) as f64;
    Ok(PlannerEval {
        top1: h1 as f64 / nf,
        top5: h5 as f64 / nf,
        l2_mode: l2 / nf,
        n_samples: refs.len(),
        n_pairs: n,
    })
}
