#![allow(dead_code)]

use pklbench_core::planner::{Planner, PlannerConfig};
use pklbench_core::raster::GridSpec;
use pklbench_core::rng::seeded;
use pklbench_core::synth::{generate, GenConfig, LayoutChoice};
use pklbench_core::Scene;
use rand::Rng;

/// Coarse grid over the default extent, 1.2 m cells.
pub fn coarse_grid() -> GridSpec {
    GridSpec {
        cell: 1.2,
        n_rows: 64,
        n_cols: 64,
        ..GridSpec::default()
    }
}

/// A small planner with every parameter randomized, so outputs depend on
/// the input everywhere.
pub fn random_planner(seed: u64) -> Planner {
    let config = PlannerConfig {
        grid: coarse_grid(),
        input_pool: 2,
        widths: vec![4, 6, 8],
        seed,
        ..PlannerConfig::default()
    };
    let mut net = Planner::new(config).unwrap();
    let mut rng = seeded(seed ^ 0xABCD);
    for t in net.params_mut() {
        for v in &mut t.data {
            *v += (rng.random::<f32>() - 0.5) * 0.6;
        }
    }
    net.refresh();
    net
}

pub fn scenes(seed: u64, n: usize, layout: LayoutChoice) -> Vec<Scene> {
    let cfg = GenConfig {
        seed,
        n_scenes: n,
        layout,
        ..GenConfig::default()
    };
    generate(&cfg)
        .unwrap()
        .into_iter()
        .map(|g| g.scene)
        .collect()
}
