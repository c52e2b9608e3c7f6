use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::checkpoint::save_checkpoint;
use super::network::{Planner, TrainItem};
use super::optim::Adam;
use super::samples::{build_sample, enumerate_samples, subject_target, SampleRef};
use super::PlannerConfig;
use crate::error::{Error, Result};
use crate::rng::{seeded, SplitMix64};
use crate::scene::Scene;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// CSV `step,loss,lr`.
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    /// Rasterize and differentiate batch samples on the rayon pool.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean unclipped batch loss before the update of this step.
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub n_samples: usize,
    pub n_ego_samples: usize,
    /// Mean over all samples of `n_valid · ln(cells)`: the loss of a uniform
    /// model.
    pub uniform_loss: f64,
    /// First-batch loss of the untrained model and its closed form.
    pub initial_batch_loss: f64,
    pub initial_batch_expected: f64,
    pub log: Vec<LogRow>,
    /// Training RNG after the last step, stored in checkpoints.
    pub rng: SplitMix64,
}

impl TrainReport {
    /// Mean logged loss over the last `window` steps.
    pub fn final_window_mean(&self, window: usize) -> f64 {
        let tail = &self.log[self.log.len().saturating_sub(window)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn first_window_mean(&self, window: usize) -> f64 {
        let head = &self.log[..window.min(self.log.len())];
        head.iter().map(|r| r.loss).sum::<f64>() / head.len().max(1) as f64
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.log {
            let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.lr);
        }
        s
    }
}

fn make_item(planner: &Planner, scenes: &[Scene], r: &SampleRef) -> Result<TrainItem<f32>> {
    let config = planner.config();
    let sample = build_sample(&scenes[r.scene], r, &config.grid)?;
    let input = planner.prepare(&sample.input)?;
    let targets = sample
        .target
        .cells
        .iter()
        .take(config.horizon_steps)
        .map(|c| c.map(|(row, col)| config.grid.flat(row, col)))
        .collect();
    Ok(TrainItem {
        input,
        targets,
        id: sample.id,
    })
}

/// Trains a planner from scratch. Deterministic given `config.seed`: one RNG
/// stream initializes the weights, then shuffles the samples epoch by epoch
/// and seeds every dropout mask.
pub fn train(
    scenes: &[Scene],
    config: &PlannerConfig,
    opts: &TrainOptions,
) -> Result<(Planner, TrainReport)> {
    config.validate()?;
    let refs = enumerate_samples(scenes, config, config.train_on_all_agents);
    if refs.is_empty() {
        return Err(Error::config(
            "scenes",
            "no training samples (scenes too short or empty)",
        ));
    }
    let n_ego = refs
        .iter()
        .filter(|r| r.subject == super::Subject::Ego)
        .count();
    let mut rng = seeded(config.seed);
    let mut planner = Planner::init(config.clone(), &mut rng)?;
    let ln_cells = (config.grid.n_cells() as f64).ln();

    // closed-form uniform loss over the whole sample set
    let counts: Vec<usize> = refs
        .iter()
        .map(|r| {
            subject_target(&scenes[r.scene], r.subject, r.t0, &config.grid)
                .map(|t| t.cells.iter().take(config.horizon_steps).flatten().count())
                .unwrap_or(0)
        })
        .collect();
    let uniform_loss =
        counts.iter().map(|&c| c as f64 * ln_cells).sum::<f64>() / counts.len() as f64;

    let mut opt = Adam::new(config.lr, config.weight_decay);
    let mut order: Vec<usize> = (0..refs.len()).collect();
    let mut cursor = order.len();
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.steps);
    let mut initial = (f64::NAN, f64::NAN);
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(refs[order[cursor]]);
            cursor += 1;
        }
        let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random::<u64>()).collect();
        let items: Vec<TrainItem<f32>> = if opts.parallel {
            batch
                .par_iter()
                .map(|r| make_item(&planner, scenes, r))
                .collect::<Result<_>>()?
        } else {
            batch
                .iter()
                .map(|r| make_item(&planner, scenes, r))
                .collect::<Result<_>>()?
        };
        let Some(g) = planner.batch_gradient(&items, Some(&seeds), step, opts.parallel)? else {
            continue;
        };
        if step == 1 {
            let valid: Vec<usize> = items
                .iter()
                .map(|i| i.targets.iter().flatten().count())
                .filter(|&c| c > 0)
                .collect();
            let expected =
                valid.iter().map(|&c| c as f64 * ln_cells).sum::<f64>() / valid.len() as f64;
            initial = (g.loss_raw, expected);
        }
        opt.step(planner.params_mut(), &g.grads);
        planner.refresh();
        log.push(LogRow {
            step,
            loss: g.loss_raw,
            lr: config.lr,
            wall_ms: start.elapsed().as_millis(),
        });
        if step % 100 == 0 || step == config.steps {
            log::info!("step {step}/{}: loss {:.3}", config.steps, g.loss_raw);
        }
        if let (Some(dir), Some(every)) = (&opts.checkpoint_dir, opts.checkpoint_every) {
            if every > 0 && step % every == 0 {
                save_checkpoint(
                    &planner,
                    step as u64,
                    Some(&rng),
                    dir.join(format!("ckpt_step{step:06}.pkl-ckpt")),
                )?;
            }
        }
    }
    let report = TrainReport {
        n_samples: refs.len(),
        n_ego_samples: n_ego,
        uniform_loss,
        initial_batch_loss: initial.0,
        initial_batch_expected: initial.1,
        log,
        rng,
    };
    if let Some(path) = &opts.log_path {
        fs::write(path, report.log_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok((planner, report))
}
