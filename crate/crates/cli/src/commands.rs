use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pklbench_core::analysis::{
    fn_importance, fp_heatmap, importance_csv, local_vs_global_nds, noise_sweep,
    percentile_removal_curve, rank_chunks, rank_csv,
};
use pklbench_core::io::{detections_to_string, load_detection_sets, load_scene_dir};
use pklbench_core::metrics::nds_dataset;
use pklbench_core::noise::NoiseKind;
use pklbench_core::pkl::{chunk_times, pair_submissions, PklContext};
use pklbench_core::planner::{
    evaluate_planner, load_checkpoint, save_checkpoint, train, Planner, PlannerConfig, TrainOptions,
};
use pklbench_core::scene::DetectionSet;
use pklbench_core::synth::{generate, perfect_detections, write_dataset, GenConfig, LayoutChoice};
use pklbench_core::{Error, Result, Scene};
use pklbench_server::{serve_blocking, ServerConfig, TOKEN_ENV};
use serde::Serialize;

use crate::args::*;
use crate::manifest::RunManifest;

pub const MODEL_FILE: &str = "model.pkl-ckpt";
pub const FINAL_LOSS_WINDOW: usize = 200;

/// Output directory plus the manifest being assembled for it.
struct Run {
    out: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn new(out: &Path, command: &Command, argv: &[String]) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut manifest = RunManifest::new(command.name(), argv.to_vec());
        manifest.hash("args", format!("{command:?}").as_bytes());
        Ok(Self {
            out: out.to_path_buf(),
            manifest,
            started: Instant::now(),
        })
    }

    fn write(&mut self, name: &str, text: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.manifest.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
        self.write(name, text)
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        self.manifest.write(&self.out)
    }
}

fn load_scenes(args: &SceneArgs, run: &mut Run) -> Result<Vec<Scene>> {
    let mut scenes = load_scene_dir(&args.scenes)?;
    if let Some(r) = args.range {
        let end = r.end.min(scenes.len());
        if r.start >= end {
            return Err(Error::config(
                "range",
                format!(
                    "{}..{} selects no scenes out of {}",
                    r.start,
                    r.end,
                    scenes.len()
                ),
            ));
        }
        scenes = scenes.drain(r.start..end).collect();
    }
    if scenes.is_empty() {
        return Err(Error::config(
            "scenes",
            format!("no scene files in {}", args.scenes.display()),
        ));
    }
    run.manifest.hash_scenes(&scenes);
    Ok(scenes)
}

fn load_model(path: &Path, run: &mut Run) -> Result<Planner> {
    let ck = load_checkpoint(path)?;
    run.manifest.checkpoint_hash = Some(ck.hash);
    Ok(ck.planner)
}

/// Submissions for `scenes`: ground truth for `perfect`, otherwise the
/// detection files at the path restricted to the selected scenes.
fn load_dets(args: &DetArgs, scenes: &[Scene], run: &mut Run) -> Result<Vec<DetectionSet>> {
    let sets = if args.dets == "perfect" {
        scenes.iter().map(perfect_detections).collect()
    } else {
        let all = load_detection_sets(&args.dets)?;
        let n = all.len();
        let kept: Vec<DetectionSet> = all
            .into_iter()
            .filter(|d| scenes.iter().any(|s| s.scene_id == d.scene_id))
            .collect();
        if kept.len() < n {
            log::info!(
                "ignoring {} detection sets for scenes outside the selection",
                n - kept.len()
            );
        }
        kept
    };
    let sets: Vec<DetectionSet> = if args.score_thresh > 0.0 {
        sets.iter()
            .map(|s| s.filter_score(args.score_thresh))
            .collect()
    } else {
        sets
    };
    let text: String = sets.iter().map(detections_to_string).collect();
    run.manifest.hash("dets", text.as_bytes());
    Ok(sets)
}

fn find_chunk<'a>(scenes: &'a [Scene], args: &ChunkArgs) -> Result<&'a Scene> {
    let scene = scenes
        .iter()
        .find(|s| s.scene_id == args.scene_id)
        .ok_or_else(|| Error::config("scene_id", format!("no scene `{}`", args.scene_id)))?;
    if !chunk_times(scene)
        .iter()
        .any(|t| (t - args.t0).abs() < 1e-6)
    {
        return Err(Error::config(
            "t0",
            format!(
                "{} is not a chunk time of {} (keyframe with full history and horizon)",
                args.t0, scene.scene_id
            ),
        ));
    }
    Ok(scene)
}

pub fn dispatch(command: &Command, argv: &[String], parallel: bool) -> Result<()> {
    match command {
        Command::Gen(a) => {
            let mut run = Run::new(&a.out, command, argv)?;
            let cfg = GenConfig {
                seed: a.seed,
                n_scenes: a.n_scenes,
                duration: a.duration,
                layout: match a.layout {
                    LayoutArg::Mixed => LayoutChoice::Mixed,
                    LayoutArg::StraightRoad => LayoutChoice::StraightRoad,
                    LayoutArg::Intersection => LayoutChoice::Intersection,
                    LayoutArg::ParkingLot => LayoutChoice::ParkingLot,
                },
                ..GenConfig::default()
            };
            let scenes = generate(&cfg)?;
            let manifest = write_dataset(&cfg, &scenes, &a.out)?;
            run.manifest.seed = Some(a.seed);
            run.manifest.hash(
                "gen_config",
                serde_json::to_string(&cfg)
                    .expect("config serializes")
                    .as_bytes(),
            );
            run.manifest
                .outputs
                .extend(manifest.scenes.iter().map(|e| e.file.clone()));
            run.manifest.outputs.push("manifest.json".into());
            let plain: Vec<Scene> = scenes.into_iter().map(|g| g.scene).collect();
            run.manifest.hash_scenes(&plain);
            run.finish()
        }
        Command::Train(a) => {
            let mut run = Run::new(&a.out, command, argv)?;
            let scenes = load_scenes(&a.scenes, &mut run)?;
            let mut config = match &a.config {
                Some(p) => read_planner_config(p)?,
                None => match a.preset {
                    Preset::Desk => PlannerConfig::desk(),
                    Preset::Full => PlannerConfig::default(),
                },
            };
            config.seed = a.seed;
            if let Some(s) = a.steps {
                config.steps = s;
            }
            run.manifest.seed = Some(a.seed);
            run.manifest.hash(
                "planner_config",
                serde_json::to_string(&config)
                    .expect("config serializes")
                    .as_bytes(),
            );
            let opts = TrainOptions {
                log_path: None,
                checkpoint_dir: a.checkpoint_every.map(|_| a.out.join("checkpoints")),
                checkpoint_every: a.checkpoint_every,
                parallel,
            };
            let (planner, report) = train(&scenes, &config, &opts)?;
            let hash = save_checkpoint(
                &planner,
                config.steps as u64,
                Some(&report.rng),
                a.out.join(MODEL_FILE),
            )?;
            run.manifest.outputs.push(MODEL_FILE.into());
            run.manifest.checkpoint_hash = Some(hash.clone());
            run.write("train_log.csv", report.log_csv())?;
            let summary = serde_json::json!({
                "steps": config.steps,
                "n_samples": report.n_samples,
                "n_ego_samples": report.n_ego_samples,
                "uniform_loss": report.uniform_loss,
                "initial_batch_loss": report.initial_batch_loss,
                "initial_batch_expected": report.initial_batch_expected,
                "first_window_mean": report.first_window_mean(FINAL_LOSS_WINDOW),
                "final_window_mean": report.final_window_mean(FINAL_LOSS_WINDOW),
                "window": FINAL_LOSS_WINDOW,
                "checkpoint": MODEL_FILE,
                "checkpoint_hash": hash,
            });
            run.write_json("train_report.json", &summary)?;
            run.finish()
        }
        Command::EvalPlanner(a) => {
            let mut run = Run::new(&a.out, command, argv)?;
            let scenes = load_scenes(&a.scenes, &mut run)?;
            let model = load_model(&a.model, &mut run)?;
            let e = evaluate_planner(&model, &scenes, parallel)?;
            run.write_json("planner_eval.json", &e)?;
            run.finish()
        }
        Command::EvalPkl(a) => {
            let mut run = Run::new(&a.out, command, argv)?;
            let scenes = load_scenes(&a.scenes, &mut run)?;
            let dets = load_dets(&a.dets, &scenes, &mut run)?;
            let model = load_model(&a.model, &mut run)?;
            let ctx = PklContext::new(&model, &scenes, parallel)?;
            let report = ctx.evaluate(&dets)?;
            let hash = run.manifest.checkpoint_hash.clone().unwrap_or_default();
            run.write("pkl_samples.csv", report.samples_csv())?;
            run.write_json(
                "pkl_summary.json",
                &report.summary("pkl_samples.csv", &hash),
            )?;
            run.finish()
        }
        Command::EvalNds(a) => {
            let mut run = Run::new(&a.out, command, argv)?;
            let scenes = load_scenes(&a.scenes, &mut run)?;
            let dets = load_dets(&a.dets, &scenes, &mut run)?;
            let paired = pair_submissions(&scenes, &dets)?;
            run.write_json("nds.json", &nds_dataset(&scenes, &paired))?;
            run.finish()
        }
        Command::NoiseSweep(a) => {
            let mut run = Run::new(&a.out, command, argv)?;
            let kind: NoiseKind = a.kind.parse()?;
            if matches!(kind, NoiseKind::RemoveByDistance | NoiseKind::RemoveBySpeed) {
                return Err(Error::config(
                    "kind",
                    "removal kinds are swept by percentile-curve",
                ));
            }
            let scenes = load_scenes(&a.scenes, &mut run)?;
            let model = load_model(&a.model, &mut run)?;
            run.manifest.seed = Some(a.seed);
            let ctx = PklContext::new(&model, &scenes, parallel)?;
            let sweep = noise_sweep(&ctx, kind, &a.levels, a.trials, a.seed)?;
            run.write(&format!("sweep_{kind}.csv"), sweep.csv())?;
            run.write_json(&format!("sweep_{kind}.json"), &sweep)?;
            run.finish()
        }
        Command::PercentileCurve(a) => {
            let mut run = Run::new(&a.out, command, argv)?;
            let (kind, stem) = match a.by {
                RankBy::Distance => (NoiseKind::RemoveByDistance, "percentile_distance"),
                RankBy::Speed => (NoiseKind::RemoveBySpeed, "percentile_speed"),
            };
            let scenes = load_scenes(&a.scenes, &mut run)?;
            let model = load_model(&a.model, &mut run)?;
            let ctx = PklContext::new(&model, &scenes, parallel)?;
            let curve = percentile_removal_curve(&ctx, kind, &a.percentiles, a.n_remove)?;
            run.write(&format!("{stem}.csv"), curve.csv())?;
            run.write_json(&format!("{stem}.json"), &curve)?;
            run.finish()
        }
        Command::RankChunks(a) => {
            let mut run = Run::new(&a.out, command, argv)?;
            let scenes = load_scenes(&a.scenes, &mut run)?;
            let dets = load_dets(&a.dets, &scenes, &mut run)?;
            let model = load_model(&a.model, &mut run)?;
            let ctx = PklContext::new(&model, &scenes, parallel)?;
            let rows = rank_chunks(&ctx, &dets)?;
            run.write("rank_chunks.csv", rank_csv(&rows))?;
            let mut lg = String::from("scene_id,t0,local_nds,scene_nds\n");
            for (id, t0, local, global) in local_vs_global_nds(&scenes, &dets)? {
                lg.push_str(&format!("{id},{t0},{local},{global}\n"));
            }
            run.write("local_global_nds.csv", lg)?;
            run.finish()
        }
        Command::FnImportance(a) => {
            let mut run = Run::new(&a.out, command, argv)?;
            let scenes = load_scenes(&a.scenes, &mut run)?;
            let model = load_model(&a.model, &mut run)?;
            let scene = find_chunk(&scenes, a)?;
            let rows = fn_importance(&model, scene, a.t0, parallel)?;
            run.write(
                "importance.csv",
                importance_csv(&scene.scene_id, a.t0, &rows),
            )?;
            run.finish()
        }
        Command::FpHeatmap(a) => {
            let mut run = Run::new(&a.chunk.out, command, argv)?;
            let scenes = load_scenes(&a.chunk.scenes, &mut run)?;
            let model = load_model(&a.chunk.model, &mut run)?;
            let scene = find_chunk(&scenes, &a.chunk)?;
            let grid = model.config().grid;
            let stride = a.stride.unwrap_or((grid.x_max() - grid.x_min) / 32.0);
            let hm = fp_heatmap(
                &model,
                scene,
                a.chunk.t0,
                [a.box_length, a.box_width],
                stride,
                parallel,
            )?;
            hm.write(&run.out, "fp_heatmap")?;
            run.manifest
                .outputs
                .extend(["fp_heatmap.csv", "fp_heatmap.pgm", "fp_heatmap.json"].map(String::from));
            run.finish()
        }
        Command::Serve(a) => {
            let mut run = Run::new(&a.out, command, argv)?;
            run.manifest.checkpoint_hash = Some(pklbench_core::planner::file_sha256(&a.model)?);
            run.manifest.wall_time_s = 0.0;
            run.manifest.write(&a.out)?;
            serve_blocking(ServerConfig {
                scenes: a.scenes.clone(),
                model: a.model.clone(),
                port: a.port,
                data_dir: a.out.clone(),
                max_body_mb: a.max_body_mb,
                max_concurrent: a.max_concurrent,
                token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
                parallel,
            })
        }
    }
}

/// Parses a planner config file, naming the offending field on failure.
fn read_planner_config(path: &Path) -> Result<PlannerConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let config: PlannerConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        Error::config(
            if field == "." {
                "config".to_string()
            } else {
                field
            },
            e.into_inner().to_string(),
        )
    })?;
    config.validate()?;
    Ok(config)
}
