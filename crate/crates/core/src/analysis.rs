//! Sensitivity harnesses built on PKL and NDS: noise sweeps, percentile
//! removal curves, chunk rankings, false-negative importance and
//! false-positive heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::metrics::{local_nds, nds_dataset};
use crate::noise::{apply_noise_set, NoiseKind, NoiseSpec};
use crate::pkl::{history_frames, pkl_sample, PklContext};
use crate::planner::Planner;
use crate::raster::{pgm_p2, GridSpec, HISTORY, HISTORY_OFFSETS};
use crate::rng::derive_seed;
use crate::scene::{Detection, DetectionFrame, DetectionSet, ObjectClass, Scene};
use crate::stats;
use crate::synth::perfect_detections;

/// One (level, trial) evaluation of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub kind: NoiseKind,
    pub level: f64,
    pub trial: usize,
    pub pkl_mean: f64,
    pub pkl_median: f64,
    pub nds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: NoiseKind,
    pub levels: Vec<f64>,
    /// Mean over trials of the dataset PKL mean.
    pub pkl_mean: Vec<f64>,
    /// Mean over trials of the dataset PKL median.
    pub pkl_median: Vec<f64>,
    pub nds_mean: Vec<f64>,
    /// Central 90% interval of the per-trial PKL means.
    pub pkl_band: Vec<[f64; 2]>,
    pub nds_band: Vec<[f64; 2]>,
    /// Excluded chunks per level, summed over trials.
    pub excluded: Vec<usize>,
    /// Scenes left out of every level (percentile curves only).
    pub skipped_scenes: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub trials: Vec<TrialRow>,
}

impl SweepResult {
    /// Aggregates trial rows, which must be grouped by level in increasing
    /// order.
    pub fn from_trials(
        kind: NoiseKind,
        seed: u64,
        trials: Vec<TrialRow>,
        excluded: Vec<usize>,
    ) -> Self {
        let mut levels: Vec<f64> = Vec::new();
        for t in &trials {
            if levels.last() != Some(&t.level) {
                levels.push(t.level);
            }
        }
        let per = |f: fn(&TrialRow) -> f64| -> Vec<Vec<f64>> {
            levels
                .iter()
                .map(|l| trials.iter().filter(|t| t.level == *l).map(f).collect())
                .collect()
        };
        let pkl = per(|t| t.pkl_mean);
        let med = per(|t| t.pkl_median);
        let nds = per(|t| t.nds);
        let band = |v: &Vec<f64>| [stats::quantile(v, 0.05), stats::quantile(v, 0.95)];
        Self {
            kind,
            n_trials: pkl.first().map_or(0, |v| v.len()),
            pkl_mean: pkl.iter().map(|v| stats::mean(v)).collect(),
            pkl_median: med.iter().map(|v| stats::mean(v)).collect(),
            nds_mean: nds.iter().map(|v| stats::mean(v)).collect(),
            pkl_band: pkl.iter().map(band).collect(),
            nds_band: nds.iter().map(band).collect(),
            excluded: if excluded.is_empty() {
                vec![0; levels.len()]
            } else {
                excluded
            },
            skipped_scenes: 0,
            levels,
            seed,
            trials,
        }
    }

    /// `kind,level,trial,pkl_mean,pkl_median,nds`, values in shortest
    /// round-trip form.
    pub fn csv(&self) -> String {
        trials_csv(&self.trials)
    }
}

pub fn trials_csv(rows: &[TrialRow]) -> String {
    let mut s = String::from("kind,level,trial,pkl_mean,pkl_median,nds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.kind, r.level, r.trial, r.pkl_mean, r.pkl_median, r.nds
        );
    }
    s
}

pub fn parse_trials_csv(text: &str) -> Result<Vec<TrialRow>> {
    let bad = |line: usize, msg: String| Error::Parse {
        path: format!("sweep csv line {line}"),
        message: msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some("kind,level,trial,pkl_mean,pkl_median,nds") {
        return Err(bad(1, "unexpected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 2, format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 2, e.to_string()));
            Ok(TrialRow {
                kind: f[0].parse()?,
                level: num(f[1])?,
                trial: f[2]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(i + 2, e.to_string()))?,
                pkl_mean: num(f[3])?,
                pkl_median: num(f[4])?,
                nds: num(f[5])?,
            })
        })
        .collect()
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::config("levels", "need at least one level"));
    }
    if levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config("levels", "must be strictly increasing"));
    }
    Ok(())
}

fn noisy_submissions(scenes: &[Scene], spec: &NoiseSpec) -> Result<Vec<DetectionSet>> {
    scenes
        .iter()
        .map(|s| apply_noise_set(&perfect_detections(s), spec, s))
        .collect()
}

fn evaluate_spec(ctx: &PklContext, spec: &NoiseSpec, trial: usize) -> Result<(TrialRow, usize)> {
    let subs = noisy_submissions(ctx.scenes(), spec)?;
    let report = ctx.evaluate(&subs)?;
    let refs: Vec<&DetectionSet> = subs.iter().collect();
    let nds = nds_dataset(ctx.scenes(), &refs).nds;
    let level = match spec.kind {
        NoiseKind::Translation | NoiseKind::Orientation | NoiseKind::Size => spec.sigma,
        NoiseKind::Drop => spec.p,
        NoiseKind::FalsePositive => spec.n_fp as f64,
        NoiseKind::RemoveByDistance | NoiseKind::RemoveBySpeed => spec.percentile,
    };
    Ok((
        TrialRow {
            kind: spec.kind,
            level,
            trial,
            pkl_mean: report.mean,
            pkl_median: report.median,
            nds,
        },
        report.excluded.len(),
    ))
}

/// PKL and NDS of perfect detections perturbed at every level, `n_trials`
/// times each. Trial `k` uses seed `seed ⊕ k` at every level.
pub fn noise_sweep(
    ctx: &PklContext,
    kind: NoiseKind,
    levels: &[f64],
    n_trials: usize,
    seed: u64,
) -> Result<SweepResult> {
    check_levels(levels)?;
    if n_trials == 0 {
        return Err(Error::config("trials", "must be positive"));
    }
    let mut rows = Vec::with_capacity(levels.len() * n_trials);
    let mut excluded = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut ex = 0;
        for trial in 0..n_trials {
            let spec = NoiseSpec::new(kind, derive_seed(seed, trial as u64)).at_level(level);
            let (row, e) = evaluate_spec(ctx, &spec, trial)?;
            log::info!(
                "{kind} level {level} trial {trial}: pkl {:.4} nds {:.4}",
                row.pkl_mean,
                row.nds
            );
            rows.push(row);
            ex += e;
        }
        excluded.push(ex);
    }
    Ok(SweepResult::from_trials(kind, seed, rows, excluded))
}

/// Removes `n_remove` vehicles around each percentile of distance to the ego
/// (or speed) in every scene. Deterministic, so a single trial. Scenes with
/// fewer than `n_remove` vehicles are skipped and counted.
pub fn percentile_removal_curve(
    ctx: &PklContext,
    by: NoiseKind,
    percentiles: &[f64],
    n_remove: usize,
) -> Result<SweepResult> {
    if !matches!(by, NoiseKind::RemoveByDistance | NoiseKind::RemoveBySpeed) {
        return Err(Error::config(
            "by",
            "must be remove_by_distance or remove_by_speed",
        ));
    }
    check_levels(percentiles)?;
    let eligible: Vec<Scene> = ctx
        .scenes()
        .iter()
        .filter(|s| s.agents.iter().filter(|a| a.class.is_vehicle()).count() >= n_remove)
        .cloned()
        .collect();
    let skipped = ctx.scenes().len() - eligible.len();
    let sub_ctx;
    let ctx = if skipped == 0 {
        ctx
    } else {
        sub_ctx = PklContext::new(ctx.model(), &eligible, ctx.is_parallel())?;
        &sub_ctx
    };
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for &p in percentiles {
        let mut spec = NoiseSpec::new(by, 0).at_level(p);
        spec.n_remove = n_remove;
        let (row, e) = evaluate_spec(ctx, &spec, 0)?;
        log::info!(
            "{by} percentile {p}: pkl {:.4} nds {:.4}",
            row.pkl_mean,
            row.nds
        );
        rows.push(row);
        excluded.push(e);
    }
    let mut out = SweepResult::from_trials(by, 0, rows, excluded);
    out.skipped_scenes = skipped;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRank {
    pub scene_id: String,
    pub t0: f64,
    pub pkl: f64,
    /// NDS over the chunk's history keyframes `[t0 − 2 s, t0]`.
    pub local_nds: f64,
}

/// Every evaluated chunk, worst PKL first; ties keep (scene_id, t0) order.
pub fn rank_chunks(ctx: &PklContext, submissions: &[DetectionSet]) -> Result<Vec<ChunkRank>> {
    let report = ctx.evaluate(submissions)?;
    let paired = crate::pkl::pair_submissions(ctx.scenes(), submissions)?;
    let mut out = Vec::with_capacity(report.samples.len());
    for s in &report.samples {
        let i = ctx
            .scenes()
            .iter()
            .position(|sc| sc.scene_id == s.scene_id)
            .expect("sample scene is in the context");
        let nds = local_nds(&ctx.scenes()[i], paired[i], (s.t0 - HISTORY, s.t0))?.nds;
        out.push(ChunkRank {
            scene_id: s.scene_id.clone(),
            t0: s.t0,
            pkl: s.pkl,
            local_nds: nds,
        });
    }
    out.sort_by(|a, b| b.pkl.total_cmp(&a.pkl));
    Ok(out)
}

pub fn rank_csv(rows: &[ChunkRank]) -> String {
    let mut s = String::from("rank,scene_id,t0,pkl,local_nds\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            i + 1,
            r.scene_id,
            r.t0,
            r.pkl,
            r.local_nds
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub track_id: u64,
    /// World position of the track at the latest history frame it appears in.
    pub world_x: f64,
    pub world_y: f64,
    pub pkl: f64,
}

/// PKL of perfect detections with one track removed, for every track seen
/// in the history window, in track-id order.
pub fn fn_importance(
    model: &Planner,
    scene: &Scene,
    t0: f64,
    parallel: bool,
) -> Result<Vec<Importance>> {
    let frames = history_frames(&perfect_detections(scene), t0)?;
    let mut tracks: Vec<(u64, Pose2D)> = Vec::new();
    for f in &frames {
        for b in &f.boxes {
            let Some(id) = b.track_id else { continue };
            match tracks.iter_mut().find(|t| t.0 == id) {
                Some(t) => t.1 = b.center,
                None => tracks.push((id, b.center)),
            }
        }
    }
    tracks.sort_by_key(|t| t.0);
    let one = |&(id, pose): &(u64, Pose2D)| -> Result<Importance> {
        let without: Vec<DetectionFrame> = frames
            .iter()
            .map(|f| DetectionFrame {
                timestamp: f.timestamp,
                boxes: f
                    .boxes
                    .iter()
                    .filter(|b| b.track_id != Some(id))
                    .cloned()
                    .collect(),
            })
            .collect();
        let s = pkl_sample(model, scene, t0, &without)?;
        Ok(Importance {
            track_id: id,
            world_x: pose.x,
            world_y: pose.y,
            pkl: s.pkl,
        })
    };
    if parallel {
        tracks.par_iter().map(one).collect()
    } else {
        tracks.iter().map(one).collect()
    }
}

pub fn importance_csv(scene_id: &str, t0: f64, rows: &[Importance]) -> String {
    let mut s = String::from("scene_id,t0,track_id,world_x,world_y,pkl\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{scene_id},{t0},{},{},{},{}",
            r.track_id, r.world_x, r.world_y, r.pkl
        );
    }
    s
}

/// PKL of a phantom box over a lattice in the ego frame at `t0`. Row `i`
/// is ego-frame x, column `j` is y; lattice centers sit at
/// `origin + (index + ½)·stride`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapResult {
    pub scene_id: String,
    pub t0: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub stride: f64,
    pub origin: [f64; 2],
    pub box_size: [f64; 2],
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
}

impl HeatmapResult {
    pub fn center(&self, r: usize, c: usize) -> [f64; 2] {
        [
            self.origin[0] + (r as f64 + 0.5) * self.stride,
            self.origin[1] + (c as f64 + 0.5) * self.stride,
        ]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.n_cols + c]
    }

    /// Largest value over lattice centers satisfying `pred(x, y)`.
    pub fn max_where(&self, pred: impl Fn(f64, f64) -> bool) -> Option<f64> {
        let mut best: Option<f64> = None;
        for r in 0..self.n_rows {
            for c in 0..self.n_cols {
                let [x, y] = self.center(r, c);
                if pred(x, y) {
                    let v = self.get(r, c);
                    best = Some(best.map_or(v, |b| b.max(v)));
                }
            }
        }
        best
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("row,col,x,y,pkl\n");
        for r in 0..self.n_rows {
            for c in 0..self.n_cols {
                let [x, y] = self.center(r, c);
                let _ = writeln!(s, "{r},{c},{x},{y},{}", self.get(r, c));
            }
        }
        s
    }

    /// P2 image scaled so the maximum maps to 255, plus the scale.
    pub fn pgm(&self) -> (String, f64) {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        let scale = if max > 0.0 { max / 255.0 } else { 1.0 };
        let px: Vec<u8> = self
            .values
            .iter()
            .map(|v| (v / scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        (pgm_p2(&px, self.n_rows, self.n_cols, 255), scale)
    }

    /// Writes `{stem}.csv`, `{stem}.pgm` and `{stem}.json` (scale sidecar).
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (pgm, scale) = self.pgm();
        let side = serde_json::json!({
            "scene_id": self.scene_id,
            "t0": self.t0,
            "pkl_per_level": scale,
            "max_pkl": scale * 255.0,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "stride": self.stride,
            "origin": self.origin,
            "box_size": self.box_size,
            "rows_axis": "ego x",
            "cols_axis": "ego y",
        });
        for (ext, text) in [
            ("csv", self.csv()),
            ("pgm", pgm),
            (
                "json",
                serde_json::to_string_pretty(&side).expect("sidecar serializes") + "\n",
            ),
        ] {
            let p = dir.join(format!("{stem}.{ext}"));
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

pub const FP_BOX_HEIGHT: f64 = 1.5;

/// Inserts a static `box_size` box (yaw 0 in the ego frame at `t0`) at every
/// lattice point of the grid extent, at all history timestamps, and records
/// the PKL.
pub fn fp_heatmap(
    model: &Planner,
    scene: &Scene,
    t0: f64,
    box_size: [f64; 2],
    stride: f64,
    parallel: bool,
) -> Result<HeatmapResult> {
    if !(stride > 0.0) {
        return Err(Error::config("stride", "must be positive"));
    }
    let grid: GridSpec = model.config().grid;
    let n_rows = ((grid.x_max() - grid.x_min) / stride - 1e-9).ceil() as usize;
    let n_cols = ((grid.y_max() - grid.y_min) / stride - 1e-9).ceil() as usize;
    let gt_frames = history_frames(&perfect_detections(scene), t0)?;
    let ego = scene.interpolate_ego(t0)?;
    let origin = [grid.x_min, grid.y_min];
    let cells: Vec<(usize, usize)> = (0..n_rows)
        .flat_map(|r| (0..n_cols).map(move |c| (r, c)))
        .collect();
    let gt_dist = model.forward(&crate::pkl::gt_input(scene, t0, model)?, None)?;
    let one = |&(r, c): &(usize, usize)| -> Result<f64> {
        let local = Pose2D::new(
            origin[0] + (r as f64 + 0.5) * stride,
            origin[1] + (c as f64 + 0.5) * stride,
            0.0,
        );
        let phantom = Detection {
            center: ego.compose(&local),
            length: box_size[0],
            width: box_size[1],
            height: FP_BOX_HEIGHT,
            class: ObjectClass::Car,
            score: 1.0,
            track_id: None,
        };
        let frames: Vec<DetectionFrame> = gt_frames
            .iter()
            .map(|f| {
                let mut f = f.clone();
                f.boxes.push(phantom.clone());
                f
            })
            .collect();
        crate::pkl::pkl_with_gt(model, scene, t0, &gt_dist, &frames).map(|s| s.pkl)
    };
    let values: Vec<f64> = if parallel {
        cells.par_iter().map(one).collect::<Result<_>>()?
    } else {
        cells.iter().map(one).collect::<Result<_>>()?
    };
    debug_assert_eq!(HISTORY_OFFSETS.len(), gt_frames.len());
    Ok(HeatmapResult {
        scene_id: scene.scene_id.clone(),
        t0,
        n_rows,
        n_cols,
        stride,
        origin,
        box_size,
        counts: vec![1; values.len()],
        values,
    })
}

/// Local NDS of every chunk against the NDS of its whole scene, both under
/// the given submissions.
pub fn local_vs_global_nds(
    scenes: &[Scene],
    submissions: &[DetectionSet],
) -> Result<Vec<(String, f64, f64, f64)>> {
    let paired = crate::pkl::pair_submissions(scenes, submissions)?;
    let mut out = Vec::new();
    for (scene, sub) in scenes.iter().zip(paired) {
        let global = crate::metrics::nds(scene, sub).nds;
        for t0 in crate::pkl::chunk_times(scene) {
            let local = local_nds(scene, sub, (t0 - HISTORY, t0))?.nds;
            out.push((scene.scene_id.clone(), t0, local, global));
        }
    }
    Ok(out)
}
