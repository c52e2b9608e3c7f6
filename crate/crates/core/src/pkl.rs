//! Planning KL divergence: how far a detector's output moves the planner's
//! future-position distributions away from those it predicts under ground
//! truth. Units are nats.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{PlanDistribution, Planner};
use crate::raster::{
    rasterize_input, BevInput, FRAME_TOLERANCE, HISTORY, HISTORY_OFFSETS, HORIZON,
};
use crate::scene::{DetectionFrame, DetectionSet, Scene};
use crate::stats;
use crate::synth::perfect_detections;

const NORM_TOL: f64 = 1e-6;

fn log_norm_error(log_p: &[f64]) -> f64 {
    (log_p.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs()
}

/// `Σ exp(p)·(p − q)` over two log-distributions of equal shape. Cells where
/// `p` is zero contribute nothing; tiny negative results from rounding are
/// clamped to zero.
pub fn kl(p_log: &[f64], q_log: &[f64]) -> Result<f64> {
    if p_log.len() != q_log.len() {
        return Err(Error::dimension("kl operands", p_log.len(), q_log.len()));
    }
    if p_log
        .iter()
        .chain(q_log)
        .any(|v| v.is_nan() || *v == f64::INFINITY)
    {
        return Err(Error::Input("kl operand contains NaN or +inf".into()));
    }
    for (name, d) in [("p", p_log), ("q", q_log)] {
        let e = log_norm_error(d);
        if e > NORM_TOL {
            return Err(Error::Input(format!(
                "kl operand {name} is not normalized (mass off by {e:e})"
            )));
        }
    }
    Ok(kl_unchecked(p_log, q_log))
}

fn kl_unchecked(p_log: &[f64], q_log: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&p, &q) in p_log.iter().zip(q_log) {
        if p == f64::NEG_INFINITY {
            continue;
        }
        s += p.exp() * (p - q);
    }
    clamp_rounding(s)
}

fn clamp_rounding(s: f64) -> f64 {
    if s < 0.0 && s > -1e-9 {
        0.0
    } else {
        s
    }
}

/// Per-timestep KL between two planner outputs. When both share the
/// within-block factor the divergence equals the divergence of the block
/// distributions, which is what gets computed.
pub fn plan_kl(p: &PlanDistribution, q: &PlanDistribution) -> Result<Vec<f64>> {
    if p.horizon != q.horizon || p.n_rows != q.n_rows || p.n_cols != q.n_cols {
        return Err(Error::dimension(
            "plan distributions",
            format!("{}×{}×{}", p.horizon, p.n_rows, p.n_cols),
            format!("{}×{}×{}", q.horizon, q.n_rows, q.n_cols),
        ));
    }
    let shared = p.shares_within(q);
    Ok((0..p.horizon)
        .map(|h| {
            if shared {
                kl_unchecked(p.block_log_probs(h), q.block_log_probs(h))
            } else {
                kl_unchecked(&p.dense(h), &q.dense(h))
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PklSample {
    pub scene_id: String,
    pub t0: f64,
    pub pkl: f64,
    pub per_timestep: Vec<f64>,
}

impl PklSample {
    fn zero(scene_id: &str, t0: f64, horizon: usize) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            t0,
            pkl: 0.0,
            per_timestep: vec![0.0; horizon],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub scene_id: String,
    pub t0: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PklReport {
    pub samples: Vec<PklSample>,
    pub excluded: Vec<Exclusion>,
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl PklReport {
    pub fn from_samples(mut samples: Vec<PklSample>, mut excluded: Vec<Exclusion>) -> Self {
        samples.sort_by(|a, b| a.scene_id.cmp(&b.scene_id).then(a.t0.total_cmp(&b.t0)));
        excluded.sort_by(|a, b| a.scene_id.cmp(&b.scene_id).then(a.t0.total_cmp(&b.t0)));
        let values: Vec<f64> = samples.iter().map(|s| s.pkl).collect();
        let (mean, median) = if values.is_empty() {
            (0.0, 0.0)
        } else {
            (stats::mean(&values), stats::median(&values))
        };
        Self {
            count: samples.len(),
            samples,
            excluded,
            mean,
            median,
        }
    }

    /// `scene_id,t0,pkl,excluded_reason`, evaluated samples then exclusions,
    /// each in (scene_id, t0) order. Values use the shortest round-trip
    /// representation.
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("scene_id,t0,pkl,excluded_reason\n");
        for r in &self.samples {
            let _ = writeln!(s, "{},{},{},", r.scene_id, r.t0, r.pkl);
        }
        for e in &self.excluded {
            let reason = e.reason.replace([',', '\n'], ";");
            let _ = writeln!(s, "{},{},,{}", e.scene_id, e.t0, reason);
        }
        s
    }

    pub fn summary(&self, samples_csv_path: &str, model_checkpoint_hash: &str) -> PklSummary {
        PklSummary {
            mean: self.mean,
            median: self.median,
            count: self.count,
            excluded: self.excluded.len(),
            samples_csv_path: samples_csv_path.to_string(),
            model_checkpoint_hash: model_checkpoint_hash.to_string(),
            units: "nats".into(),
        }
    }
}

/// Report JSON written next to the per-sample CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PklSummary {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
    pub excluded: usize,
    pub samples_csv_path: String,
    pub model_checkpoint_hash: String,
    pub units: String,
}

/// The five history frames of a submission preceding `t0`, oldest first.
pub fn history_frames(set: &DetectionSet, t0: f64) -> Result<Vec<DetectionFrame>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(HISTORY_OFFSETS.len());
    for o in HISTORY_OFFSETS {
        match set.frame_at(t0 + o, FRAME_TOLERANCE) {
            Some(f) => out.push(f.clone()),
            None => missing.push(format!("{:.2}", t0 + o)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "submission for {} lacks history frames at t = {}",
            set.scene_id,
            missing.join(" ")
        )));
    }
    Ok(out)
}

/// Raster of ground-truth detections at `t0`.
pub fn gt_input(scene: &Scene, t0: f64, model: &Planner) -> Result<BevInput> {
    let frames = history_frames(&perfect_detections(scene), t0)?;
    input_for(scene, t0, &frames, model)
}

fn input_for(
    scene: &Scene,
    t0: f64,
    frames: &[DetectionFrame],
    model: &Planner,
) -> Result<BevInput> {
    let ego = scene.interpolate_ego(t0)?;
    rasterize_input(frames, &scene.map, &ego, t0, &model.config().grid)
}

/// PKL of one chunk. `submitted` holds the five history frames, oldest
/// first. Identical rasters short-circuit to exactly zero.
pub fn pkl_sample(
    model: &Planner,
    scene: &Scene,
    t0: f64,
    submitted: &[DetectionFrame],
) -> Result<PklSample> {
    let gt = gt_input(scene, t0, model)?;
    let sub = input_for(scene, t0, submitted, model)?;
    if gt.data == sub.data {
        return Ok(PklSample::zero(
            &scene.scene_id,
            t0,
            model.config().horizon_steps,
        ));
    }
    let p = model.forward(&gt, None)?;
    let q = model.forward(&sub, None)?;
    finish(&scene.scene_id, t0, &p, &q)
}

/// Like [`pkl_sample`] with the ground-truth output already computed.
pub fn pkl_with_gt(
    model: &Planner,
    scene: &Scene,
    t0: f64,
    gt_dist: &PlanDistribution,
    submitted: &[DetectionFrame],
) -> Result<PklSample> {
    let gt = gt_input(scene, t0, model)?;
    let sub = input_for(scene, t0, submitted, model)?;
    if gt.data == sub.data {
        return Ok(PklSample::zero(
            &scene.scene_id,
            t0,
            model.config().horizon_steps,
        ));
    }
    let q = model.forward(&sub, None)?;
    finish(&scene.scene_id, t0, gt_dist, &q)
}

fn finish(
    scene_id: &str,
    t0: f64,
    p: &PlanDistribution,
    q: &PlanDistribution,
) -> Result<PklSample> {
    let per_timestep = plan_kl(p, q)?;
    if let Some(bad) = per_timestep.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Input(format!(
            "{scene_id}@{t0}: KL term {bad} is not a finite non-negative value"
        )));
    }
    Ok(PklSample {
        scene_id: scene_id.to_string(),
        t0,
        pkl: per_timestep.iter().sum(),
        per_timestep,
    })
}

/// Orders submissions like `scenes`; any missing, extra or duplicate scene
/// id is an error.
pub fn pair_submissions<'a>(
    scenes: &[Scene],
    submissions: &'a [DetectionSet],
) -> Result<Vec<&'a DetectionSet>> {
    let mut by_id: HashMap<&str, &DetectionSet> = HashMap::new();
    for s in submissions {
        if by_id.insert(s.scene_id.as_str(), s).is_some() {
            return Err(Error::Pairing(format!(
                "duplicate submission for scene {}",
                s.scene_id
            )));
        }
    }
    let mut out = Vec::with_capacity(scenes.len());
    for sc in scenes {
        let s = by_id
            .remove(sc.scene_id.as_str())
            .ok_or_else(|| Error::Pairing(format!("no submission for scene {}", sc.scene_id)))?;
        out.push(s);
    }
    if !by_id.is_empty() {
        let mut extra: Vec<&str> = by_id.into_keys().collect();
        extra.sort_unstable();
        return Err(Error::Pairing(format!(
            "submissions for unknown scenes: {}",
            extra.join(", ")
        )));
    }
    Ok(out)
}

/// Every evaluated chunk start of a scene.
pub fn chunk_times(scene: &Scene) -> Vec<f64> {
    scene.chunk_times(HISTORY, HORIZON)
}

/// Ground-truth side of a PKL evaluation, computed once and shared by every
/// submission evaluated against the same scenes.
#[derive(Debug, Clone)]
pub struct PklContext<'a> {
    model: &'a Planner,
    scenes: &'a [Scene],
    chunks: Vec<(usize, f64)>,
    /// Cached ground-truth outputs; skipped when they would not fit
    /// [`GT_CACHE_BYTES`].
    gt: Option<Vec<PlanDistribution>>,
    parallel: bool,
}

pub const GT_CACHE_BYTES: usize = 1 << 30;

impl<'a> PklContext<'a> {
    pub fn new(model: &'a Planner, scenes: &'a [Scene], parallel: bool) -> Result<Self> {
        let chunks: Vec<(usize, f64)> = scenes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| chunk_times(s).into_iter().map(move |t| (i, t)))
            .collect();
        let one = |&(i, t0): &(usize, f64)| -> Result<PlanDistribution> {
            let input = gt_input(&scenes[i], t0, model)?;
            model.forward(&input, None)
        };
        let c = model.config();
        let per = c.horizon_steps * (c.grid.n_cells() / (c.input_pool * c.input_pool)) * 8;
        let gt = if per * chunks.len() > GT_CACHE_BYTES {
            None
        } else if parallel {
            Some(chunks.par_iter().map(one).collect::<Result<_>>()?)
        } else {
            Some(chunks.iter().map(one).collect::<Result<_>>()?)
        };
        Ok(Self {
            model,
            scenes,
            chunks,
            gt,
            parallel,
        })
    }

    pub fn model(&self) -> &'a Planner {
        self.model
    }

    pub fn is_parallel(&self) -> bool {
        self.parallel
    }

    pub fn scenes(&self) -> &[Scene] {
        self.scenes
    }

    /// (scene index, t0) of every chunk in evaluation order.
    pub fn chunks(&self) -> &[(usize, f64)] {
        &self.chunks
    }

    fn eval_chunk(&self, k: usize, set: &DetectionSet) -> std::result::Result<PklSample, String> {
        let (i, t0) = self.chunks[k];
        let scene = &self.scenes[i];
        let frames = history_frames(set, t0).map_err(|e| e.to_string())?;
        let sub = input_for(scene, t0, &frames, self.model).map_err(|e| e.to_string())?;
        let gt = gt_input(scene, t0, self.model).map_err(|e| e.to_string())?;
        if gt.data == sub.data {
            return Ok(PklSample::zero(
                &scene.scene_id,
                t0,
                self.model.config().horizon_steps,
            ));
        }
        let q = self.model.forward(&sub, None).map_err(|e| e.to_string())?;
        let p = match &self.gt {
            Some(gt) => std::borrow::Cow::Borrowed(&gt[k]),
            None => {
                std::borrow::Cow::Owned(self.model.forward(&gt, None).map_err(|e| e.to_string())?)
            }
        };
        finish(&scene.scene_id, t0, &p, &q).map_err(|e| e.to_string())
    }

    /// PKL of one submission per scene over every chunk. Chunks whose
    /// submission is unusable are excluded with a reason.
    pub fn evaluate(&self, submissions: &[DetectionSet]) -> Result<PklReport> {
        let paired = pair_submissions(self.scenes, submissions)?;
        let work = |k: usize| self.eval_chunk(k, paired[self.chunks[k].0]);
        let results: Vec<std::result::Result<PklSample, String>> = if self.parallel {
            (0..self.chunks.len()).into_par_iter().map(work).collect()
        } else {
            (0..self.chunks.len()).map(work).collect()
        };
        let mut samples = Vec::new();
        let mut excluded = Vec::new();
        for (k, r) in results.into_iter().enumerate() {
            match r {
                Ok(s) => samples.push(s),
                Err(reason) => {
                    let (i, t0) = self.chunks[k];
                    log::debug!("excluding {}@{t0}: {reason}", self.scenes[i].scene_id);
                    excluded.push(Exclusion {
                        scene_id: self.scenes[i].scene_id.clone(),
                        t0,
                        reason,
                    });
                }
            }
        }
        Ok(PklReport::from_samples(samples, excluded))
    }
}

/// PKL over a dataset: one submission per scene, every chunk evaluated.
pub fn pkl_dataset(
    model: &Planner,
    scenes: &[Scene],
    submissions: &[DetectionSet],
    parallel: bool,
) -> Result<PklReport> {
    pair_submissions(scenes, submissions)?;
    PklContext::new(model, scenes, parallel)?.evaluate(submissions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_hand_cases() {
        let ln = |v: &[f64]| v.iter().map(|p| p.ln()).collect::<Vec<_>>();
        let p = ln(&[1.0, 0.0]);
        let q = ln(&[0.5, 0.5]);
        assert!((kl(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(kl(&q, &q).unwrap(), 0.0);
        assert!(matches!(kl(&p, &[0.0]), Err(Error::Dimension { .. })));
        assert!(matches!(kl(&[f64::NAN, 0.0], &q), Err(Error::Input(_))));
        assert!(matches!(kl(&ln(&[0.7, 0.7]), &q), Err(Error::Input(_))));
    }

    #[test]
    fn pairing_is_checked_by_id() {
        let scene = |id: &str| Scene {
            scene_id: id.into(),
            ..crate::synth::generate_scene(
                &Default::default(),
                0,
                1,
                crate::synth::Layout::ParkingLot,
            )
        };
        let scenes = vec![scene("a"), scene("b")];
        let set = |id: &str| DetectionSet {
            scene_id: id.into(),
            frames: vec![],
        };
        assert!(pair_submissions(&scenes, &[set("b"), set("a")]).is_ok());
        assert!(matches!(
            pair_submissions(&scenes, &[set("a")]),
            Err(Error::Pairing(_))
        ));
        assert!(matches!(
            pair_submissions(&scenes, &[set("a"), set("b"), set("c")]),
            Err(Error::Pairing(_))
        ));
        assert!(matches!(
            pair_submissions(&scenes, &[set("a"), set("a")]),
            Err(Error::Pairing(_))
        ));
    }
}
