//! Center-distance detection metrics: greedy matching, 101-point AP, and NDS
//! with translation, scale and orientation true-positive errors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::raster::FRAME_TOLERANCE;
use crate::scene::{Detection, DetectionFrame, DetectionSet, ObjectClass, Scene};
use crate::synth::perfect_detections;

pub const AP_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Matching distance for the true-positive error terms (m).
pub const TP_THRESHOLD: f64 = 2.0;
pub const RECALL_POINTS: usize = 101;

/// One-to-one assignment between ground-truth boxes and detections of one
/// frame. Indices refer to the input slices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// (gt index, detection index, BEV center distance).
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_det: Vec<usize>,
}

fn center_distance(a: &Detection, b: &Detection) -> f64 {
    (a.center.x - b.center.x).hypot(a.center.y - b.center.y)
}

/// Detection indices by descending score; equal scores keep input order.
fn score_order(det: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..det.len()).collect();
    order.sort_by(|&a, &b| det[b].score.total_cmp(&det[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching: detections in descending score order each claim the
/// nearest unclaimed ground-truth box within `threshold`; distance ties go to
/// the lower ground-truth index.
pub fn match_frame(gt: &[Detection], det: &[Detection], threshold: f64) -> MatchResult {
    let mut claimed = vec![false; gt.len()];
    let mut out = MatchResult::default();
    for d in score_order(det) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gt.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let dist = center_distance(gb, &det[d]);
            if dist <= threshold && best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((g, dist));
            }
        }
        match best {
            Some((g, dist)) => {
                claimed[g] = true;
                out.pairs.push((g, d, dist));
            }
            None => out.unmatched_det.push(d),
        }
    }
    out.unmatched_gt = (0..gt.len()).filter(|&g| !claimed[g]).collect();
    out
}

/// Ground-truth and submitted boxes of one frame.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub gt: Vec<Detection>,
    pub det: Vec<Detection>,
}

/// Pairs every ground-truth keyframe of `scene` inside `[t_a, t_b]` with the
/// submission's frame at the same time (empty when missing).
pub fn frame_pairs(
    scene: &Scene,
    submission: &DetectionSet,
    window: Option<(f64, f64)>,
) -> Vec<FramePair> {
    perfect_detections(scene)
        .frames
        .into_iter()
        .filter(|f| {
            window.is_none_or(|(a, b)| {
                f.timestamp >= a - FRAME_TOLERANCE && f.timestamp <= b + FRAME_TOLERANCE
            })
        })
        .map(|f| FramePair {
            det: submission
                .frame_at(f.timestamp, FRAME_TOLERANCE)
                .map(|d: &DetectionFrame| d.boxes.clone())
                .unwrap_or_default(),
            gt: f.boxes,
        })
        .collect()
}

fn of_class(boxes: &[Detection], class: ObjectClass) -> Vec<Detection> {
    boxes.iter().filter(|b| b.class == class).cloned().collect()
}

/// AP of one class at one threshold over a set of frames, `None` without
/// ground truth of that class.
pub fn average_precision_frames(
    frames: &[FramePair],
    class: ObjectClass,
    threshold: f64,
) -> Option<f64> {
    let mut n_gt = 0;
    // (score, frame, rank within frame, is_tp)
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        let gt = of_class(&f.gt, class);
        let det = of_class(&f.det, class);
        n_gt += gt.len();
        let m = match_frame(&gt, &det, threshold);
        let mut tp = vec![false; det.len()];
        for &(_, d, _) in &m.pairs {
            tp[d] = true;
        }
        for (rank, d) in score_order(&det).into_iter().enumerate() {
            scored.push((det[d].score, fi, rank, tp[d]));
        }
    }
    if n_gt == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for s in &scored {
        if s.3 {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: best precision at any recall at or beyond each point
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while j < recall.len() && recall[j] < r - 1e-12 {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

pub fn average_precision(
    scene: &Scene,
    submission: &DetectionSet,
    class: ObjectClass,
    threshold: f64,
) -> Option<f64> {
    average_precision_frames(&frame_pairs(scene, submission, None), class, threshold)
}

/// Scale error of two boxes aligned at the same center and heading.
pub fn scale_error(a: &Detection, b: &Detection) -> f64 {
    let inter = a.length.min(b.length) * a.width.min(b.width) * a.height.min(b.height);
    let va = a.length * a.width * a.height;
    let vb = b.length * b.width * b.height;
    1.0 - inter / (va + vb - inter)
}

pub fn orientation_error(a: &Detection, b: &Detection) -> f64 {
    wrap_angle(a.center.yaw - b.center.yaw).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// AP per threshold, in threshold order.
    pub ap: Vec<f64>,
    pub n_gt: usize,
    pub n_matches: usize,
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub nds: f64,
    pub per_class: BTreeMap<String, ClassReport>,
    pub thresholds: Vec<f64>,
}

/// `½ [mAP + ⅓ Σ (1 − min(1, mTP))]` over ATE, ASE and AOE.
pub fn nds_score(map: f64, ate: f64, ase: f64, aoe: f64) -> f64 {
    let tp: f64 = [ate, ase, aoe].iter().map(|e| 1.0 - e.min(1.0)).sum();
    0.5 * (map + tp / 3.0)
}

/// NDS over a set of frames. Only classes with ground truth in the frames
/// are evaluated. A class without any match at the TP threshold gets the
/// worst error (1) on every TP term.
pub fn nds_frames(frames: &[FramePair]) -> NdsReport {
    let mut per_class = BTreeMap::new();
    for class in ObjectClass::ALL {
        let n_gt: usize = frames
            .iter()
            .map(|f| f.gt.iter().filter(|b| b.class == class).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        let ap: Vec<f64> = AP_THRESHOLDS
            .iter()
            .map(|&t| average_precision_frames(frames, class, t).unwrap_or(0.0))
            .collect();
        let (mut te, mut se, mut oe, mut n) = (0.0, 0.0, 0.0, 0usize);
        for f in frames {
            let gt = of_class(&f.gt, class);
            let det = of_class(&f.det, class);
            for (g, d, dist) in match_frame(&gt, &det, TP_THRESHOLD).pairs {
                te += dist;
                se += scale_error(&gt[g], &det[d]);
                oe += orientation_error(&gt[g], &det[d]);
                n += 1;
            }
        }
        let (ate, ase, aoe) = if n == 0 {
            (1.0, 1.0, 1.0)
        } else {
            let k = n as f64;
            (te / k, se / k, oe / k)
        };
        per_class.insert(
            class.name().to_string(),
            ClassReport {
                ap,
                n_gt,
                n_matches: n,
                ate,
                ase,
                aoe,
            },
        );
    }
    if per_class.is_empty() {
        return NdsReport {
            map: 0.0,
            ate: 1.0,
            ase: 1.0,
            aoe: 1.0,
            nds: nds_score(0.0, 1.0, 1.0, 1.0),
            per_class,
            thresholds: AP_THRESHOLDS.to_vec(),
        };
    }
    let k = per_class.len() as f64;
    let map = per_class.values().flat_map(|c| c.ap.iter()).sum::<f64>()
        / (k * AP_THRESHOLDS.len() as f64);
    let ate = per_class.values().map(|c| c.ate).sum::<f64>() / k;
    let ase = per_class.values().map(|c| c.ase).sum::<f64>() / k;
    let aoe = per_class.values().map(|c| c.aoe).sum::<f64>() / k;
    NdsReport {
        map,
        ate,
        ase,
        aoe,
        nds: nds_score(map, ate, ase, aoe),
        per_class,
        thresholds: AP_THRESHOLDS.to_vec(),
    }
}

pub fn nds(scene: &Scene, submission: &DetectionSet) -> NdsReport {
    nds_frames(&frame_pairs(scene, submission, None))
}

/// NDS over many scenes, pooling every frame before computing AP.
pub fn nds_dataset(scenes: &[Scene], submissions: &[&DetectionSet]) -> NdsReport {
    let frames: Vec<FramePair> = scenes
        .iter()
        .zip(submissions)
        .flat_map(|(s, d)| frame_pairs(s, d, None))
        .collect();
    nds_frames(&frames)
}

/// NDS restricted to the keyframes inside `[t_a, t_b]`.
pub fn local_nds(
    scene: &Scene,
    submission: &DetectionSet,
    window: (f64, f64),
) -> Result<NdsReport> {
    let frames = frame_pairs(scene, submission, Some(window));
    if frames.is_empty() {
        return Err(Error::Range {
            what: format!(
                "window start (no keyframe of {} inside [{}, {}])",
                scene.scene_id, window.0, window.1
            ),
            value: window.0,
            lo: scene.start_time(),
            hi: scene.start_time() + scene.duration(),
        });
    }
    Ok(nds_frames(&frames))
}
