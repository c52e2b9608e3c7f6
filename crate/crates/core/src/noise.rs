//! Synthetic detector errors applied to ground-truth detections.
//!
//! Draws are coupled across noise levels: every box consumes the same random
//! numbers whatever the level, so a larger sigma scales the same offsets, a
//! larger drop probability drops a superset and more false positives extend
//! the same list.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2D};
use crate::raster::GridSpec;
use crate::rng::{derive_seed, gaussian, seeded, stable_hash, uniform, SplitMix64};
use crate::scene::{Detection, DetectionFrame, DetectionSet, ObjectClass, Scene};

/// Boxes never shrink below this size along any axis (m).
pub const MIN_DIMENSION: f64 = 0.1;
pub const FP_LENGTH: [f64; 2] = [3.5, 5.5];
pub const FP_WIDTH: [f64; 2] = [1.6, 2.2];
pub const FP_HEIGHT: [f64; 2] = [1.4, 2.0];
/// Confidence given to injected false positives.
pub const FP_SCORE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Translation,
    Orientation,
    Size,
    Drop,
    FalsePositive,
    RemoveByDistance,
    RemoveBySpeed,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 7] = [
        NoiseKind::Translation,
        NoiseKind::Orientation,
        NoiseKind::Size,
        NoiseKind::Drop,
        NoiseKind::FalsePositive,
        NoiseKind::RemoveByDistance,
        NoiseKind::RemoveBySpeed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Translation => "translation",
            NoiseKind::Orientation => "orientation",
            NoiseKind::Size => "size",
            NoiseKind::Drop => "drop",
            NoiseKind::FalsePositive => "false_positive",
            NoiseKind::RemoveByDistance => "remove_by_distance",
            NoiseKind::RemoveBySpeed => "remove_by_speed",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = NoiseKind::ALL.iter().map(|k| k.name()).collect();
                Error::config(
                    "kind",
                    format!(
                        "unknown noise kind `{s}` (expected one of {})",
                        known.join(", ")
                    ),
                )
            })
    }
}

fn default_n_remove() -> usize {
    5
}

/// One noise model. Only the fields its kind uses are read: `sigma` (m for
/// translation and size, degrees for orientation), `p` for drop, `n_fp` for
/// false positives, `percentile` and `n_remove` for removals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub n_fp: usize,
    #[serde(default)]
    pub percentile: f64,
    #[serde(default = "default_n_remove")]
    pub n_remove: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        Self {
            kind,
            sigma: 0.0,
            p: 0.0,
            n_fp: 0,
            percentile: 0.0,
            n_remove: default_n_remove(),
            seed,
        }
    }

    /// This noise spec with its kind's level parameter set to `level` (`n_fp` is
    /// rounded).
    pub fn at_level(&self, level: f64) -> Self {
        let mut s = self.clone();
        match self.kind {
            NoiseKind::Translation | NoiseKind::Orientation | NoiseKind::Size => s.sigma = level,
            NoiseKind::Drop => s.p = level,
            NoiseKind::FalsePositive => s.n_fp = level.round().max(0.0) as usize,
            NoiseKind::RemoveByDistance | NoiseKind::RemoveBySpeed => s.percentile = level,
        }
        s
    }

    /// Parses the CLI JSON form; an unknown `kind` is a config error.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "noise spec".into(),
            message: e.to_string(),
        })?;
        if let Some(k) = value.get("kind").and_then(|k| k.as_str()) {
            k.parse::<NoiseKind>()?;
        }
        serde_path_to_error::deserialize(value).map_err(|e| Error::Parse {
            path: format!("noise spec: {}", e.path()),
            message: e.inner().to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::config(
                "sigma",
                format!("must be finite and >= 0, got {}", self.sigma),
            ));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(
                "p",
                format!("must lie in [0, 1], got {}", self.p),
            ));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::config(
                "percentile",
                format!("must lie in [0, 100], got {}", self.percentile),
            ));
        }
        Ok(())
    }
}

fn scene_seed(spec: &NoiseSpec, scene_id: &str) -> u64 {
    derive_seed(spec.seed, stable_hash(scene_id))
}

fn frame_rng(spec: &NoiseSpec, scene_id: &str, t: f64) -> SplitMix64 {
    // keyed by timestamp so subsets of frames see the same noise
    let key = (t * 1000.0).round() as i64 as u64;
    seeded(derive_seed(
        scene_seed(spec, scene_id),
        key.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    ))
}

/// Truncated Gaussian perturbation of a box dimension.
fn jitter_dim<R: Rng>(rng: &mut R, v: f64, sigma: f64) -> f64 {
    for _ in 0..64 {
        let out = v + gaussian(rng, sigma);
        if out > MIN_DIMENSION {
            return out;
        }
    }
    v.max(MIN_DIMENSION)
}

fn false_positive<R: Rng>(rng: &mut R, ego: &Pose2D, grid: &GridSpec) -> Detection {
    let length = uniform(rng, FP_LENGTH[0], FP_LENGTH[1]);
    let width = uniform(rng, FP_WIDTH[0], FP_WIDTH[1]);
    let height = uniform(rng, FP_HEIGHT[0], FP_HEIGHT[1]);
    let yaw = uniform(rng, -std::f64::consts::PI, std::f64::consts::PI);
    let x = uniform(rng, grid.x_min, grid.x_max());
    let y = uniform(rng, grid.y_min, grid.y_max());
    let local = Pose2D::new(x, y, yaw);
    Detection {
        center: ego.compose(&local),
        length,
        width,
        height,
        class: ObjectClass::Car,
        score: FP_SCORE,
        track_id: None,
    }
}

/// Tracks selected by a percentile removal: candidates are the scene's
/// vehicles, ranked ascending by mean distance to the ego over the track's
/// frames (or maximum speed), so percentile 0 means nearest (slowest). The `n_remove`
/// consecutive ranks centered on the percentile rank are taken.
pub fn removal_tracks(
    scene: &Scene,
    kind: NoiseKind,
    percentile: f64,
    n_remove: usize,
) -> Vec<u64> {
    let mut ranked: Vec<(f64, u64)> = scene
        .agents
        .iter()
        .filter(|a| a.class.is_vehicle() && !a.frames.is_empty())
        .map(|a| {
            let key = match kind {
                NoiseKind::RemoveBySpeed => a.max_speed(),
                _ => {
                    let d: Vec<f64> = a
                        .frames
                        .iter()
                        .filter_map(|f| {
                            scene.interpolate_ego(f.t).ok().map(|e| e.distance(&f.pose))
                        })
                        .collect();
                    if d.is_empty() {
                        f64::INFINITY
                    } else {
                        d.iter().sum::<f64>() / d.len() as f64
                    }
                }
            };
            (key, a.track_id)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = ranked.len();
    let k = n_remove.min(n);
    if k == 0 {
        return Vec::new();
    }
    let center = (percentile / 100.0 * (n - 1) as f64).round() as usize;
    let start = center.saturating_sub(k / 2).min(n - k);
    ranked[start..start + k].iter().map(|r| r.1).collect()
}

/// Perturbs detection frames of `scene` according to `spec`, using the
/// default grid extent for false-positive placement.
pub fn apply_noise(
    frames: &[DetectionFrame],
    spec: &NoiseSpec,
    scene: &Scene,
) -> Result<Vec<DetectionFrame>> {
    apply_noise_in(frames, spec, scene, &GridSpec::default())
}

pub fn apply_noise_in(
    frames: &[DetectionFrame],
    spec: &NoiseSpec,
    scene: &Scene,
    grid: &GridSpec,
) -> Result<Vec<DetectionFrame>> {
    spec.validate()?;
    let removed: HashSet<u64> = match spec.kind {
        NoiseKind::RemoveByDistance | NoiseKind::RemoveBySpeed => {
            removal_tracks(scene, spec.kind, spec.percentile, spec.n_remove)
                .into_iter()
                .collect()
        }
        _ => HashSet::new(),
    };
    frames
        .iter()
        .map(|f| {
            let mut rng = frame_rng(spec, &scene.scene_id, f.timestamp);
            let mut boxes = Vec::with_capacity(f.boxes.len() + spec.n_fp);
            for b in &f.boxes {
                let mut b = b.clone();
                match spec.kind {
                    NoiseKind::Translation => {
                        let dx = gaussian(&mut rng, spec.sigma);
                        let dy = gaussian(&mut rng, spec.sigma);
                        b.center.x += dx;
                        b.center.y += dy;
                    }
                    NoiseKind::Orientation => {
                        let d = gaussian(&mut rng, spec.sigma.to_radians());
                        if spec.sigma > 0.0 {
                            b.center.yaw = wrap_angle(b.center.yaw + d);
                        }
                    }
                    NoiseKind::Size => {
                        b.length = jitter_dim(&mut rng, b.length, spec.sigma);
                        b.width = jitter_dim(&mut rng, b.width, spec.sigma);
                        b.height = jitter_dim(&mut rng, b.height, spec.sigma);
                    }
                    NoiseKind::Drop => {
                        let u: f64 = rng.random();
                        if u < spec.p {
                            continue;
                        }
                    }
                    NoiseKind::RemoveByDistance | NoiseKind::RemoveBySpeed => {
                        if b.track_id.is_some_and(|id| removed.contains(&id)) {
                            continue;
                        }
                    }
                    NoiseKind::FalsePositive => {}
                }
                boxes.push(b);
            }
            if spec.kind == NoiseKind::FalsePositive && spec.n_fp > 0 {
                let ego = scene.interpolate_ego(f.timestamp)?;
                for _ in 0..spec.n_fp {
                    boxes.push(false_positive(&mut rng, &ego, grid));
                }
            }
            Ok(DetectionFrame {
                timestamp: f.timestamp,
                boxes,
            })
        })
        .collect()
}

pub fn apply_noise_set(
    set: &DetectionSet,
    spec: &NoiseSpec,
    scene: &Scene,
) -> Result<DetectionSet> {
    Ok(DetectionSet {
        scene_id: set.scene_id.clone(),
        frames: apply_noise(&set.frames, spec, scene)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_and_unknown_is_config_error() {
        for k in NoiseKind::ALL {
            assert_eq!(k.name().parse::<NoiseKind>().unwrap(), k);
        }
        let e = NoiseSpec::from_json(r#"{"kind":"blur","seed":1}"#).unwrap_err();
        assert!(
            matches!(e, Error::Config { ref field, .. } if field == "kind"),
            "{e}"
        );
        let s = NoiseSpec::from_json(r#"{"kind":"drop","p":0.5,"seed":3}"#).unwrap();
        assert_eq!(s.n_remove, 5);
        assert_eq!(s.p, 0.5);
    }

    #[test]
    fn invalid_levels_rejected() {
        let mut s = NoiseSpec::new(NoiseKind::Drop, 0);
        s.p = 1.5;
        assert!(s.validate().is_err());
        let mut s = NoiseSpec::new(NoiseKind::Translation, 0);
        s.sigma = -1.0;
        assert!(s.validate().is_err());
    }
}
