//! Ground-truth world description: ego trajectory, agent tracks, map layers,
//! and the detector output format that is evaluated against them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{interpolate_pose, polygon_is_simple, Pose2D};

/// Time comparisons between keyframe stamps use this tolerance (seconds).
pub const TIME_EPS: f64 = 1e-6;

/// Footprint used for the true ego when it appears as an obstacle in another
/// agent's input.
pub const EGO_LENGTH: f64 = 4.6;
pub const EGO_WIDTH: f64 = 1.9;
pub const EGO_HEIGHT: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
    Barrier,
    Other,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] = [
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::Pedestrian,
        ObjectClass::Barrier,
        ObjectClass::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Barrier => "barrier",
            ObjectClass::Other => "other",
        }
    }

    pub fn is_vehicle(self) -> bool {
        matches!(self, ObjectClass::Car | ObjectClass::Truck)
    }
}

/// One annotated agent box at one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBox {
    pub center: Pose2D,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub class: ObjectClass,
    /// World-frame velocity (m/s).
    pub velocity: [f64; 2],
    pub track_id: u64,
}

impl AgentBox {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn to_detection(&self, score: f64) -> Detection {
        Detection {
            center: self.center,
            length: self.length,
            width: self.width,
            height: self.height,
            class: self.class,
            score,
            track_id: Some(self.track_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackFrame {
    pub t: f64,
    pub pose: Pose2D,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub track_id: u64,
    pub class: ObjectClass,
    /// Sorted by time; every stamp is a keyframe time.
    pub frames: Vec<TrackFrame>,
}

impl AgentTrack {
    pub fn frame_at(&self, t: f64) -> Option<&TrackFrame> {
        let i = self.frames.partition_point(|f| f.t < t - TIME_EPS);
        self.frames.get(i).filter(|f| (f.t - t).abs() <= TIME_EPS)
    }

    pub fn box_at(&self, t: f64) -> Option<AgentBox> {
        self.frame_at(t).map(|f| AgentBox {
            center: f.pose,
            length: f.length,
            width: f.width,
            height: f.height,
            class: self.class,
            velocity: f.velocity,
            track_id: self.track_id,
        })
    }

    /// Pose between keyframes, interpolated like the ego trajectory. `None`
    /// outside the track's time span.
    pub fn pose_at(&self, t: f64) -> Option<Pose2D> {
        interpolate_track(&self.frames, t, |f| f.t, |f| f.pose).ok()
    }

    pub fn max_speed(&self) -> f64 {
        self.frames
            .iter()
            .map(|f| f.velocity[0].hypot(f.velocity[1]))
            .fold(0.0, f64::max)
    }
}

/// One detector output box. `track_id` is carried through for boxes derived
/// from ground truth so that per-track perturbations stay consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub center: Pose2D,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub class: ObjectClass,
    pub score: f64,
    pub track_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub timestamp: f64,
    pub boxes: Vec<Detection>,
}

impl DetectionFrame {
    pub fn empty(timestamp: f64) -> Self {
        Self {
            timestamp,
            boxes: Vec::new(),
        }
    }
}

/// All detection frames a submission provides for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub scene_id: String,
    pub frames: Vec<DetectionFrame>,
}

impl DetectionSet {
    pub fn frame_at(&self, t: f64, tol: f64) -> Option<&DetectionFrame> {
        self.frames.iter().find(|f| (f.timestamp - t).abs() <= tol)
    }

    /// Drops boxes scoring below `thresh`.
    pub fn filter_score(&self, thresh: f64) -> DetectionSet {
        DetectionSet {
            scene_id: self.scene_id.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| DetectionFrame {
                    timestamp: f.timestamp,
                    boxes: f
                        .boxes
                        .iter()
                        .filter(|b| b.score >= thresh)
                        .cloned()
                        .collect(),
                })
                .collect(),
        }
    }
}

pub type Polygon = Vec<[f64; 2]>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapLayers {
    pub ped_crossing: Vec<Polygon>,
    pub walkway: Vec<Polygon>,
    pub carpark_area: Vec<Polygon>,
}

impl MapLayers {
    /// Layers in raster channel order.
    pub fn layers(&self) -> [&[Polygon]; 3] {
        [&self.ped_crossing, &self.walkway, &self.carpark_area]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub keyframe_period: f64,
    /// Dense `(t, pose)` samples, strictly increasing in `t`, starting at 0.
    pub ego_trajectory: Vec<(f64, Pose2D)>,
    pub agents: Vec<AgentTrack>,
    pub map: MapLayers,
}

fn interpolate_track<F>(
    items: &[F],
    t: f64,
    time: impl Fn(&F) -> f64,
    pose: impl Fn(&F) -> Pose2D,
) -> Result<Pose2D> {
    let (first, last) = match (items.first(), items.last()) {
        (Some(a), Some(b)) => (time(a), time(b)),
        _ => return Err(Error::Input("empty trajectory".into())),
    };
    if !(t >= first - TIME_EPS && t <= last + TIME_EPS) {
        return Err(Error::Range {
            what: "interpolation time".into(),
            value: t,
            lo: first,
            hi: last,
        });
    }
    let i = items.partition_point(|f| time(f) <= t + TIME_EPS);
    let i = i.saturating_sub(1);
    let ta = time(&items[i]);
    if (ta - t).abs() <= TIME_EPS || i + 1 == items.len() {
        return Ok(pose(&items[i]));
    }
    let tb = time(&items[i + 1]);
    let frac = (t - ta) / (tb - ta);
    Ok(interpolate_pose(
        &pose(&items[i]),
        &pose(&items[i + 1]),
        frac,
    ))
}

fn is_multiple(t: f64, period: f64) -> bool {
    let k = (t / period).round();
    (t - k * period).abs() <= TIME_EPS
}

impl Scene {
    pub fn start_time(&self) -> f64 {
        self.ego_trajectory.first().map(|(t, _)| *t).unwrap_or(0.0)
    }

    /// Time of the last keyframe; scenes start at t = 0.
    pub fn duration(&self) -> f64 {
        let last = self.ego_trajectory.last().map(|(t, _)| *t).unwrap_or(0.0);
        let k = ((last + TIME_EPS) / self.keyframe_period).floor();
        k * self.keyframe_period
    }

    pub fn keyframe_count(&self) -> usize {
        (self.duration() / self.keyframe_period).round() as usize + 1
    }

    pub fn keyframe_times(&self) -> Vec<f64> {
        (0..self.keyframe_count())
            .map(|k| k as f64 * self.keyframe_period)
            .collect()
    }

    /// Ego pose at `t`, interpolating between stored samples.
    pub fn interpolate_ego(&self, t: f64) -> Result<Pose2D> {
        interpolate_track(&self.ego_trajectory, t, |s| s.0, |s| s.1)
    }

    /// Ground-truth boxes of every agent annotated at keyframe `t`.
    pub fn boxes_at(&self, t: f64) -> Vec<AgentBox> {
        self.agents.iter().filter_map(|a| a.box_at(t)).collect()
    }

    pub fn agent(&self, track_id: u64) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.track_id == track_id)
    }

    /// Keyframes `t0` that have `history` seconds of past and `horizon`
    /// seconds of future inside the scene.
    pub fn chunk_times(&self, history: f64, horizon: f64) -> Vec<f64> {
        let start = self.start_time();
        let end = self.duration();
        self.keyframe_times()
            .into_iter()
            .filter(|&t0| t0 - history >= start - TIME_EPS && t0 + horizon <= end + TIME_EPS)
            .collect()
    }

    /// Checks the structural invariants, reporting the first violation with a
    /// field path.
    pub fn validate(&self) -> Result<()> {
        let bad = |path: String, message: &str| Error::Parse {
            path,
            message: message.to_string(),
        };
        if !(self.keyframe_period > 0.0 && self.keyframe_period.is_finite()) {
            return Err(bad("keyframe_period_s".into(), "must be positive"));
        }
        if self.ego_trajectory.is_empty() {
            return Err(bad("ego_trajectory".into(), "must not be empty"));
        }
        for (i, (t, p)) in self.ego_trajectory.iter().enumerate() {
            if !t.is_finite() || !p.is_finite() || *t < 0.0 {
                return Err(bad(
                    format!("ego_trajectory[{i}]"),
                    "non-finite or negative entry",
                ));
            }
            if i > 0 && *t <= self.ego_trajectory[i - 1].0 {
                return Err(bad(
                    format!("ego_trajectory[{i}]"),
                    "timestamps must be strictly increasing",
                ));
            }
        }
        let duration = self.duration();
        for (ai, a) in self.agents.iter().enumerate() {
            for (fi, f) in a.frames.iter().enumerate() {
                let path = format!("agents[{ai}].frames[{fi}]");
                if !is_multiple(f.t, self.keyframe_period)
                    || f.t < -TIME_EPS
                    || f.t > duration + TIME_EPS
                {
                    return Err(bad(format!("{path}.t"), "not a keyframe time of the scene"));
                }
                if fi > 0 && f.t <= a.frames[fi - 1].t + TIME_EPS {
                    return Err(bad(
                        format!("{path}.t"),
                        "frame times must be strictly increasing",
                    ));
                }
                if !(f.length > 0.0 && f.width > 0.0 && f.height > 0.0) {
                    return Err(bad(format!("{path}.l"), "box dimensions must be positive"));
                }
                if !f.pose.is_finite() || !f.velocity.iter().all(|v| v.is_finite()) {
                    return Err(bad(path, "non-finite value"));
                }
            }
        }
        for (name, layer) in [
            ("ped_crossing", &self.map.ped_crossing),
            ("walkway", &self.map.walkway),
            ("carpark_area", &self.map.carpark_area),
        ] {
            for (pi, poly) in layer.iter().enumerate() {
                let path = format!("map.{name}[{pi}]");
                if poly.len() < 3 {
                    return Err(bad(path, "polygon needs at least 3 vertices"));
                }
                if !polygon_is_simple(poly) {
                    return Err(bad(path, "polygon is self-intersecting"));
                }
            }
        }
        Ok(())
    }
}

impl Detection {
    /// The footprint of the true ego as seen by another agent.
    pub fn ego_footprint(pose: Pose2D) -> Detection {
        Detection {
            center: pose,
            length: EGO_LENGTH,
            width: EGO_WIDTH,
            height: EGO_HEIGHT,
            class: ObjectClass::Car,
            score: 1.0,
            track_id: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    pub(crate) fn line_scene() -> Scene {
        Scene {
            scene_id: "s".into(),
            keyframe_period: 0.5,
            ego_trajectory: vec![
                (0.0, Pose2D::new(0.0, 0.0, 3.0)),
                (1.0, Pose2D::new(2.0, 0.0, -3.0)),
                (2.0, Pose2D::new(4.0, 0.0, -3.0)),
            ],
            agents: vec![],
            map: MapLayers::default(),
        }
    }

    #[test]
    fn interpolate_ego_knots_and_midpoints() {
        let s = line_scene();
        assert_eq!(s.interpolate_ego(1.0).unwrap(), s.ego_trajectory[1].1);
        assert_eq!(s.interpolate_ego(2.0).unwrap(), s.ego_trajectory[2].1);
        let m = s.interpolate_ego(0.5).unwrap();
        assert!((m.x - 1.0).abs() < 1e-12);
        assert!((m.yaw.abs() - PI).abs() < 1e-12);
    }

    #[test]
    fn interpolate_ego_out_of_range_names_interval() {
        let s = line_scene();
        let err = s.interpolate_ego(2.5).unwrap_err();
        let msg = err.to_string();
        assert!(
            matches!(err, Error::Range { lo, hi, .. } if lo == 0.0 && hi == 2.0),
            "{msg}"
        );
        assert!(msg.contains("[0, 2]"), "{msg}");
    }

    #[test]
    fn duration_counts_keyframes() {
        let mut s = line_scene();
        s.ego_trajectory = (0..=80)
            .map(|i| (i as f64 * 0.25, Pose2D::IDENTITY))
            .collect();
        assert_eq!(s.keyframe_count(), 41);
        assert_eq!(s.duration(), 20.0);
        let chunks = s.chunk_times(2.0, 3.75);
        assert_eq!(chunks.first().copied(), Some(2.0));
        assert_eq!(chunks.last().copied(), Some(16.0));
        assert_eq!(chunks.len(), 29);
    }

    #[test]
    fn validate_rejects_bad_tracks() {
        let mut s = line_scene();
        s.agents.push(AgentTrack {
            track_id: 1,
            class: ObjectClass::Car,
            frames: vec![TrackFrame {
                t: 0.25,
                pose: Pose2D::IDENTITY,
                length: 4.0,
                width: 2.0,
                height: 1.5,
                velocity: [0.0, 0.0],
            }],
        });
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("agents[0].frames[0].t"), "{err}");
        s.agents[0].frames[0].t = 0.5;
        s.agents[0].frames[0].width = 0.0;
        assert!(s.validate().is_err());
        s.agents[0].frames[0].width = 2.0;
        assert!(s.validate().is_ok());
        s.map.walkway.push(vec![[0.0, 0.0], [1.0, 0.0]]);
        assert!(s
            .validate()
            .unwrap_err()
            .to_string()
            .contains("map.walkway[0]"));
    }

    #[test]
    fn track_lookup() {
        let track = AgentTrack {
            track_id: 3,
            class: ObjectClass::Truck,
            frames: (0..3)
                .map(|k| TrackFrame {
                    t: k as f64 * 0.5,
                    pose: Pose2D::new(k as f64, 0.0, 0.0),
                    length: 8.0,
                    width: 2.5,
                    height: 3.0,
                    velocity: [2.0, 0.0],
                })
                .collect(),
        };
        assert_eq!(track.box_at(0.5).unwrap().center.x, 1.0);
        assert!(track.box_at(0.75).is_none());
        assert!((track.pose_at(0.75).unwrap().x - 1.5).abs() < 1e-12);
        assert!(track.pose_at(1.5).is_none());
        assert_eq!(track.max_speed(), 2.0);
    }
}
