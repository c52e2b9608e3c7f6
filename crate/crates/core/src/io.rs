//! JSON file formats for scenes and detection submissions.
//!
//! Scene files:
//!
//! ```text
//! { "schema_version": 1, "scene_id": "...", "keyframe_period_s": 0.5,
//!   "ego_trajectory": [[t, x, y, yaw], ...],
//!   "agents": [{"track_id": 7, "class": "car",
//!               "frames": [{"t","x","y","yaw","l","w","h","vx","vy"}, ...]}],
//!   "map": {"ped_crossing": [[[x, y], ...]], "walkway": [...], "carpark_area": [...]} }
//! ```
//!
//! Detection files: `{schema_version, scene_id, frames: [{t, boxes: [{x, y, yaw, l, w, h, class, score}]}]}`.
//! Boxes may carry an optional integer `track_id`.
//!
//! Numbers are written with the shortest representation that parses back to
//! the same `f64`, so save/load round-trips are exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::scene::{
    AgentTrack, Detection, DetectionFrame, DetectionSet, MapLayers, ObjectClass, Polygon, Scene,
    TrackFrame,
};

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    schema_version: i64,
    scene_id: String,
    keyframe_period_s: f64,
    ego_trajectory: Vec<[f64; 4]>,
    agents: Vec<AgentFile>,
    map: MapFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    track_id: u64,
    class: ObjectClass,
    frames: Vec<FrameFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameFile {
    t: f64,
    x: f64,
    y: f64,
    yaw: f64,
    l: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    ped_crossing: Vec<Polygon>,
    walkway: Vec<Polygon>,
    carpark_area: Vec<Polygon>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct DetectionFile {
    schema_version: i64,
    scene_id: String,
    frames: Vec<DetFrameFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetFrameFile {
    t: f64,
    boxes: Vec<DetBoxFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetBoxFile {
    x: f64,
    y: f64,
    yaw: f64,
    l: f64,
    w: f64,
    h: f64,
    class: ObjectClass,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    track_id: Option<u64>,
}

fn parse_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        message: message.into(),
    }
}

/// Deserializes a versioned document, checking `schema_version` first so a
/// version mismatch is reported as such rather than as a shape error.
fn from_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    let version = value
        .get("schema_version")
        .ok_or_else(|| parse_error("schema_version", "missing field `schema_version`"))?;
    let version = version
        .as_i64()
        .ok_or_else(|| parse_error("schema_version", "expected an integer"))?;
    if version != SCHEMA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        parse_error(path, e.into_inner().to_string())
    })
}

fn parse_bytes<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| parse_error(".", e.to_string()))?;
    from_value(value)
}

fn scene_from_file(f: SceneFile) -> Result<Scene> {
    let scene = Scene {
        scene_id: f.scene_id,
        keyframe_period: f.keyframe_period_s,
        ego_trajectory: f
            .ego_trajectory
            .into_iter()
            .map(|[t, x, y, yaw]| (t, Pose2D::new(x, y, yaw)))
            .collect(),
        agents: f
            .agents
            .into_iter()
            .map(|a| AgentTrack {
                track_id: a.track_id,
                class: a.class,
                frames: a
                    .frames
                    .into_iter()
                    .map(|fr| TrackFrame {
                        t: fr.t,
                        pose: Pose2D::new(fr.x, fr.y, fr.yaw),
                        length: fr.l,
                        width: fr.w,
                        height: fr.h,
                        velocity: [fr.vx, fr.vy],
                    })
                    .collect(),
            })
            .collect(),
        map: MapLayers {
            ped_crossing: f.map.ped_crossing,
            walkway: f.map.walkway,
            carpark_area: f.map.carpark_area,
        },
    };
    scene.validate()?;
    Ok(scene)
}

fn scene_to_file(scene: &Scene) -> SceneFile {
    SceneFile {
        schema_version: SCHEMA_VERSION,
        scene_id: scene.scene_id.clone(),
        keyframe_period_s: scene.keyframe_period,
        ego_trajectory: scene
            .ego_trajectory
            .iter()
            .map(|(t, p)| [*t, p.x, p.y, p.yaw])
            .collect(),
        agents: scene
            .agents
            .iter()
            .map(|a| AgentFile {
                track_id: a.track_id,
                class: a.class,
                frames: a
                    .frames
                    .iter()
                    .map(|f| FrameFile {
                        t: f.t,
                        x: f.pose.x,
                        y: f.pose.y,
                        yaw: f.pose.yaw,
                        l: f.length,
                        w: f.width,
                        h: f.height,
                        vx: f.velocity[0],
                        vy: f.velocity[1],
                    })
                    .collect(),
            })
            .collect(),
        map: MapFile {
            ped_crossing: scene.map.ped_crossing.clone(),
            walkway: scene.map.walkway.clone(),
            carpark_area: scene.map.carpark_area.clone(),
        },
    }
}

pub fn scene_from_slice(bytes: &[u8]) -> Result<Scene> {
    scene_from_file(parse_bytes(bytes)?)
}

pub fn scene_to_string(scene: &Scene) -> String {
    let mut s = serde_json::to_string(&scene_to_file(scene)).expect("scene serializes");
    s.push('\n');
    s
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    scene_from_slice(&bytes)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scene_to_string(scene)).map_err(|e| Error::io(path, e))
}

fn detections_from_file(f: DetectionFile) -> Result<DetectionSet> {
    let mut frames = Vec::with_capacity(f.frames.len());
    for (fi, fr) in f.frames.into_iter().enumerate() {
        if !(fr.t.is_finite() && fr.t >= 0.0) {
            return Err(parse_error(
                format!("frames[{fi}].t"),
                "timestamp must be non-negative",
            ));
        }
        let mut boxes = Vec::with_capacity(fr.boxes.len());
        for (bi, b) in fr.boxes.into_iter().enumerate() {
            let path = format!("frames[{fi}].boxes[{bi}]");
            if !(0.0..=1.0).contains(&b.score) {
                return Err(parse_error(
                    format!("{path}.score"),
                    "score must be in [0, 1]",
                ));
            }
            if !(b.l > 0.0 && b.w > 0.0 && b.h > 0.0) {
                return Err(parse_error(
                    format!("{path}.l"),
                    "box dimensions must be positive",
                ));
            }
            if !(b.x.is_finite() && b.y.is_finite() && b.yaw.is_finite()) {
                return Err(parse_error(path, "non-finite coordinate"));
            }
            boxes.push(Detection {
                center: Pose2D::new(b.x, b.y, b.yaw),
                length: b.l,
                width: b.w,
                height: b.h,
                class: b.class,
                score: b.score,
                track_id: b.track_id,
            });
        }
        frames.push(DetectionFrame {
            timestamp: fr.t,
            boxes,
        });
    }
    Ok(DetectionSet {
        scene_id: f.scene_id,
        frames,
    })
}

pub(crate) fn detections_to_file(set: &DetectionSet) -> DetectionFile {
    DetectionFile {
        schema_version: SCHEMA_VERSION,
        scene_id: set.scene_id.clone(),
        frames: set
            .frames
            .iter()
            .map(|f| DetFrameFile {
                t: f.timestamp,
                boxes: f
                    .boxes
                    .iter()
                    .map(|b| DetBoxFile {
                        x: b.center.x,
                        y: b.center.y,
                        yaw: b.center.yaw,
                        l: b.length,
                        w: b.width,
                        h: b.height,
                        class: b.class,
                        score: b.score,
                        track_id: b.track_id,
                    })
                    .collect(),
            })
            .collect(),
    }
}

pub fn detections_from_value(value: serde_json::Value) -> Result<DetectionSet> {
    detections_from_file(from_value(value)?)
}

pub fn detections_to_value(set: &DetectionSet) -> serde_json::Value {
    serde_json::to_value(detections_to_file(set)).expect("detections serialize")
}

pub fn detections_from_slice(bytes: &[u8]) -> Result<DetectionSet> {
    detections_from_file(parse_bytes(bytes)?)
}

pub fn detections_to_string(set: &DetectionSet) -> String {
    let mut s = serde_json::to_string(&detections_to_file(set)).expect("detections serialize");
    s.push('\n');
    s
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<DetectionSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    detections_from_slice(&bytes)
}

pub fn save_detections(set: &DetectionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, detections_to_string(set)).map_err(|e| Error::io(path, e))
}

fn json_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every `scene_*.json` in `dir`, sorted by scene id.
pub fn load_scene_dir(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let mut scenes = Vec::new();
    for path in json_files(dir)? {
        let is_scene = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("scene_"));
        if is_scene {
            scenes.push(load_scene(&path)?);
        }
    }
    scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Ok(scenes)
}

/// Loads a single detection file, or every `*.json` detection file in a
/// directory.
pub fn load_detection_sets(path: impl AsRef<Path>) -> Result<Vec<DetectionSet>> {
    let path = path.as_ref();
    if path.is_dir() {
        json_files(path)?.iter().map(load_detections).collect()
    } else {
        Ok(vec![load_detections(path)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_scene() -> Scene {
        Scene {
            scene_id: "scene-0001".into(),
            keyframe_period: 0.5,
            ego_trajectory: (0..=4)
                .map(|i| (i as f64 * 0.25, Pose2D::new(0.1 * i as f64, 1.0 / 3.0, 0.2)))
                .collect(),
            agents: vec![AgentTrack {
                track_id: 4,
                class: ObjectClass::Pedestrian,
                frames: vec![TrackFrame {
                    t: 0.5,
                    pose: Pose2D::new(3.0, -1.1, 1.0),
                    length: 0.7,
                    width: 0.7,
                    height: 1.8,
                    velocity: [0.1, 1.3],
                }],
            }],
            map: MapLayers {
                ped_crossing: vec![vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]],
                walkway: vec![],
                carpark_area: vec![],
            },
        }
    }

    #[test]
    fn scene_round_trip_is_byte_identical() {
        let s = sample_scene();
        let text = scene_to_string(&s);
        let back = scene_from_slice(text.as_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(scene_to_string(&back), text);
    }

    #[test]
    fn missing_field_is_named() {
        let mut v: serde_json::Value =
            serde_json::from_str(&scene_to_string(&sample_scene())).unwrap();
        v.as_object_mut().unwrap().remove("ego_trajectory");
        let err = scene_from_slice(v.to_string().as_bytes())
            .unwrap_err()
            .to_string();
        assert!(err.contains("ego_trajectory"), "{err}");
    }

    #[test]
    fn nested_error_has_path() {
        let mut v: serde_json::Value =
            serde_json::from_str(&scene_to_string(&sample_scene())).unwrap();
        v["agents"][0]["frames"][0]["l"] = serde_json::json!("long");
        let err = scene_from_slice(v.to_string().as_bytes())
            .unwrap_err()
            .to_string();
        assert!(err.contains("agents[0].frames[0].l"), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let mut v: serde_json::Value =
            serde_json::from_str(&scene_to_string(&sample_scene())).unwrap();
        v["schema_version"] = serde_json::json!(2);
        let err = scene_from_slice(v.to_string().as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            Error::Version {
                found: 2,
                expected: 1
            }
        ));
    }

    #[test]
    fn detections_round_trip_and_validation() {
        let set = DetectionSet {
            scene_id: "x".into(),
            frames: vec![DetectionFrame {
                timestamp: 1.5,
                boxes: vec![Detection {
                    center: Pose2D::new(1.0, 2.0, -0.5),
                    length: 4.2,
                    width: 1.8,
                    height: 1.5,
                    class: ObjectClass::Car,
                    score: 0.25,
                    track_id: None,
                }],
            }],
        };
        let text = detections_to_string(&set);
        assert!(!text.contains("track_id"));
        assert_eq!(detections_from_slice(text.as_bytes()).unwrap(), set);

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["frames"][0]["boxes"][0]["score"] = serde_json::json!(1.5);
        let err = detections_from_value(v).unwrap_err().to_string();
        assert!(err.contains("frames[0].boxes[0].score"), "{err}");
    }
}
