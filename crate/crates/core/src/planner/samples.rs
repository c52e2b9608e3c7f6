use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::raster::{
    horizon_times, rasterize_input, rasterize_target, target_from_poses, BevInput, GridSpec,
    TargetTrack, HISTORY, HISTORY_OFFSETS, HORIZON,
};
use crate::scene::{Detection, DetectionFrame, Scene};

use super::PlannerConfig;

/// Whose future a sample predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subject {
    Ego,
    Agent(u64),
}

/// A (scene, t0, subject) triple; rasterized lazily by [`build_sample`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRef {
    pub scene: usize,
    pub t0: f64,
    pub subject: Subject,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub input: BevInput,
    pub target: TargetTrack,
    pub id: String,
}

fn subject_pose(scene: &Scene, subject: Subject, t: f64) -> Option<Pose2D> {
    match subject {
        Subject::Ego => scene.interpolate_ego(t).ok(),
        Subject::Agent(id) => scene.agent(id)?.pose_at(t),
    }
}

/// Target track of a subject, `None` when its track does not cover the
/// horizon.
pub fn subject_target(
    scene: &Scene,
    subject: Subject,
    t0: f64,
    grid: &GridSpec,
) -> Option<TargetTrack> {
    match subject {
        Subject::Ego => rasterize_target(scene, t0, grid).ok(),
        Subject::Agent(_) => {
            let frame = subject_pose(scene, subject, t0)?;
            let times = horizon_times(t0);
            let poses = times
                .iter()
                .map(|&t| subject_pose(scene, subject, t))
                .collect::<Option<Vec<_>>>()?;
            Some(target_from_poses(&poses, times, &frame, grid))
        }
    }
}

/// Training/evaluation samples of every scene in (scene, t0, subject) order.
/// The ego is a subject at every chunk; with `train_on_all_agents`, so is
/// every car or truck that covers the chunk and moves more than
/// `min_displacement` over the horizon.
pub fn enumerate_samples(
    scenes: &[Scene],
    config: &PlannerConfig,
    all_agents: bool,
) -> Vec<SampleRef> {
    let grid = &config.grid;
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for t0 in scene.chunk_times(HISTORY, HORIZON) {
            if subject_target(scene, Subject::Ego, t0, grid).is_some_and(|t| t.in_grid() > 0) {
                out.push(SampleRef {
                    scene: si,
                    t0,
                    subject: Subject::Ego,
                });
            }
            if !all_agents {
                continue;
            }
            for agent in scene.agents.iter().filter(|a| a.class.is_vehicle()) {
                let subject = Subject::Agent(agent.track_id);
                let covered = HISTORY_OFFSETS
                    .iter()
                    .all(|o| agent.frame_at(t0 + o).is_some());
                let (Some(start), Some(end)) = (agent.pose_at(t0), agent.pose_at(t0 + HORIZON))
                else {
                    continue;
                };
                if !covered || start.distance(&end) <= config.min_displacement {
                    continue;
                }
                if subject_target(scene, subject, t0, grid).is_some_and(|t| t.in_grid() > 0) {
                    out.push(SampleRef {
                        scene: si,
                        t0,
                        subject,
                    });
                }
            }
        }
    }
    out
}

/// The five history frames a subject observes: every other agent's
/// ground-truth box, plus the true ego's footprint when the subject is
/// another vehicle.
pub fn subject_history(scene: &Scene, subject: Subject, t0: f64) -> Result<Vec<DetectionFrame>> {
    HISTORY_OFFSETS
        .iter()
        .map(|o| {
            let t = t0 + o;
            let mut boxes: Vec<Detection> = scene
                .boxes_at(t)
                .into_iter()
                .filter(|b| subject != Subject::Agent(b.track_id))
                .map(|b| b.to_detection(1.0))
                .collect();
            if subject != Subject::Ego {
                boxes.push(Detection::ego_footprint(scene.interpolate_ego(t)?));
            }
            Ok(DetectionFrame {
                timestamp: t,
                boxes,
            })
        })
        .collect()
}

pub fn build_sample(scene: &Scene, r: &SampleRef, grid: &GridSpec) -> Result<Sample> {
    let id = match r.subject {
        Subject::Ego => format!("{}@{:.2}/ego", scene.scene_id, r.t0),
        Subject::Agent(t) => format!("{}@{:.2}/track{}", scene.scene_id, r.t0, t),
    };
    let frame = subject_pose(scene, r.subject, r.t0)
        .ok_or_else(|| Error::Input(format!("sample {id}: subject has no pose at t0")))?;
    let target = subject_target(scene, r.subject, r.t0, grid).ok_or_else(|| {
        Error::Input(format!(
            "sample {id}: subject track does not cover the horizon"
        ))
    })?;
    let history = subject_history(scene, r.subject, r.t0)?;
    let input = rasterize_input(&history, &scene.map, &frame, r.t0, grid)?;
    Ok(Sample { input, target, id })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, GenConfig, LayoutChoice};

    #[test]
    fn all_agents_adds_samples() {
        let cfg = GenConfig {
            seed: 4,
            n_scenes: 2,
            layout: LayoutChoice::StraightRoad,
            ..GenConfig::default()
        };
        let scenes: Vec<Scene> = generate(&cfg)
            .unwrap()
            .into_iter()
            .map(|g| g.scene)
            .collect();
        let pc = PlannerConfig::desk();
        let ego = enumerate_samples(&scenes, &pc, false);
        let all = enumerate_samples(&scenes, &pc, true);
        assert_eq!(ego.len(), 2 * 29);
        assert!(all.len() > ego.len());
        assert!(ego.iter().all(|r| r.subject == Subject::Ego));
    }

    #[test]
    fn agent_samples_exclude_self_and_include_ego() {
        let cfg = GenConfig {
            seed: 4,
            n_scenes: 1,
            layout: LayoutChoice::StraightRoad,
            ..GenConfig::default()
        };
        let scene = &generate(&cfg).unwrap()[0].scene;
        let all = enumerate_samples(std::slice::from_ref(scene), &PlannerConfig::desk(), true);
        let r = all.iter().find(|r| r.subject != Subject::Ego).unwrap();
        let Subject::Agent(id) = r.subject else {
            unreachable!()
        };
        let hist = subject_history(scene, r.subject, r.t0).unwrap();
        for f in &hist {
            assert!(f.boxes.iter().all(|b| b.track_id != Some(id)));
            assert_eq!(f.boxes.iter().filter(|b| b.track_id.is_none()).count(), 1);
        }
        let s = build_sample(scene, r, &GridSpec::default()).unwrap();
        assert!(s.target.in_grid() > 0);
        // subject sits at the origin of its own frame
        assert!(s.target.cells[0].is_some());
    }
}
