//! Deterministic synthetic driving scenes.
//!
//! Scenes are laid out in a local frame (ego starts at the origin heading +x)
//! and then moved to a random world pose so downstream code never relies on a
//! canonical frame. Every agent follows a scripted path at a scripted speed
//! profile; nothing reacts to anything else. Scene `i` draws from the stream
//! seeded with `seed ⊕ i` (see [`crate::rng`]).

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path as FsPath;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rect_separation, Pose2D};
use crate::io::save_scene;
use crate::rng::{derive_seed, seeded, uniform, SplitMix64};
use crate::scene::{
    AgentTrack, DetectionFrame, DetectionSet, MapLayers, ObjectClass, Polygon, Scene, TrackFrame,
    EGO_LENGTH, EGO_WIDTH,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    StraightRoad,
    Intersection,
    ParkingLot,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::StraightRoad => "straight_road",
            Layout::Intersection => "intersection",
            Layout::ParkingLot => "parking_lot",
        }
    }
}

/// Which layouts to draw. `Mixed` cycles straight road, intersection,
/// parking lot by scene index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutChoice {
    StraightRoad,
    Intersection,
    ParkingLot,
    Mixed,
}

impl LayoutChoice {
    pub fn layout_for(self, index: usize) -> Layout {
        match self {
            LayoutChoice::StraightRoad => Layout::StraightRoad,
            LayoutChoice::Intersection => Layout::Intersection,
            LayoutChoice::ParkingLot => Layout::ParkingLot,
            LayoutChoice::Mixed => [
                Layout::StraightRoad,
                Layout::Intersection,
                Layout::ParkingLot,
            ][index % 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub duration: f64,
    pub n_agents_range: [usize; 2],
    /// Cruise speed range for road vehicles (m/s); intersections and parking
    /// lots scale it down.
    pub speed_range: [f64; 2],
    pub layout: LayoutChoice,
    pub keyframe_period: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 10,
            duration: 20.0,
            n_agents_range: [10, 16],
            speed_range: [6.0, 12.0],
            layout: LayoutChoice::Mixed,
            keyframe_period: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config("duration", "must be positive"));
        }
        if !(self.keyframe_period > 0.0 && self.keyframe_period.is_finite()) {
            return Err(Error::config("keyframe_period", "must be positive"));
        }
        let [lo, hi] = self.n_agents_range;
        if lo > hi {
            return Err(Error::config("n_agents_range", "min exceeds max"));
        }
        let [vlo, vhi] = self.speed_range;
        if !(vlo > 0.0 && vlo <= vhi && vhi.is_finite()) {
            return Err(Error::config("speed_range", "need 0 < min <= max"));
        }
        let needs_agents = matches!(
            self.layout,
            LayoutChoice::StraightRoad | LayoutChoice::Mixed
        );
        if needs_agents && hi == 0 {
            return Err(Error::config(
                "n_agents_range",
                "straight_road scenes need at least one agent (the lead vehicle)",
            ));
        }
        Ok(())
    }
}

/// Distance travelled along a path as a function of time. Times before zero
/// extrapolate with the initial speed.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    /// Stationary until `delay`, then constant `speed`.
    Constant { speed: f64, delay: f64 },
    /// Cruise, brake to a stop, wait, accelerate back to cruise.
    /// `resume_at = ∞` stays stopped.
    StopAndGo {
        speed: f64,
        brake_at: f64,
        decel: f64,
        resume_at: f64,
        accel: f64,
    },
    /// Replays `inner` shifted later by `delay`.
    Delayed { inner: Box<Profile>, delay: f64 },
}

impl Profile {
    pub fn distance(&self, t: f64) -> f64 {
        match self {
            Profile::Constant { speed, delay } => speed * (t - delay).max(0.0),
            Profile::StopAndGo {
                speed,
                brake_at,
                decel,
                resume_at,
                accel,
            } => {
                let (v, tb, d, a) = (*speed, *brake_at, *decel, *accel);
                if t < tb {
                    return v * t;
                }
                let brake_time = v / d;
                let u = t - tb;
                if u < brake_time {
                    return v * tb + v * u - 0.5 * d * u * u;
                }
                let stop = v * tb + v * v / (2.0 * d);
                let tr = resume_at.max(tb + brake_time);
                if t < tr {
                    return stop;
                }
                let u = t - tr;
                let acc_time = v / a;
                if u < acc_time {
                    stop + 0.5 * a * u * u
                } else {
                    stop + 0.5 * a * acc_time * acc_time + v * (u - acc_time)
                }
            }
            Profile::Delayed { inner, delay } => {
                let u = t - delay;
                if u < 0.0 {
                    inner.speed(0.0) * u
                } else {
                    inner.distance(u)
                }
            }
        }
    }

    pub fn speed(&self, t: f64) -> f64 {
        match self {
            Profile::Constant { speed, delay } => {
                if t >= *delay {
                    *speed
                } else {
                    0.0
                }
            }
            Profile::StopAndGo {
                speed,
                brake_at,
                decel,
                resume_at,
                accel,
            } => {
                let (v, tb, d, a) = (*speed, *brake_at, *decel, *accel);
                if t < tb {
                    return v;
                }
                let brake_time = v / d;
                if t - tb < brake_time {
                    return v - d * (t - tb);
                }
                let tr = resume_at.max(tb + brake_time);
                if t < tr {
                    return 0.0;
                }
                (a * (t - tr)).min(v)
            }
            Profile::Delayed { inner, delay } => inner.speed((t - delay).max(0.0)),
        }
    }
}

/// Straight segment, optional constant-curvature turn, straight again.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    pub start: Pose2D,
    pub straight: f64,
    pub curvature: f64,
    /// Signed heading change of the turn (radians); 0 for no turn.
    pub turn: f64,
}

impl PathSpec {
    pub fn straight(start: Pose2D) -> Self {
        Self {
            start,
            straight: f64::INFINITY,
            curvature: 0.0,
            turn: 0.0,
        }
    }

    pub fn pose_at(&self, s: f64) -> Pose2D {
        if s <= self.straight || self.turn == 0.0 || self.curvature == 0.0 {
            return self.start.compose(&Pose2D::new(s, 0.0, 0.0));
        }
        let k = self.curvature.abs() * self.turn.signum();
        let arc_len = self.turn.abs() / self.curvature.abs();
        let u = (s - self.straight).min(arc_len);
        let phi = k * u;
        let local = Pose2D::new(self.straight + phi.sin() / k, (1.0 - phi.cos()) / k, phi);
        let rest = s - self.straight - u;
        self.start
            .compose(&local)
            .compose(&Pose2D::new(rest, 0.0, 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    pub path: PathSpec,
    pub profile: Profile,
}

impl Motion {
    pub fn parked(pose: Pose2D) -> Self {
        Self {
            path: PathSpec::straight(pose),
            profile: Profile::Constant {
                speed: 0.0,
                delay: 0.0,
            },
        }
    }

    pub fn constant(pose: Pose2D, speed: f64) -> Self {
        Self {
            path: PathSpec::straight(pose),
            profile: Profile::Constant { speed, delay: 0.0 },
        }
    }

    pub fn pose(&self, t: f64) -> Pose2D {
        self.path.pose_at(self.profile.distance(t))
    }

    pub fn velocity(&self, t: f64) -> [f64; 2] {
        let v = self.profile.speed(t);
        let yaw = self.pose(t).yaw;
        [v * yaw.cos(), v * yaw.sin()]
    }
}

#[derive(Debug, Clone)]
struct AgentPlan {
    class: ObjectClass,
    dims: [f64; 3],
    motion: Motion,
}

fn dims_for(rng: &mut SplitMix64, class: ObjectClass) -> [f64; 3] {
    match class {
        ObjectClass::Car => [
            uniform(rng, 4.0, 5.0),
            uniform(rng, 1.75, 2.0),
            uniform(rng, 1.4, 1.7),
        ],
        ObjectClass::Truck => [
            uniform(rng, 6.5, 9.0),
            uniform(rng, 2.3, 2.6),
            uniform(rng, 2.8, 3.5),
        ],
        ObjectClass::Pedestrian => {
            let d = uniform(rng, 0.5, 0.8);
            [d, d, uniform(rng, 1.5, 1.9)]
        }
        ObjectClass::Barrier => [uniform(rng, 1.5, 2.5), 0.4, 1.0],
        ObjectClass::Other => {
            let d = uniform(rng, 0.8, 1.5);
            [d, d, 1.0]
        }
    }
}

fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Polygon {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

fn side(rng: &mut SplitMix64) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Picks an index according to `weights`.
fn pick(rng: &mut SplitMix64, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = uniform(rng, 0.0, total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

struct Layouted {
    ego: Motion,
    map: MapLayers,
    /// Agents that must be present regardless of the sampled count.
    fixed: Vec<AgentPlan>,
}

const LANE: f64 = 3.5;
const ROAD_HALF: f64 = 5.25;
const PARKED_Y: f64 = 6.4;

fn straight_road(rng: &mut SplitMix64, cfg: &GenConfig) -> Layouted {
    let v = uniform(rng, cfg.speed_range[0], cfg.speed_range[1]);
    let brake_at = uniform(rng, 2.0, 14.0);
    let decel = uniform(rng, 2.5, 5.0);
    let resume_at = if rng.random::<f64>() < 0.5 {
        f64::INFINITY
    } else {
        brake_at + v / decel + uniform(rng, 1.0, 4.0)
    };
    let lead_profile = Profile::StopAndGo {
        speed: v,
        brake_at,
        decel,
        resume_at,
        accel: uniform(rng, 1.5, 2.5),
    };
    let standstill_gap = uniform(rng, 7.0, 10.0);
    let lead = AgentPlan {
        class: ObjectClass::Car,
        dims: dims_for(rng, ObjectClass::Car),
        motion: Motion {
            path: PathSpec::straight(Pose2D::new(standstill_gap, 0.0, 0.0)),
            profile: lead_profile.clone(),
        },
    };
    let ego = Motion {
        path: PathSpec::straight(Pose2D::IDENTITY),
        profile: Profile::Delayed {
            inner: Box::new(lead_profile),
            delay: uniform(rng, 0.8, 1.4),
        },
    };
    let xc = uniform(rng, 60.0, 200.0);
    let map = MapLayers {
        ped_crossing: vec![rect(xc, xc + 4.0, -7.5, 7.5)],
        walkway: vec![
            rect(-100.0, 400.0, 7.5, 10.5),
            rect(-100.0, 400.0, -10.5, -7.5),
        ],
        carpark_area: vec![],
    };
    Layouted {
        ego,
        map,
        fixed: vec![lead],
    }
}

fn straight_road_agent(rng: &mut SplitMix64, cfg: &GenConfig) -> AgentPlan {
    let v = uniform(rng, cfg.speed_range[0], cfg.speed_range[1]);
    match pick(rng, &[0.35, 0.2, 0.2, 0.1, 0.05, 0.1]) {
        0 => {
            let s = side(rng);
            let yaw = if rng.random::<bool>() { 0.0 } else { PI };
            plan(
                ObjectClass::Car,
                Motion::parked(Pose2D::new(uniform(rng, -20.0, 120.0), s * PARKED_Y, yaw)),
                rng,
            )
        }
        1 => plan(
            ObjectClass::Car,
            Motion::constant(
                Pose2D::new(uniform(rng, -20.0, 80.0), -LANE, 0.0),
                v * uniform(rng, 0.8, 1.1),
            ),
            rng,
        ),
        2 => plan(
            ObjectClass::Car,
            Motion::constant(Pose2D::new(uniform(rng, 20.0, 250.0), LANE, PI), v),
            rng,
        ),
        3 => {
            let s = side(rng);
            let yaw = if rng.random::<bool>() { 0.0 } else { PI };
            let speed = uniform(rng, 1.0, 1.6);
            plan(
                ObjectClass::Pedestrian,
                Motion::constant(Pose2D::new(uniform(rng, -20.0, 100.0), s * 9.0, yaw), speed),
                rng,
            )
        }
        4 => {
            let s = side(rng);
            plan(
                ObjectClass::Barrier,
                Motion::parked(Pose2D::new(uniform(rng, -10.0, 100.0), s * 8.0, 0.0)),
                rng,
            )
        }
        _ => {
            if rng.random::<bool>() {
                plan(
                    ObjectClass::Truck,
                    Motion::constant(Pose2D::new(uniform(rng, -20.0, 80.0), -LANE, 0.0), 0.9 * v),
                    rng,
                )
            } else {
                plan(
                    ObjectClass::Truck,
                    Motion::constant(Pose2D::new(uniform(rng, 20.0, 250.0), LANE, PI), 0.9 * v),
                    rng,
                )
            }
        }
    }
}

fn plan(class: ObjectClass, motion: Motion, rng: &mut SplitMix64) -> AgentPlan {
    AgentPlan {
        class,
        dims: dims_for(rng, class),
        motion,
    }
}

fn intersection(rng: &mut SplitMix64, cfg: &GenConfig) -> (Layouted, f64) {
    let v = 0.7 * uniform(rng, cfg.speed_range[0], cfg.speed_range[1]);
    let stops = rng.random::<f64>() < 0.5;
    let decel = uniform(rng, 2.0, 3.5);
    let mut xj = uniform(rng, 30.0, 50.0);
    let mut fixed = Vec::new();
    let profile = if stops {
        // stop line 12 m before the junction center, just short of the crosswalk
        let mut brake_at = (xj - 12.0 - v * v / (2.0 * decel)) / v;
        if brake_at < 1.0 {
            brake_at = 1.0;
            xj = v * brake_at + v * v / (2.0 * decel) + 12.0;
        }
        let stopped_at = brake_at + v / decel;
        let ped_speed = uniform(rng, 1.2, 1.6);
        let s = side(rng);
        let ped_start = stopped_at - uniform(rng, 0.0, 1.5);
        // ego resumes once the pedestrian has cleared its lane
        let resume_at = ped_start + (7.0 + 2.5) / ped_speed + uniform(rng, 0.5, 1.5);
        fixed.push(plan(
            ObjectClass::Pedestrian,
            Motion {
                path: PathSpec::straight(Pose2D::new(xj - 8.0, -7.0 * s, s * FRAC_PI_2)),
                profile: Profile::Constant {
                    speed: ped_speed,
                    delay: ped_start,
                },
            },
            rng,
        ));
        Profile::StopAndGo {
            speed: v,
            brake_at,
            decel,
            resume_at,
            accel: uniform(rng, 1.0, 2.0),
        }
    } else {
        Profile::Constant {
            speed: v,
            delay: 0.0,
        }
    };
    let path = match pick(rng, &[1.0, 1.0, 1.0]) {
        0 => PathSpec::straight(Pose2D::IDENTITY),
        1 => {
            let r = uniform(rng, 7.0, 9.0);
            PathSpec {
                start: Pose2D::IDENTITY,
                straight: xj + 1.75 - r,
                curvature: 1.0 / r,
                turn: FRAC_PI_2,
            }
        }
        _ => {
            let r = uniform(rng, 5.0, 7.0);
            PathSpec {
                start: Pose2D::IDENTITY,
                straight: xj - 1.75 - r,
                curvature: 1.0 / r,
                turn: -FRAC_PI_2,
            }
        }
    };
    let h = ROAD_HALF;
    let map = MapLayers {
        ped_crossing: vec![
            rect(xj - 9.5, xj - 6.5, -h, h),
            rect(xj + 6.5, xj + 9.5, -h, h),
            rect(xj - h, xj + h, 6.5, 9.5),
            rect(xj - h, xj + h, -9.5, -6.5),
        ],
        walkway: vec![
            rect(-60.0, xj - h - 1.0, h + 2.0, h + 5.0),
            rect(-60.0, xj - h - 1.0, -h - 5.0, -h - 2.0),
            rect(xj + h + 1.0, xj + 120.0, h + 2.0, h + 5.0),
            rect(xj + h + 1.0, xj + 120.0, -h - 5.0, -h - 2.0),
            rect(xj + h + 2.0, xj + h + 5.0, h + 10.0, 120.0),
            rect(xj - h - 5.0, xj - h - 2.0, h + 10.0, 120.0),
            rect(xj + h + 2.0, xj + h + 5.0, -120.0, -h - 10.0),
            rect(xj - h - 5.0, xj - h - 2.0, -120.0, -h - 10.0),
        ],
        carpark_area: vec![],
    };
    (
        Layouted {
            ego: Motion { path, profile },
            map,
            fixed,
        },
        xj,
    )
}

fn intersection_agent(rng: &mut SplitMix64, cfg: &GenConfig, xj: f64) -> AgentPlan {
    let v = 0.7 * uniform(rng, cfg.speed_range[0], cfg.speed_range[1]);
    match pick(rng, &[0.3, 0.2, 0.25, 0.15, 0.1]) {
        0 => {
            // cross traffic, right-hand lanes of the crossing road
            let s = side(rng);
            let x = xj + s * 1.75;
            let y0 = -s * uniform(rng, 20.0, 80.0);
            plan(
                ObjectClass::Car,
                Motion::constant(
                    Pose2D::new(x, y0, s * FRAC_PI_2),
                    v * uniform(rng, 0.6, 1.0),
                ),
                rng,
            )
        }
        1 => plan(
            ObjectClass::Car,
            Motion::constant(
                Pose2D::new(uniform(rng, xj + 10.0, xj + 100.0), LANE, PI),
                v,
            ),
            rng,
        ),
        2 => {
            let s = side(rng);
            let x = if rng.random::<bool>() {
                uniform(rng, -30.0, xj - 14.0)
            } else {
                uniform(rng, xj + 12.0, xj + 80.0)
            };
            plan(
                ObjectClass::Car,
                Motion::parked(Pose2D::new(x, s * PARKED_Y, 0.0)),
                rng,
            )
        }
        3 => {
            let s = side(rng);
            let yaw = if rng.random::<bool>() { 0.0 } else { PI };
            let speed = uniform(rng, 1.0, 1.6);
            plan(
                ObjectClass::Pedestrian,
                Motion::constant(
                    Pose2D::new(uniform(rng, -40.0, xj + 60.0), s * (ROAD_HALF + 3.5), yaw),
                    speed,
                ),
                rng,
            )
        }
        _ => {
            let s = side(rng);
            plan(
                ObjectClass::Barrier,
                Motion::parked(Pose2D::new(
                    xj + s * 8.0,
                    uniform(rng, 12.0, 40.0),
                    FRAC_PI_2,
                )),
                rng,
            )
        }
    }
}

const PARKING_ROW_Y: f64 = 7.0;

fn parking_lot(rng: &mut SplitMix64, cfg: &GenConfig) -> Layouted {
    let v = 0.3 * uniform(rng, cfg.speed_range[0], cfg.speed_range[1]);
    let mut fixed = Vec::new();
    let profile = if rng.random::<f64>() < 0.6 {
        let brake_at = uniform(rng, 1.0, 10.0);
        let decel = uniform(rng, 1.5, 2.5);
        let stop_s = v * brake_at + v * v / (2.0 * decel);
        let stopped_at = brake_at + v / decel;
        let ped_speed = uniform(rng, 1.0, 1.4);
        let s = side(rng);
        let ped_start = stopped_at - 1.0;
        fixed.push(plan(
            ObjectClass::Pedestrian,
            Motion {
                path: PathSpec::straight(Pose2D::new(stop_s + 5.5, -4.5 * s, s * FRAC_PI_2)),
                profile: Profile::Constant {
                    speed: ped_speed,
                    delay: ped_start,
                },
            },
            rng,
        ));
        Profile::StopAndGo {
            speed: v,
            brake_at,
            decel,
            resume_at: ped_start + 6.0 / ped_speed + uniform(rng, 0.5, 1.5),
            accel: uniform(rng, 0.8, 1.5),
        }
    } else {
        Profile::Constant {
            speed: v,
            delay: 0.0,
        }
    };
    let map = MapLayers {
        ped_crossing: vec![],
        walkway: vec![
            rect(-15.0, 90.0, 25.0, 28.0),
            rect(-15.0, 90.0, -28.0, -25.0),
        ],
        carpark_area: vec![rect(-15.0, 90.0, -25.0, 25.0)],
    };
    Layouted {
        ego: Motion {
            path: PathSpec::straight(Pose2D::IDENTITY),
            profile,
        },
        map,
        fixed,
    }
}

fn parking_agent(rng: &mut SplitMix64, cfg: &GenConfig) -> AgentPlan {
    match pick(rng, &[0.6, 0.2, 0.1, 0.1]) {
        0 => {
            let slot = rng.random_range(0..32) as f64;
            let s = side(rng);
            let yaw = if rng.random::<bool>() {
                FRAC_PI_2
            } else {
                -FRAC_PI_2
            };
            plan(
                ObjectClass::Car,
                Motion::parked(Pose2D::new(-10.0 + 3.0 * slot, s * PARKING_ROW_Y, yaw)),
                rng,
            )
        }
        1 => {
            let s = side(rng);
            let speed = uniform(rng, 0.8, 1.5);
            plan(
                ObjectClass::Pedestrian,
                Motion {
                    path: PathSpec::straight(Pose2D::new(
                        uniform(rng, 5.0, 80.0),
                        -s * 4.0,
                        s * FRAC_PI_2,
                    )),
                    profile: Profile::Constant {
                        speed,
                        delay: uniform(rng, 0.0, 15.0),
                    },
                },
                rng,
            )
        }
        2 => {
            let v = 0.3 * uniform(rng, cfg.speed_range[0], cfg.speed_range[1]);
            plan(
                ObjectClass::Car,
                Motion::constant(Pose2D::new(uniform(rng, 30.0, 90.0), 2.2, PI), v),
                rng,
            )
        }
        _ => plan(
            ObjectClass::Other,
            Motion::parked(Pose2D::new(
                uniform(rng, -10.0, 85.0),
                side(rng) * 11.0,
                0.0,
            )),
            rng,
        ),
    }
}

fn spawn_ok(candidate: &AgentPlan, placed: &[AgentPlan], ego: &Pose2D) -> bool {
    let p = candidate.motion.pose(0.0);
    let [l, w, _] = candidate.dims;
    if rect_separation(&p, l, w, ego, EGO_LENGTH, EGO_WIDTH) < 1.0 {
        return false;
    }
    placed.iter().all(|o| {
        let q = o.motion.pose(0.0);
        rect_separation(&p, l, w, &q, o.dims[0], o.dims[1]) >= 1.0
    })
}

const MAX_SPAWN_ATTEMPTS: usize = 50;

/// One scene from its own seed.
pub fn generate_scene(cfg: &GenConfig, index: usize, seed: u64, layout: Layout) -> Scene {
    let mut rng = seeded(seed);
    let (lay, xj) = match layout {
        Layout::StraightRoad => (straight_road(&mut rng, cfg), 0.0),
        Layout::Intersection => intersection(&mut rng, cfg),
        Layout::ParkingLot => (parking_lot(&mut rng, cfg), 0.0),
    };
    let ego0 = lay.ego.pose(0.0);
    let [lo, hi] = cfg.n_agents_range;
    let n_agents = rng.random_range(lo..=hi);
    let mut placed: Vec<AgentPlan> = Vec::new();
    for a in lay.fixed {
        // the lead vehicle of a straight road is kept even when the draw is 0
        let keep = if layout == Layout::StraightRoad {
            n_agents.max(1)
        } else {
            n_agents
        };
        if placed.len() < keep {
            placed.push(a);
        }
    }
    while placed.len() < n_agents {
        let mut ok = false;
        for _ in 0..MAX_SPAWN_ATTEMPTS {
            let cand = match layout {
                Layout::StraightRoad => straight_road_agent(&mut rng, cfg),
                Layout::Intersection => intersection_agent(&mut rng, cfg, xj),
                Layout::ParkingLot => parking_agent(&mut rng, cfg),
            };
            if spawn_ok(&cand, &placed, &ego0) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            break;
        }
    }

    // random world placement
    let world = Pose2D::new(
        uniform(&mut rng, -1000.0, 1000.0),
        uniform(&mut rng, -1000.0, 1000.0),
        uniform(&mut rng, -PI, PI),
    );
    let rot = |v: [f64; 2]| -> [f64; 2] {
        let (s, c) = world.yaw.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    };

    let period = cfg.keyframe_period;
    let n_key = (cfg.duration / period).round() as usize;
    let ego_step = period / 2.0;
    let ego_trajectory = (0..=2 * n_key)
        .map(|i| {
            let t = i as f64 * ego_step;
            (t, world.compose(&lay.ego.pose(t)))
        })
        .collect();
    let agents = placed
        .iter()
        .enumerate()
        .map(|(i, a)| AgentTrack {
            track_id: (i + 1) as u64,
            class: a.class,
            frames: (0..=n_key)
                .map(|k| {
                    let t = k as f64 * period;
                    TrackFrame {
                        t,
                        pose: world.compose(&a.motion.pose(t)),
                        length: a.dims[0],
                        width: a.dims[1],
                        height: a.dims[2],
                        velocity: rot(a.motion.velocity(t)),
                    }
                })
                .collect(),
        })
        .collect();
    let map_world = |layer: &[Polygon]| -> Vec<Polygon> {
        layer
            .iter()
            .map(|poly| poly.iter().map(|p| world.transform_point(*p)).collect())
            .collect()
    };
    Scene {
        scene_id: format!("scene_{index:04}"),
        keyframe_period: period,
        ego_trajectory,
        agents,
        map: MapLayers {
            ped_crossing: map_world(&lay.map.ped_crossing),
            walkway: map_world(&lay.map.walkway),
            carpark_area: map_world(&lay.map.carpark_area),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub file: String,
    pub seed: u64,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub config: GenConfig,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub seed: u64,
    pub layout: Layout,
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<GeneratedScene>> {
    cfg.validate()?;
    Ok((0..cfg.n_scenes)
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            let layout = cfg.layout.layout_for(i);
            GeneratedScene {
                scene: generate_scene(cfg, i, seed, layout),
                seed,
                layout,
            }
        })
        .collect())
}

/// Writes `scene_<index>.json` files plus `manifest.json` into `dir`.
pub fn write_dataset(
    cfg: &GenConfig,
    scenes: &[GeneratedScene],
    dir: impl AsRef<FsPath>,
) -> Result<GenManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for g in scenes {
        let file = format!("{}.json", g.scene.scene_id);
        save_scene(&g.scene, dir.join(&file))?;
        entries.push(ManifestEntry {
            scene_id: g.scene.scene_id.clone(),
            file,
            seed: g.seed,
            layout: g.layout,
        });
    }
    let manifest = GenManifest {
        config: cfg.clone(),
        scenes: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Ground truth as a detector would emit it: every agent box at every
/// keyframe, score 1, ego excluded.
pub fn perfect_detections(scene: &Scene) -> DetectionSet {
    DetectionSet {
        scene_id: scene.scene_id.clone(),
        frames: scene
            .keyframe_times()
            .into_iter()
            .map(|t| DetectionFrame {
                timestamp: t,
                boxes: scene
                    .boxes_at(t)
                    .iter()
                    .map(|b| b.to_detection(1.0))
                    .collect(),
            })
            .collect(),
    }
}
