//! Planner-centric evaluation of 3D object detections.
//!
//! The crate trains a small birds-eye-view trajectory-forecasting network on
//! driving scenes and scores detector output by the KL divergence it induces
//! between the planner's future-position distributions under ground-truth and
//! submitted detections (PKL). Classical mAP/NDS baselines, synthetic noise
//! models and the sensitivity harnesses built on top of both live alongside.

pub mod analysis;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod noise;
pub mod pkl;
pub mod planner;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::Pose2D;
pub use scene::{AgentBox, AgentTrack, Detection, DetectionFrame, MapLayers, ObjectClass, Scene};
