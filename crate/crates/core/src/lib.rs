//! Online temporally consistent stereo depth estimation.
//!
//! The pipeline runs three stages per frame: a per-frame stereo estimator
//! ([`stereo`]), per-pixel SE3 motion alignment of the previous prediction
//! ([`motion`] + [`geometry`]), and cue-driven weighted fusion of the aligned
//! and current disparities ([`fusion`]). A deterministic synthetic scene
//! generator ([`sim`]) supplies exact ground truth, [`metrics`] scores
//! temporal consistency and per-pixel accuracy, and [`harness`] wires
//! everything into reproducible experiments.

pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod sim;
pub mod stereo;

mod grid;

pub use fusion::{CueStack, KalmanState, LogisticWeightModel, WeightMaps};
pub use geometry::{CameraRig, MemoryState, Se3, Se3Field};
pub use harness::{ExperimentConfig, Method, SuiteOutcome};
pub use losses::LossConfig;
pub use metrics::MetricReport;
pub use motion::{MotionEstimate, MotionMode};
pub use sim::{NoiseModel, Scene, SceneConfig, SceneSample};
pub use stereo::{FeatureMap, StereoResult};
