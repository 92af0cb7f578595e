//! Experiment runner: builds synthetic scenes, drives the online pipeline
//! per fusion method, trains the weight model, and writes artifacts.
//!
//! A config describes a suite of sequences derived from consecutive scene
//! seeds. Seeds divisible by 5 form the test partition; the rest are used
//! for weight-model training and Kalman variance calibration, so evaluation
//! scenes are never seen during training. Within a sequence, frames are
//! processed strictly in order (the provider rejects out-of-order access);
//! sequences may run in parallel, capped by `TEMPOFUSE_THREADS`.

use crate::fusion::{
    self, build_cues, empirical_best, fuse, kalman_update, predict_weights, FusionError,
    KalmanState, LogisticWeightModel, TrainRecord,
};
use crate::geometry::{CameraRig, GeometryError, MemoryState, Se3Field};
use crate::io::IoError;
use crate::losses::LossConfig;
use crate::metrics::{
    aggregate, epe, fepe_optical, fepe_scene, tepe, trace, FrameMetrics, MetricReport,
    MetricsError, VALID_DISPARITY_MAX, VALID_DISPARITY_MIN,
};
use crate::motion::{
    align_previous, estimate_field, FrameObs, MotionError, MotionEstimate, MotionMode,
    MotionParams, OracleMotion,
};
use crate::sim::{
    build_scene, perturb_disparity, MotionSpec, NoiseModel, ObjectKind, ObjectSpec, Scene,
    SceneConfig, SceneSample, SimError,
};
use crate::stereo::{block_match, extract_features, StereoError, StereoResult};
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad configuration; the CLI maps this to exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Numeric or pipeline failure; the CLI maps this to exit code 3.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<IoError> for HarnessError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io(io) => HarnessError::Io(io),
            other => HarnessError::Numeric(other.to_string()),
        }
    }
}

macro_rules! numeric_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for HarnessError {
            fn from(e: $ty) -> Self {
                HarnessError::Numeric(e.to_string())
            }
        }
    )*};
}
numeric_from!(SimError, MotionError, FusionError, MetricsError, StereoError, GeometryError);

/// Exit code the CLI should use for an error.
pub fn exit_code(err: &HarnessError) -> i32 {
    match err {
        HarnessError::Config(_) => 2,
        _ => 3,
    }
}

/// Worker cap from `TEMPOFUSE_THREADS`; `None` leaves the default.
pub fn thread_cap() -> Result<Option<usize>, HarnessError> {
    match std::env::var("TEMPOFUSE_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                HarnessError::Config(format!("TEMPOFUSE_THREADS must be a positive integer, got {v:?}"))
            })?;
            if n == 0 {
                return Err(HarnessError::Config(
                    "TEMPOFUSE_THREADS must be >= 1".into(),
                ));
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Raw stereo stream, no temporal state.
    PerFrame,
    /// Previous stereo output warped forward; holes fall back to stereo.
    MotionOnly,
    /// Per-pixel scalar Kalman filter over disparity.
    Kalman,
    /// Logistic weight model driving the convex fusion.
    Learned,
    /// Ground-truth pointwise best of stereo and warped stereo.
    EmpiricalBest,
}

impl Method {
    pub fn all() -> [Method; 5] {
        [
            Method::PerFrame,
            Method::MotionOnly,
            Method::Kalman,
            Method::Learned,
            Method::EmpiricalBest,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::PerFrame => "per_frame",
            Method::MotionOnly => "motion_only",
            Method::Kalman => "kalman",
            Method::Learned => "learned",
            Method::EmpiricalBest => "empirical_best",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub background_depth: f64,
    pub frames: usize,
    pub sequences: usize,
    /// Moving objects per scene; geometry and motion are randomized from
    /// the scene seed.
    pub objects: usize,
    /// Camera speed scale, meters per frame.
    pub camera_speed: f64,
    /// Object speed scale, meters per frame.
    pub object_speed: f64,
    /// Rotation rate scale, radians per frame.
    pub rotation_rate: f64,
    pub texture_cell_px: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            fx: 140.0,
            fy: 140.0,
            cx: 79.5,
            cy: 59.5,
            baseline: 0.25,
            background_depth: 6.0,
            frames: 30,
            sequences: 10,
            objects: 2,
            camera_speed: 0.02,
            object_speed: 0.03,
            rotation_rate: 0.004,
            texture_cell_px: 8.0,
        }
    }
}

impl SceneParams {
    pub fn rig(&self) -> Result<CameraRig, HarnessError> {
        CameraRig::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.baseline,
            self.width,
            self.height,
        )
        .map_err(|e| HarnessError::Config(format!("scene: {e}")))
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    pub jitter_sigma: f64,
    pub outlier_rate: f64,
    pub outlier_magnitude: f64,
    pub edge_bias: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.5,
            outlier_rate: 0.01,
            outlier_magnitude: 8.0,
            edge_bias: 0.0,
        }
    }
}

impl NoiseParams {
    fn model(&self, seed: u64) -> NoiseModel {
        NoiseModel {
            jitter_sigma: self.jitter_sigma,
            outlier_rate: self.outlier_rate,
            outlier_magnitude: self.outlier_magnitude,
            edge_bias: self.edge_bias,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StereoSource {
    /// Census block matching on the rendered image pair.
    BlockMatch,
    /// Ground-truth disparity corrupted by the noise model.
    NoisyOracle,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StereoParams {
    pub source: StereoSource,
    pub max_disparity: usize,
}

impl Default for StereoParams {
    fn default() -> Self {
        Self {
            source: StereoSource::NoisyOracle,
            max_disparity: 48,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSettings {
    pub mode: MotionMode,
    /// Gauss-Newton iteration count K.
    pub iterations: usize,
    pub search_radius: usize,
    pub stride: usize,
}

impl Default for MotionSettings {
    fn default() -> Self {
        Self {
            mode: MotionMode::PerObjectRigid,
            iterations: 16,
            search_radius: 8,
            stride: 4,
        }
    }
}

impl MotionSettings {
    fn params(&self) -> MotionParams {
        MotionParams {
            iterations: self.iterations,
            search_radius: self.search_radius,
            stride: self.stride,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSettings {
    pub methods: Vec<Method>,
    /// Kalman process noise added at each prediction.
    pub process_noise: f64,
    /// Pretrained weights for the learned method; trained in-run if unset.
    pub model_path: Option<PathBuf>,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            methods: vec![Method::PerFrame, Method::Kalman, Method::Learned],
            process_noise: 0.25,
            model_path: None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_scale: f64,
    pub seed: u64,
    /// Pixel subsampling stride when flattening frames into records.
    pub pixel_stride: usize,
    /// Frames per training window (the online prefix run per train scene).
    pub window_frames: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1.0,
            init_scale: 0.05,
            seed: 7,
            pixel_stride: 2,
            window_frames: 2,
        }
    }
}

impl TrainSettings {
    fn hyper(&self, loss: LossConfig) -> fusion::TrainConfig {
        fusion::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            init_scale: self.init_scale,
            seed: self.seed,
            loss,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base scene seed; sequence i uses seed + i.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub scene: SceneParams,
    pub noise: NoiseParams,
    pub stereo: StereoParams,
    pub motion: MotionSettings,
    pub fusion: FusionSettings,
    pub loss: LossConfig,
    pub training: TrainSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 40,
            out_dir: None,
            scene: SceneParams::default(),
            noise: NoiseParams::default(),
            stereo: StereoParams::default(),
            motion: MotionSettings::default(),
            fusion: FusionSettings::default(),
            loss: LossConfig::default(),
            training: TrainSettings::default(),
        }
    }
}

fn seed_is_test(seed: u64) -> bool {
    seed.is_multiple_of(5)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |s: String| Err(HarnessError::Config(s));
        if !(1..=16).contains(&self.motion.iterations) {
            return err(format!(
                "motion.iterations must be in 1..=16, got {}",
                self.motion.iterations
            ));
        }
        if self.fusion.methods.is_empty() {
            return err("fusion.methods must name at least one method".into());
        }
        if self.scene.sequences == 0 {
            return err("scene.sequences must be >= 1".into());
        }
        if self.scene.frames < 2 {
            return err(format!("scene.frames must be >= 2, got {}", self.scene.frames));
        }
        if self.training.window_frames < 2 || self.training.window_frames > self.scene.frames {
            return err(format!(
                "training.window_frames must be in 2..=frames, got {}",
                self.training.window_frames
            ));
        }
        self.scene.rig()?;
        self.loss
            .validate()
            .map_err(|e| HarnessError::Config(format!("loss: {e}")))?;
        if self.test_seeds().is_empty() {
            return err(format!(
                "no evaluation sequence: none of the seeds {}..{} is divisible by 5",
                self.seed,
                self.seed + self.scene.sequences as u64 - 1
            ));
        }
        Ok(())
    }

    pub fn scene_seeds(&self) -> Vec<u64> {
        (0..self.scene.sequences as u64).map(|i| self.seed + i).collect()
    }

    /// Seeds divisible by 5; evaluation runs on these.
    pub fn test_seeds(&self) -> Vec<u64> {
        self.scene_seeds().into_iter().filter(|&s| seed_is_test(s)).collect()
    }

    /// The remaining seeds; training and calibration use these.
    pub fn train_seeds(&self) -> Vec<u64> {
        self.scene_seeds().into_iter().filter(|&s| !seed_is_test(s)).collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full echo of every field, suitable for re-running.
    pub fn echo_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_toml_str(&text)
        .map_err(|e| match e {
            HarnessError::Config(msg) => {
                HarnessError::Config(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
}

/// Deterministic per-scene randomization of object layout and motion.
fn make_scene(cfg: &ExperimentConfig, scene_seed: u64) -> Result<SceneConfig, HarnessError> {
    let rig = cfg.scene.rig()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let mut sc = SceneConfig::basic(rig, cfg.scene.background_depth, cfg.scene.frames);
    sc.texture_seed = scene_seed.wrapping_add(101);
    sc.texture_cell_px = cfg.scene.texture_cell_px;

    let unit = |rng: &mut ChaCha8Rng, z_damp: f64| {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0) * z_damp,
        );
        if v.norm() < 1e-6 {
            Vector3::x()
        } else {
            v.normalize()
        }
    };

    sc.camera = MotionSpec {
        velocity: unit(&mut rng, 0.4) * cfg.scene.camera_speed,
        rotation_axis: unit(&mut rng, 1.0),
        rotation_rate: rng.gen_range(-1.0..1.0) * cfg.scene.rotation_rate,
    };

    for k in 0..cfg.scene.objects {
        let z = rng.gen_range(2.4..4.2);
        let spread_x = 0.45 * z * (cfg.scene.width as f64 / cfg.scene.fx);
        let spread_y = 0.45 * z * (cfg.scene.height as f64 / cfg.scene.fy);
        let center = Vector3::new(
            rng.gen_range(-spread_x..spread_x),
            rng.gen_range(-spread_y..spread_y),
            z,
        );
        let kind = if k % 2 == 0 {
            ObjectKind::Sphere {
                radius: rng.gen_range(0.3..0.55),
            }
        } else {
            ObjectKind::Plane {
                half_width: rng.gen_range(0.4..0.7),
                half_height: rng.gen_range(0.3..0.6),
            }
        };
        sc.objects.push(ObjectSpec {
            kind,
            center,
            motion: MotionSpec {
                velocity: unit(&mut rng, 0.3) * cfg.scene.object_speed,
                rotation_axis: unit(&mut rng, 1.0),
                rotation_rate: rng.gen_range(-1.0..1.0) * cfg.scene.rotation_rate * 2.0,
            },
        });
    }
    Ok(sc)
}

/// Sequential access to a scene's frames; rejects out-of-order reads so the
/// online contract is enforced structurally.
pub struct FrameProvider {
    scene: Scene,
    cursor: usize,
}

impl FrameProvider {
    pub fn new(scene: Scene) -> Self {
        Self { scene, cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.scene.length()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Render frame `t`; fails unless `t` is exactly the next frame.
    pub fn fetch(&mut self, t: usize) -> Result<SceneSample, HarnessError> {
        if t != self.cursor {
            return Err(HarnessError::Numeric(format!(
                "online contract violated: requested frame {t}, expected {}",
                self.cursor
            )));
        }
        let sample = self.scene.render_sample(t)?;
        self.cursor += 1;
        Ok(sample)
    }
}

fn mix_seed(scene_seed: u64, t: usize) -> u64 {
    crate::grid::mix64(scene_seed ^ (t as u64).wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Stereo front end for one frame: block matching or the noisy oracle.
fn stereo_for(
    cfg: &ExperimentConfig,
    sample: &SceneSample,
    frame_seed: u64,
) -> Result<StereoResult, HarnessError> {
    match cfg.stereo.source {
        StereoSource::BlockMatch => {
            Ok(block_match(&sample.left, &sample.right, cfg.stereo.max_disparity)?)
        }
        StereoSource::NoisyOracle => {
            let noisy = perturb_disparity(&sample.gt_disparity, &cfg.noise.model(frame_seed));
            // Geometry needs positive disparity; gross outliers may have
            // pushed past zero, so clamp and mark those pixels invalid.
            let disparity = noisy.mapv(|d| d.clamp(0.1, VALID_DISPARITY_MAX + 5.0));
            let valid = disparity.mapv(|d| (VALID_DISPARITY_MIN..=VALID_DISPARITY_MAX).contains(&d));
            Ok(StereoResult {
                disparity,
                left_features: extract_features(&sample.left),
                right_features: extract_features(&sample.right),
                valid,
            })
        }
    }
}

fn window_valid(map: &Array2<f64>) -> Array2<bool> {
    map.mapv(|d| (VALID_DISPARITY_MIN..=VALID_DISPARITY_MAX).contains(&d))
}

/// d_M with splat holes replaced by the stereo value (Eq. (3) substitution).
fn fill_holes(aligned: &MemoryState, d_s: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(d_s.dim(), |idx| {
        if aligned.visibility[idx] {
            aligned.disparity[idx]
        } else {
            d_s[idx]
        }
    })
}

fn state_from_stereo(stereo: &StereoResult, first_frame: bool) -> MemoryState {
    let mut st = stereo.to_memory_state();
    if first_frame {
        // No history yet; nothing counts as temporally visible.
        st.visibility.fill(false);
    }
    st
}

fn fused_state(disparity: &Array2<f64>, stereo: &StereoResult) -> MemoryState {
    let (h, w) = disparity.dim();
    let mut st = MemoryState::empty(h, w, stereo.left_features.data.dim().2);
    st.disparity = disparity.clone();
    st.features = stereo.left_features.data.clone();
    st.valid = window_valid(disparity);
    st.visibility.fill(true);
    st
}

/// Kalman posterior packed for warping: the mean rides in `disparity`, the
/// variance in feature channel 0.
fn kalman_memory(state: &KalmanState) -> MemoryState {
    let (h, w) = state.mean.dim();
    let mut st = MemoryState::empty(h, w, 1);
    st.disparity = state.mean.clone();
    st.features
        .index_axis_mut(ndarray::Axis(2), 0)
        .assign(&state.variance);
    st.valid = window_valid(&state.mean);
    st.visibility.fill(true);
    st
}

fn variance_map(calib: (f64, f64), stereo_conf_center: &Array2<f64>) -> Array2<f64> {
    stereo_conf_center.mapv(|c| fusion::measurement_variance(calib, c))
}

fn stereo_conf_center(stereo: &StereoResult) -> Array2<f64> {
    let conf = crate::stereo::disparity_confidence(
        &stereo.left_features,
        &stereo.right_features,
        &stereo.disparity,
    );
    conf.index_axis(ndarray::Axis(2), 1).to_owned()
}

/// Scene-flow fields (pred, gt) of the transition on the t-1 grid.
fn scene_flow_fields(
    est_field: &Se3Field,
    gt_field: &Se3Field,
    d_gt_prev: &Array2<f64>,
    rig: &CameraRig,
) -> (Array3<f64>, Array3<f64>) {
    let (h, w) = d_gt_prev.dim();
    let mut pred = Array3::zeros((h, w, 3));
    let mut gt = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let d = d_gt_prev[(i, j)];
            let p = match crate::geometry::lift(j as f64, i as f64, d, rig) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let dp = est_field.get(i, j).apply(&p) - p;
            let dg = gt_field.get(i, j).apply(&p) - p;
            for c in 0..3 {
                pred[(i, j, c)] = dp[c];
                gt[(i, j, c)] = dg[c];
            }
        }
    }
    (pred, gt)
}

#[allow(clippy::too_many_arguments)]
fn eval_frame(
    t: usize,
    output: &Array2<f64>,
    prev_output: Option<&Array2<f64>>,
    sample: &SceneSample,
    prev_sample: Option<&SceneSample>,
    estimate: Option<&MotionEstimate>,
    rig: &CameraRig,
) -> Result<FrameMetrics, HarnessError> {
    let mut m = FrameMetrics {
        frame: t,
        ..Default::default()
    };
    let (e, d3) = epe(output, &sample.gt_disparity, &sample.valid)?;
    m.epe = e;
    m.d3px = d3;
    m.pixel_count = sample.valid.iter().filter(|&&v| v).count();

    if let (Some(prev_out), Some(prev), Some(est)) = (prev_output, prev_sample, estimate) {
        let pairs = trace(
            &sample.gt_flow,
            prev_out,
            output,
            &prev.gt_disparity,
            &sample.gt_disparity,
        );
        if !pairs.is_empty() {
            let (te, t3, tr, tr1) = tepe(&pairs)?;
            m.tepe = te;
            m.tepe_3px = t3;
            m.tepe_r = tr;
            m.tepe_r_100pct = tr1;
            m.pair_count = pairs.len();
        }
        let flow_mask = &prev.valid;
        if flow_mask.iter().any(|&v| v) {
            let (fo, fo1) = fepe_optical(&est.flow, &sample.gt_flow, flow_mask)?;
            let (sf_pred, sf_gt) =
                scene_flow_fields(&est.field, &sample.gt_se3_field, &prev.gt_disparity, rig);
            let (sm, spx, s1) =
                fepe_scene(&sf_pred, &sf_gt, &prev.gt_disparity, rig, flow_mask)?;
            m.fepe_of = fo;
            m.fepe_of_1px = fo1;
            m.fepe_sf_m = sm;
            m.fepe_sf_px = spx;
            m.fepe_sf_1px = s1;
            m.flow_count = flow_mask.iter().filter(|&&v| v).count();
        }
    }
    Ok(m)
}

struct SequenceOutput {
    seed: u64,
    frames: BTreeMap<Method, Vec<FrameMetrics>>,
}

/// Run the online pipeline on one evaluation sequence, producing per-frame
/// metrics for every requested method and, optionally, PFM artifacts.
fn run_sequence(
    cfg: &ExperimentConfig,
    scene_seed: u64,
    model: Option<&LogisticWeightModel>,
    calibration: Option<(f64, f64)>,
    out_dir: Option<&Path>,
) -> Result<SequenceOutput, HarnessError> {
    let rig = cfg.scene.rig()?;
    let scene = build_scene(make_scene(cfg, scene_seed)?)?;
    let mut provider = FrameProvider::new(scene);
    let methods = &cfg.fusion.methods;

    let seq_dir = out_dir.map(|d| d.join(format!("seq_{scene_seed}")));
    if let Some(dir) = &seq_dir {
        std::fs::create_dir_all(dir.join("gt"))?;
        std::fs::create_dir_all(dir.join("motion"))?;
        for m in methods {
            std::fs::create_dir_all(dir.join(m.name()))?;
        }
    }

    let mut states: BTreeMap<Method, MemoryState> = BTreeMap::new();
    let mut outputs: BTreeMap<Method, Array2<f64>> = BTreeMap::new();
    let mut frames: BTreeMap<Method, Vec<FrameMetrics>> = BTreeMap::new();
    let mut prev_sample: Option<SceneSample> = None;
    let mut prev_stereo: Option<StereoResult> = None;
    let mut prev_outputs: BTreeMap<Method, Array2<f64>> = BTreeMap::new();

    for t in 0..cfg.scene.frames {
        let sample = provider.fetch(t)?;
        let stereo = stereo_for(cfg, &sample, mix_seed(scene_seed, t))?;
        let d_s = &stereo.disparity;
        let mut estimate: Option<MotionEstimate> = None;

        if t == 0 {
            for &m in methods {
                outputs.insert(m, d_s.clone());
                match m {
                    Method::Kalman => {
                        let calib = calibration.ok_or_else(|| {
                            HarnessError::Config("kalman requires variance calibration".into())
                        })?;
                        let var = variance_map(calib, &stereo_conf_center(&stereo));
                        let ks = KalmanState::from_measurement(d_s, &var);
                        states.insert(m, kalman_memory(&ks));
                    }
                    _ => {
                        states.insert(m, state_from_stereo(&stereo, true));
                    }
                }
            }
        } else {
            let prev = prev_sample.as_ref().expect("previous sample retained");
            let pstereo = prev_stereo.as_ref().expect("previous stereo retained");
            let est = estimate_field(
                FrameObs {
                    image: &prev.left,
                    stereo: pstereo,
                },
                FrameObs {
                    image: &sample.left,
                    stereo: &stereo,
                },
                cfg.motion.mode,
                &rig,
                &cfg.motion.params(),
                OracleMotion {
                    field: Some(&sample.gt_se3_field),
                    labels: Some(&prev.labels),
                },
            )?;

            for &m in methods {
                let state = states.get(&m).expect("state initialized at t=0");
                let aligned = align_previous(state, &est, &rig);
                let d_m = fill_holes(&aligned, d_s);
                let (output, next_state) = match m {
                    Method::PerFrame => (d_s.clone(), state_from_stereo(&stereo, false)),
                    Method::MotionOnly => (d_m.clone(), state_from_stereo(&stereo, false)),
                    Method::EmpiricalBest => (
                        empirical_best(d_s, &d_m, &sample.gt_disparity),
                        state_from_stereo(&stereo, false),
                    ),
                    Method::Kalman => {
                        let calib = calibration.expect("calibration checked at t=0");
                        let meas_var = variance_map(calib, &stereo_conf_center(&stereo));
                        let prior = KalmanState {
                            mean: aligned.disparity.clone(),
                            variance: aligned
                                .features
                                .index_axis(ndarray::Axis(2), 0)
                                .to_owned(),
                        };
                        let (post, weight) = kalman_update(
                            &prior,
                            d_s,
                            &meas_var,
                            cfg.fusion.process_noise,
                            &aligned.visibility,
                        )?;
                        if let Some(dir) = &seq_dir {
                            crate::io::write_pfm(
                                &dir.join(m.name()).join(format!("weight_{t:03}.pfm")),
                                &weight,
                            )?;
                        }
                        let out = post.mean.clone();
                        let mem = kalman_memory(&post);
                        (out, mem)
                    }
                    Method::Learned => {
                        let model = model.ok_or_else(|| {
                            HarnessError::Config("learned method requires a weight model".into())
                        })?;
                        let cues = build_cues(&aligned, &stereo)?;
                        let maps = predict_weights(model, &cues);
                        let fused = fuse(d_s, &d_m, &maps)?;
                        if let Some(dir) = &seq_dir {
                            let md = dir.join(m.name());
                            crate::io::write_pfm(
                                &md.join(format!("w_reset_{t:03}.pfm")),
                                &maps.w_reset,
                            )?;
                            crate::io::write_pfm(
                                &md.join(format!("w_fusion_{t:03}.pfm")),
                                &maps.w_fusion,
                            )?;
                        }
                        let st = fused_state(&fused, &stereo);
                        (fused, st)
                    }
                };
                outputs.insert(m, output);
                states.insert(m, next_state);
            }

            if let Some(dir) = &seq_dir {
                crate::io::write_pfm_flow(
                    &dir.join("motion").join(format!("flow_{t:03}.pfm")),
                    &est.flow,
                )?;
            }
            estimate = Some(est);
        }

        for &m in methods {
            let out = outputs.get(&m).expect("method output present");
            let metrics = eval_frame(
                t,
                out,
                prev_outputs.get(&m),
                &sample,
                prev_sample.as_ref(),
                estimate.as_ref(),
                &rig,
            )?;
            frames.entry(m).or_default().push(metrics);
            if let Some(dir) = &seq_dir {
                crate::io::write_pfm(
                    &dir.join(m.name()).join(format!("disp_{t:03}.pfm")),
                    out,
                )?;
            }
        }

        if let Some(dir) = &seq_dir {
            let gt = dir.join("gt");
            crate::io::write_pgm(&gt.join(format!("left_{t:03}.pgm")), &sample.left)?;
            crate::io::write_pfm(&gt.join(format!("disp_{t:03}.pfm")), &sample.gt_disparity)?;
            if t > 0 {
                crate::io::write_pfm_flow(&gt.join(format!("flow_{t:03}.pfm")), &sample.gt_flow)?;
            }
        }

        prev_outputs = outputs.clone();
        prev_stereo = Some(stereo);
        prev_sample = Some(sample);
    }

    Ok(SequenceOutput {
        seed: scene_seed,
        frames,
    })
}

/// Run the online prefix of one training scene with a stereo-propagated
/// memory (the motion stream the fusion must judge), collecting training
/// records and variance-calibration pairs.
fn collect_training(
    cfg: &ExperimentConfig,
    scene_seed: u64,
    records: &mut Vec<TrainRecord>,
    calib_conf: &mut Vec<f64>,
    calib_sq: &mut Vec<f64>,
) -> Result<(), HarnessError> {
    let rig = cfg.scene.rig()?;
    let scene = build_scene(make_scene(cfg, scene_seed)?)?;
    let mut provider = FrameProvider::new(scene);
    let mut prev: Option<(SceneSample, StereoResult)> = None;

    for t in 0..cfg.training.window_frames {
        let sample = provider.fetch(t)?;
        let stereo = stereo_for(cfg, &sample, mix_seed(scene_seed, t))?;

        // Calibration pairs: squared stereo error vs confidence center.
        let conf = stereo_conf_center(&stereo);
        let (h, w) = conf.dim();
        for i in (0..h).step_by(4) {
            for j in (0..w).step_by(4) {
                if sample.valid[(i, j)] && stereo.valid[(i, j)] {
                    calib_conf.push(conf[(i, j)]);
                    let e = stereo.disparity[(i, j)] - sample.gt_disparity[(i, j)];
                    calib_sq.push(e * e);
                }
            }
        }

        if let Some((psample, pstereo)) = &prev {
            let est = estimate_field(
                FrameObs {
                    image: &psample.left,
                    stereo: pstereo,
                },
                FrameObs {
                    image: &sample.left,
                    stereo: &stereo,
                },
                cfg.motion.mode,
                &rig,
                &cfg.motion.params(),
                OracleMotion {
                    field: Some(&sample.gt_se3_field),
                    labels: Some(&psample.labels),
                },
            )?;
            let aligned = align_previous(&state_from_stereo(pstereo, false), &est, &rig);
            let cues = build_cues(&aligned, &stereo)?;
            let d_m = fill_holes(&aligned, &stereo.disparity);
            // Raw aligned error: holes keep their (huge) sentinel error so
            // the reset loss learns to drop them.
            let e_m = Array2::from_shape_fn(aligned.disparity.dim(), |idx| {
                (aligned.disparity[idx] - sample.gt_disparity[idx]).abs()
            });
            let e_s = Array2::from_shape_fn(stereo.disparity.dim(), |idx| {
                (stereo.disparity[idx] - sample.gt_disparity[idx]).abs()
            });
            let mask = Array2::from_shape_fn(sample.valid.dim(), |idx| {
                sample.valid[idx] && stereo.valid[idx]
            });
            fusion::collect_records(
                &cues,
                &stereo.disparity,
                &d_m,
                &e_m,
                &e_s,
                &sample.gt_disparity,
                &mask,
                cfg.training.pixel_stride,
                records,
            );
        }
        prev = Some((sample, stereo));
    }
    Ok(())
}

/// Everything a suite run produces, before any files are written.
pub struct SuiteOutcome {
    /// Aggregate across the test partition, per method.
    pub reports: BTreeMap<Method, MetricReport>,
    /// Per-sequence breakdown, per method, sorted by seed.
    pub per_sequence: BTreeMap<Method, Vec<(u64, MetricReport)>>,
    pub model: Option<LogisticWeightModel>,
    pub loss_curve: Option<Vec<f64>>,
    pub calibration: Option<(f64, f64)>,
    pub test_seeds: Vec<u64>,
    pub train_seeds: Vec<u64>,
}

fn build_pool() -> Result<rayon::ThreadPool, HarnessError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| HarnessError::Numeric(format!("thread pool: {e}")))
}

/// Train the weight model on the train partition (entry point of `train`).
pub fn train_model(
    cfg: &ExperimentConfig,
) -> Result<(LogisticWeightModel, Vec<f64>), HarnessError> {
    cfg.validate()?;
    let train_seeds = cfg.train_seeds();
    if train_seeds.is_empty() {
        return Err(HarnessError::Config(
            "training requires at least one seed not divisible by 5".into(),
        ));
    }
    let mut records = Vec::new();
    let (mut cc, mut cs) = (Vec::new(), Vec::new());
    for &seed in &train_seeds {
        collect_training(cfg, seed, &mut records, &mut cc, &mut cs)?;
    }
    if records.is_empty() {
        return Err(HarnessError::Numeric("no valid training pixels collected".into()));
    }
    if cfg.training.epochs == 0 {
        // Untrained model: neutral 0.5 weights everywhere.
        return Ok((LogisticWeightModel::zeros(), Vec::new()));
    }
    let hyper = cfg.training.hyper(cfg.loss);
    Ok(fusion::train_weight_model(&records, &hyper)?)
}

/// Run the full suite: train/calibrate on the train partition when needed,
/// evaluate every method on the test partition, write artifacts if
/// `out_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SuiteOutcome, HarnessError> {
    cfg.validate()?;
    let test_seeds = cfg.test_seeds();
    let train_seeds = cfg.train_seeds();
    let needs_model = cfg.fusion.methods.contains(&Method::Learned);
    let needs_calib = cfg.fusion.methods.contains(&Method::Kalman);

    let mut model = None;
    let mut loss_curve = None;
    let mut calibration = None;

    if needs_model || needs_calib {
        if train_seeds.is_empty() {
            return Err(HarnessError::Config(
                "kalman/learned methods need training sequences (seed not divisible by 5)".into(),
            ));
        }
        let mut records = Vec::new();
        let (mut cc, mut cs) = (Vec::new(), Vec::new());
        for &seed in &train_seeds {
            collect_training(cfg, seed, &mut records, &mut cc, &mut cs)?;
        }
        if needs_calib {
            if cc.is_empty() {
                return Err(HarnessError::Numeric(
                    "no calibration pixels collected".into(),
                ));
            }
            calibration = Some(fusion::calibrate_measurement_variance(&cc, &cs));
        }
        if needs_model {
            match &cfg.fusion.model_path {
                Some(path) => {
                    model = Some(LogisticWeightModel::load(path)?);
                }
                None => {
                    if records.is_empty() {
                        return Err(HarnessError::Numeric(
                            "no valid training pixels collected".into(),
                        ));
                    }
                    let (m, curve) = if cfg.training.epochs == 0 {
                        (LogisticWeightModel::zeros(), Vec::new())
                    } else {
                        fusion::train_weight_model(&records, &cfg.training.hyper(cfg.loss))?
                    };
                    model = Some(m);
                    loss_curve = Some(curve);
                }
            }
        }
    }

    let out_dir = cfg.out_dir.clone();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let pool = build_pool()?;
    let model_ref = model.as_ref();
    let out_ref = out_dir.as_deref();
    let seq_results: Result<Vec<SequenceOutput>, HarnessError> = pool.install(|| {
        test_seeds
            .par_iter()
            .map(|&seed| run_sequence(cfg, seed, model_ref, calibration, out_ref))
            .collect()
    });
    let mut seq_results = seq_results?;
    seq_results.sort_by_key(|s| s.seed);

    let mut reports = BTreeMap::new();
    let mut per_sequence: BTreeMap<Method, Vec<(u64, MetricReport)>> = BTreeMap::new();
    for &m in &cfg.fusion.methods {
        let mut all_frames = Vec::new();
        for seq in &seq_results {
            let frames = &seq.frames[&m];
            per_sequence
                .entry(m)
                .or_default()
                .push((seq.seed, aggregate(frames)));
            all_frames.extend_from_slice(frames);
        }
        reports.insert(m, aggregate(&all_frames));
    }

    let outcome = SuiteOutcome {
        reports,
        per_sequence,
        model,
        loss_curve,
        calibration,
        test_seeds,
        train_seeds,
    };

    if let Some(dir) = &out_dir {
        write_artifacts(cfg, &outcome, dir)?;
    }
    Ok(outcome)
}

#[derive(serde::Serialize)]
struct SequenceReport<'a> {
    seed: u64,
    report: &'a MetricReport,
}

fn write_artifacts(
    cfg: &ExperimentConfig,
    outcome: &SuiteOutcome,
    dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::write(dir.join("config.toml"), cfg.echo_toml())?;

    let mut methods = serde_json::Map::new();
    let mut sequences = serde_json::Map::new();
    for (m, r) in &outcome.reports {
        methods.insert(m.name().to_string(), serde_json::to_value(r).unwrap());
        let seqs: Vec<SequenceReport> = outcome.per_sequence[m]
            .iter()
            .map(|(seed, report)| SequenceReport {
                seed: *seed,
                report,
            })
            .collect();
        sequences.insert(m.name().to_string(), serde_json::to_value(&seqs).unwrap());
    }
    let report = serde_json::json!({
        "test_seeds": outcome.test_seeds,
        "train_seeds": outcome.train_seeds,
        "calibration": outcome.calibration.map(|(a, b)| vec![a, b]),
        "methods": serde_json::Value::Object(methods),
        "per_sequence": serde_json::Value::Object(sequences),
    });
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report).unwrap() + "\n",
    )?;
    std::fs::write(dir.join("report.csv"), report_csv(outcome))?;

    if let Some(curve) = &outcome.loss_curve {
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in curve.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(dir.join("loss_curve.csv"), csv)?;
    }
    if let Some(model) = &outcome.model {
        model
            .save(&dir.join("model.tfw"))
            .map_err(HarnessError::from)?;
    }
    Ok(())
}

const CSV_HEADER: &str = "method,sequence,tepe,tepe_3px,tepe_r,tepe_r_100pct,epe,d3px,\
fepe_of,fepe_of_1px,fepe_sf_m,fepe_sf_px,fepe_sf_1px,pairs,pixels,flows\n";

fn csv_row(method: &str, seq: &str, r: &MetricReport) -> String {
    format!(
        "{method},{seq},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        r.tepe,
        r.tepe_3px,
        r.tepe_r,
        r.tepe_r_100pct,
        r.epe,
        r.d3px,
        r.fepe_of,
        r.fepe_of_1px,
        r.fepe_sf_m,
        r.fepe_sf_px,
        r.fepe_sf_1px,
        r.pair_count,
        r.pixel_count,
        r.flow_count
    )
}

/// One row per method and sequence, then an `all` row per method.
pub fn report_csv(outcome: &SuiteOutcome) -> String {
    let mut csv = String::from(CSV_HEADER);
    for (m, seqs) in &outcome.per_sequence {
        for (seed, r) in seqs {
            csv.push_str(&csv_row(m.name(), &seed.to_string(), r));
        }
        csv.push_str(&csv_row(m.name(), "all", &outcome.reports[m]));
    }
    csv
}

/// Markdown and CSV comparison tables, rows sorted by TEPE ascending.
pub fn comparison_tables(outcome: &SuiteOutcome) -> (String, String) {
    let mut rows: Vec<(&Method, &MetricReport)> = outcome.reports.iter().collect();
    rows.sort_by(|a, b| a.1.tepe.total_cmp(&b.1.tepe).then(a.0.cmp(b.0)));

    let mut md = String::from(
        "| method | TEPE | >3px | TEPE_r | >100% | EPE | δ3px | FEPE_of | >1px | FEPE_sf (m) | FEPE_sf (px) | >1px |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for (m, r) in &rows {
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.5} | {:.4} | {:.4} |\n",
            m.name(),
            r.tepe,
            r.tepe_3px,
            r.tepe_r,
            r.tepe_r_100pct,
            r.epe,
            r.d3px,
            r.fepe_of,
            r.fepe_of_1px,
            r.fepe_sf_m,
            r.fepe_sf_px,
            r.fepe_sf_1px
        ));
    }
    let mut csv = String::from(CSV_HEADER);
    for (m, r) in &rows {
        csv.push_str(&csv_row(m.name(), "all", r));
    }
    (md, csv)
}

/// `compare` entry point: run the suite, render sorted tables.
pub fn compare_methods(
    cfg: &ExperimentConfig,
) -> Result<(SuiteOutcome, String, String), HarnessError> {
    if cfg.fusion.methods.len() < 2 {
        return Err(HarnessError::Config(
            "compare needs at least two fusion methods".into(),
        ));
    }
    let outcome = run_experiment(cfg)?;
    let (md, csv) = comparison_tables(&outcome);
    Ok((outcome, md, csv))
}

fn indexed_pfms(dir: &Path, prefix: &str) -> Result<BTreeMap<usize, PathBuf>, HarnessError> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", dir.display())))?
    {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(idx) = name
            .strip_prefix(prefix)
            .and_then(|rest| rest.strip_suffix(".pfm"))
            .and_then(|digits| digits.parse::<usize>().ok())
        {
            out.insert(idx, path);
        }
    }
    Ok(out)
}

/// Metrics-only mode over externally produced PFM files. The ground-truth
/// directory holds `disp_NNN.pfm` plus optional `flow_NNN.pfm` (flow of the
/// transition into frame N, on the N-1 grid); the prediction directory
/// holds matching `disp_NNN.pfm` and optional `flow_NNN.pfm`. Scene-flow
/// metrics need camera intrinsics and are left zero here.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport, HarnessError> {
    let gt_disp = indexed_pfms(gt_dir, "disp_")?;
    if gt_disp.is_empty() {
        return Err(HarnessError::Config(format!(
            "no disp_*.pfm files in {}",
            gt_dir.display()
        )));
    }
    let pred_disp = indexed_pfms(pred_dir, "disp_")?;
    let gt_flow = indexed_pfms(gt_dir, "flow_")?;
    let pred_flow = indexed_pfms(pred_dir, "flow_")?;

    let mut frames = Vec::new();
    let mut prev: Option<(usize, Array2<f64>, Array2<f64>)> = None;
    for (&t, gt_path) in &gt_disp {
        let gt = crate::io::read_pfm_gray(gt_path)?;
        let pred_path = pred_disp.get(&t).ok_or_else(|| {
            HarnessError::Config(format!(
                "prediction missing for frame {t}: no disp_{t:03}.pfm in {}",
                pred_dir.display()
            ))
        })?;
        let pred = crate::io::read_pfm_gray(pred_path)?;
        if pred.dim() != gt.dim() {
            return Err(HarnessError::Config(format!(
                "frame {t}: prediction is {:?} but ground truth is {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let mask = window_valid(&gt);
        let mut m = FrameMetrics {
            frame: t,
            ..Default::default()
        };
        let (e, d3) = epe(&pred, &gt, &mask)?;
        m.epe = e;
        m.d3px = d3;
        m.pixel_count = mask.iter().filter(|&&v| v).count();

        if let Some((pt, gt_prev, pred_prev)) = &prev {
            if *pt + 1 == t {
                if let Some(flow_path) = gt_flow.get(&t) {
                    let flow = crate::io::read_pfm_flow(flow_path)?;
                    let pairs = trace(&flow, pred_prev, &pred, gt_prev, &gt);
                    if !pairs.is_empty() {
                        let (te, t3, tr, tr1) = tepe(&pairs)?;
                        m.tepe = te;
                        m.tepe_3px = t3;
                        m.tepe_r = tr;
                        m.tepe_r_100pct = tr1;
                        m.pair_count = pairs.len();
                    }
                    if let Some(pf_path) = pred_flow.get(&t) {
                        let pf = crate::io::read_pfm_flow(pf_path)?;
                        let prev_mask = window_valid(gt_prev);
                        if prev_mask.iter().any(|&v| v) {
                            let (fo, fo1) = fepe_optical(&pf, &flow, &prev_mask)?;
                            m.fepe_of = fo;
                            m.fepe_of_1px = fo1;
                            m.flow_count = prev_mask.iter().filter(|&&v| v).count();
                        }
                    }
                }
            }
        }
        frames.push(m);
        prev = Some((t, gt, pred));
    }
    Ok(aggregate(&frames))
}
