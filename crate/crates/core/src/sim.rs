//! Deterministic synthetic dynamic scenes with analytic ground truth.
//!
//! A scene is an infinite background plane (label 0) plus rigid textured
//! objects — fronto-parallel rectangles and spheres — each following a
//! closed-form trajectory. Every frame is rendered by exact ray casting, so
//! disparity, optical flow, per-pixel SE3 motion, labels, and occlusion are
//! all available analytically rather than from a rasterizer.
//!
//! Conventions: world frame = camera frame at t=0 (camera looks down +z).
//! The right camera sits `baseline` along the camera's +x axis. The flow and
//! SE3 field stored in the sample for frame t describe motion from t-1 to t
//! and are indexed on the t-1 pixel grid; both are zero/identity at t=0.

use crate::geometry::{lift, project, CameraRig, Se3, Se3Field};
use crate::grid::mix64;
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("frame {t} out of range (sequence length {len})")]
    FrameOutOfRange { t: usize, len: usize },
}

/// Closed-form rigid trajectory: rotation about the body's own origin at a
/// constant rate, while the origin translates at constant velocity.
#[derive(Debug, Clone, Copy)]
pub struct MotionSpec {
    /// Meters per frame.
    pub velocity: Vector3<f64>,
    pub rotation_axis: Vector3<f64>,
    /// Radians per frame.
    pub rotation_rate: f64,
}

impl MotionSpec {
    pub fn fixed() -> Self {
        Self {
            velocity: Vector3::zeros(),
            rotation_axis: Vector3::z(),
            rotation_rate: 0.0,
        }
    }

    /// Pose at frame t relative to the body's frame at t=0.
    pub fn pose_at(&self, t: usize) -> Se3 {
        let t = t as f64;
        let rot = if self.rotation_rate == 0.0 || self.rotation_axis.norm() == 0.0 {
            Se3::identity()
        } else {
            Se3::from_axis_angle(&self.rotation_axis, self.rotation_rate * t)
        };
        Se3::from_translation(self.velocity * t).compose(&rot)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ObjectKind {
    /// Rectangle in the object's xy-plane (z_obj = 0), half extents in meters.
    Plane { half_width: f64, half_height: f64 },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectSpec {
    pub kind: ObjectKind,
    /// World position of the object origin at t=0.
    pub center: Vector3<f64>,
    pub motion: MotionSpec,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub rig: CameraRig,
    /// Depth of the static background plane (world z), label 0.
    pub background_depth: f64,
    pub objects: Vec<ObjectSpec>,
    pub camera: MotionSpec,
    pub texture_seed: u64,
    /// Number of frames T (>= 2).
    pub length: usize,
    /// Approximate projected texture cell size in pixels.
    pub texture_cell_px: f64,
}

impl SceneConfig {
    /// Background-only scene with a static camera; callers push objects and
    /// motion onto this.
    pub fn basic(rig: CameraRig, background_depth: f64, length: usize) -> Self {
        Self {
            rig,
            background_depth,
            objects: Vec::new(),
            camera: MotionSpec::fixed(),
            texture_seed: 1,
            length,
            texture_cell_px: 8.0,
        }
    }
}

/// Stereo-noise generator parameters for [`perturb_disparity`].
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NoiseModel {
    /// Gaussian jitter sigma in pixels.
    pub jitter_sigma: f64,
    /// Fraction of pixels replaced by gross outliers.
    pub outlier_rate: f64,
    /// Outlier offset magnitude in pixels.
    pub outlier_magnitude: f64,
    /// Constant bias added within 1 px of disparity discontinuities.
    pub edge_bias: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn clean(seed: u64) -> Self {
        Self {
            jitter_sigma: 0.0,
            outlier_rate: 0.0,
            outlier_magnitude: 0.0,
            edge_bias: 0.0,
            seed,
        }
    }
}

/// One rendered frame with its analytic ground truth.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
    /// Ground-truth disparity on the frame-t grid.
    pub gt_disparity: Array2<f64>,
    /// Flow from t-1 to t, indexed on the t-1 grid; zero at t=0.
    pub gt_flow: Array3<f64>,
    /// Rigid motion from camera-(t-1) to camera-t coordinates, t-1 grid.
    pub gt_se3_field: Se3Field,
    /// Object id per pixel, 0 = background, on the frame-t grid.
    pub labels: Array2<usize>,
    /// Disparity inside the (1, 210) px window.
    pub valid: Array2<bool>,
}

/// Which camera of the rig a ray originates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eye {
    Left,
    Right,
}

/// Analytic ray-surface intersection.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    /// Depth along the camera z axis (= disparity fB/depth).
    pub depth: f64,
    /// 0 = background.
    pub label: usize,
    /// Hit point in the owning body's frame; rigid-motion invariant.
    pub point_obj: Vector3<f64>,
    pub point_world: Vector3<f64>,
}

pub const DISPARITY_MIN: f64 = 1.0;
pub const DISPARITY_MAX: f64 = 210.0;

#[derive(Debug, Clone)]
pub struct Scene {
    config: SceneConfig,
}

/// Validate and freeze a scene description.
pub fn build_scene(config: SceneConfig) -> Result<Scene, SimError> {
    Scene::build(config)
}

impl Scene {
    pub fn build(config: SceneConfig) -> Result<Self, SimError> {
        config
            .rig
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        if config.length < 2 {
            return Err(SimError::InvalidConfig(format!(
                "sequence length must be >= 2, got {}",
                config.length
            )));
        }
        let fb = config.rig.focal_baseline();
        let (z_min, z_max) = (fb / DISPARITY_MAX, fb / DISPARITY_MIN);
        let scene = Self { config };
        let cfg = &scene.config;

        for t in 0..cfg.length {
            let cam = cfg.camera.pose_at(t);
            let cam_inv = cam.inverse();
            let bg_depth = scene.background_axis_depth(&cam);
            if bg_depth < z_min || bg_depth > z_max {
                return Err(SimError::InvalidConfig(format!(
                    "background depth {bg_depth:.3} m at frame {t} outside [{z_min:.3}, {z_max:.3}]"
                )));
            }
            for (idx, obj) in cfg.objects.iter().enumerate() {
                let pose = scene.object_pose(idx, t);
                let check = |p_obj: Vector3<f64>| -> Option<f64> {
                    let z = cam_inv.apply(&pose.apply(&p_obj)).z;
                    (z < z_min || z > z_max).then_some(z)
                };
                let bad = match obj.kind {
                    ObjectKind::Plane {
                        half_width: hw,
                        half_height: hh,
                    } => [(-hw, -hh), (-hw, hh), (hw, -hh), (hw, hh)]
                        .into_iter()
                        .find_map(|(x, y)| check(Vector3::new(x, y, 0.0))),
                    ObjectKind::Sphere { radius } => [-radius, radius]
                        .into_iter()
                        .find_map(|r| check(Vector3::new(0.0, 0.0, r))),
                };
                if let Some(z) = bad {
                    return Err(SimError::InvalidConfig(format!(
                        "object {} reaches depth {z:.3} m at frame {t}, outside [{z_min:.3}, {z_max:.3}]",
                        idx + 1
                    )));
                }
            }
        }
        Ok(scene)
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn rig(&self) -> &CameraRig {
        &self.config.rig
    }

    pub fn length(&self) -> usize {
        self.config.length
    }

    /// Depth of the background plane along the camera's optical axis.
    fn background_axis_depth(&self, cam: &Se3) -> f64 {
        let axis = cam.rotation() * Vector3::z();
        (self.config.background_depth - cam.translation().z) / axis.z
    }

    /// Object-to-world pose of object `idx` (1-based labels; idx is 0-based).
    fn object_pose(&self, idx: usize, t: usize) -> Se3 {
        let obj = &self.config.objects[idx];
        Se3::from_translation(obj.center).compose(&obj.motion.pose_at(t))
    }

    /// Body-to-world pose for a label (0 = static background).
    fn label_pose(&self, label: usize, t: usize) -> Se3 {
        if label == 0 {
            Se3::identity()
        } else {
            self.object_pose(label - 1, t)
        }
    }

    fn camera_pose(&self, t: usize, eye: Eye) -> Se3 {
        let cam = self.config.camera.pose_at(t);
        match eye {
            Eye::Left => cam,
            Eye::Right => cam.compose(&Se3::from_translation(Vector3::new(
                self.config.rig.baseline,
                0.0,
                0.0,
            ))),
        }
    }

    /// Cast the pixel ray (u, v) at frame t and return the nearest surface.
    /// Depth is the camera-frame z of the hit, so disparity = fB / depth.
    pub fn raycast(&self, t: usize, u: f64, v: f64, eye: Eye) -> Option<Hit> {
        let rig = &self.config.rig;
        let cam = self.camera_pose(t, eye);
        let origin = *cam.translation();
        // Direction with unit camera-z component: ray param s = camera depth.
        let dir_c = Vector3::new((u - rig.cx) / rig.fx, (v - rig.cy) / rig.fy, 1.0);
        let dir_w = cam.rotation() * dir_c;

        let mut best: Option<Hit> = None;
        let mut consider = |s: f64, label: usize, point_obj: Vector3<f64>| {
            if s <= 1e-9 {
                return;
            }
            if best.is_none_or(|b| s < b.depth) {
                best = Some(Hit {
                    depth: s,
                    label,
                    point_obj,
                    point_world: origin + dir_w * s,
                });
            }
        };

        // Background plane z_w = background_depth.
        if dir_w.z.abs() > 1e-12 {
            let s = (self.config.background_depth - origin.z) / dir_w.z;
            if s > 0.0 {
                consider(s, 0, origin + dir_w * s);
            }
        }

        for (idx, obj) in self.config.objects.iter().enumerate() {
            let pose = self.object_pose(idx, t);
            let inv = pose.inverse();
            let o = inv.apply(&origin);
            let d = inv.rotation() * dir_w;
            match obj.kind {
                ObjectKind::Plane {
                    half_width: hw,
                    half_height: hh,
                } => {
                    if d.z.abs() < 1e-12 {
                        continue;
                    }
                    let s = -o.z / d.z;
                    let p = o + d * s;
                    if s > 0.0 && p.x.abs() <= hw && p.y.abs() <= hh {
                        consider(s, idx + 1, p);
                    }
                }
                ObjectKind::Sphere { radius } => {
                    let a = d.norm_squared();
                    let b = 2.0 * d.dot(&o);
                    let c = o.norm_squared() - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc < 0.0 {
                        continue;
                    }
                    let sq = disc.sqrt();
                    let s0 = (-b - sq) / (2.0 * a);
                    let s1 = (-b + sq) / (2.0 * a);
                    let s = if s0 > 1e-9 { s0 } else { s1 };
                    if s > 1e-9 {
                        consider(s, idx + 1, o + d * s);
                    }
                }
            }
        }
        best
    }

    /// Band-limited value-noise albedo at a body-frame point.
    fn texture(&self, label: usize, p: &Vector3<f64>) -> f64 {
        let rig = &self.config.rig;
        // Cell size chosen so one lattice cell projects to roughly
        // `texture_cell_px` pixels at the body's reference depth.
        let ref_depth = if label == 0 {
            self.config.background_depth
        } else {
            let obj = &self.config.objects[label - 1];
            obj.center.z.max(rig.focal_baseline() / DISPARITY_MAX)
        };
        let cell = self.config.texture_cell_px * ref_depth / rig.fx;
        let base = mix64(self.config.texture_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ label as u64);
        let n0 = value_noise3(base, p / cell);
        let n1 = value_noise3(mix64(base ^ 0xA5A5_A5A5), p * (2.0 / cell));
        let n = (n0 + 0.5 * n1) / 1.5;
        0.15 + 0.5 * n
    }

    /// Rigid motion of the surface under pixel (t-1 grid position `label`)
    /// from camera-(t-1) to camera-t coordinates.
    fn pixel_motion(&self, label: usize, t: usize) -> Se3 {
        let cam_prev_inv = self.camera_pose(t - 1, Eye::Left);
        let cam_now = self.camera_pose(t, Eye::Left).inverse();
        let body_prev = self.label_pose(label, t - 1).inverse();
        let body_now = self.label_pose(label, t);
        cam_now
            .compose(&body_now)
            .compose(&body_prev)
            .compose(&cam_prev_inv)
    }

    pub fn render_sample(&self, t: usize) -> Result<SceneSample, SimError> {
        if t >= self.config.length {
            return Err(SimError::FrameOutOfRange {
                t,
                len: self.config.length,
            });
        }
        let rig = &self.config.rig;
        let (h, w) = (rig.height, rig.width);
        let fb = rig.focal_baseline();

        let mut left = Array2::zeros((h, w));
        let mut right = Array2::zeros((h, w));
        let mut gt_disparity = Array2::zeros((h, w));
        let mut labels = Array2::zeros((h, w));
        let mut valid = Array2::from_elem((h, w), false);

        for i in 0..h {
            for j in 0..w {
                let (u, v) = (j as f64, i as f64);
                // Validated configs guarantee the background is always hit.
                let hit = self
                    .raycast(t, u, v, Eye::Left)
                    .expect("background plane covers every ray");
                let d = fb / hit.depth;
                left[(i, j)] = self.texture(hit.label, &hit.point_obj);
                gt_disparity[(i, j)] = d;
                labels[(i, j)] = hit.label;
                valid[(i, j)] = d > DISPARITY_MIN && d < DISPARITY_MAX;
                let rhit = self
                    .raycast(t, u, v, Eye::Right)
                    .expect("background plane covers every ray");
                right[(i, j)] = self.texture(rhit.label, &rhit.point_obj);
            }
        }

        let mut gt_flow = Array3::zeros((h, w, 2));
        let mut gt_se3_field = Se3Field::identity(h, w);
        if t > 0 {
            for i in 0..h {
                for j in 0..w {
                    let (u, v) = (j as f64, i as f64);
                    let hit = self
                        .raycast(t - 1, u, v, Eye::Left)
                        .expect("background plane covers every ray");
                    let motion = self.pixel_motion(hit.label, t);
                    gt_se3_field.set(i, j, motion);
                    let q_prev = lift(u, v, fb / hit.depth, rig).expect("positive disparity");
                    let q_now = motion.apply(&q_prev);
                    if let Ok((u2, v2, _)) = project(&q_now, rig) {
                        gt_flow[(i, j, 0)] = u2 - u;
                        gt_flow[(i, j, 1)] = v2 - v;
                    }
                }
            }
        }

        Ok(SceneSample {
            left,
            right,
            gt_disparity,
            gt_flow,
            gt_se3_field,
            labels,
            valid,
        })
    }

    /// Pixels of the t-1 grid whose surface point is still the nearest
    /// visible surface at frame t (checked by exact re-raycast).
    pub fn covisibility(&self, t: usize) -> Result<Array2<bool>, SimError> {
        if t == 0 || t >= self.config.length {
            return Err(SimError::FrameOutOfRange {
                t,
                len: self.config.length,
            });
        }
        let rig = &self.config.rig;
        let (h, w) = (rig.height, rig.width);
        let fb = rig.focal_baseline();
        let mut covis = Array2::from_elem((h, w), false);
        for i in 0..h {
            for j in 0..w {
                let (u, v) = (j as f64, i as f64);
                let hit = match self.raycast(t - 1, u, v, Eye::Left) {
                    Some(hit) => hit,
                    None => continue,
                };
                let motion = self.pixel_motion(hit.label, t);
                let q_prev = lift(u, v, fb / hit.depth, rig).expect("positive disparity");
                let q_now = motion.apply(&q_prev);
                let (u2, v2) = match project(&q_now, rig) {
                    Ok((u2, v2, _)) => (u2, v2),
                    Err(_) => continue,
                };
                if u2 < 0.0 || v2 < 0.0 || u2 > (w - 1) as f64 || v2 > (h - 1) as f64 {
                    continue;
                }
                if let Some(again) = self.raycast(t, u2, v2, Eye::Left) {
                    covis[(i, j)] = again.label == hit.label
                        && (again.point_obj - hit.point_obj).norm() < 1e-4;
                }
            }
        }
        Ok(covis)
    }
}

/// Trilinear smoothstep-interpolated value noise in [0, 1].
fn value_noise3(seed: u64, p: Vector3<f64>) -> f64 {
    let fx = p.x.floor();
    let fy = p.y.floor();
    let fz = p.z.floor();
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty, tz) = (smooth(p.x - fx), smooth(p.y - fy), smooth(p.z - fz));
    let corner = |dx: i64, dy: i64, dz: i64| -> f64 {
        let hx = mix64(seed ^ (ix + dx) as u64);
        let hy = mix64(hx ^ (iy + dy) as u64);
        let hz = mix64(hy ^ (iz + dz) as u64);
        (hz >> 11) as f64 / (1u64 << 53) as f64
    };
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(corner(0, 0, 0), corner(1, 0, 0), tx);
    let c10 = lerp(corner(0, 1, 0), corner(1, 1, 0), tx);
    let c01 = lerp(corner(0, 0, 1), corner(1, 0, 1), tx);
    let c11 = lerp(corner(0, 1, 1), corner(1, 1, 1), tx);
    lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
}

/// Corrupt a ground-truth disparity map with the errors a real per-frame
/// stereo matcher makes: Gaussian jitter, sparse gross outliers, and a bias
/// within 1 px of disparity discontinuities. Deterministic in `model.seed`;
/// the random stream is consumed pixel-by-pixel regardless of outcomes.
pub fn perturb_disparity(gt: &Array2<f64>, model: &NoiseModel) -> Array2<f64> {
    assert!(
        (0.0..=1.0).contains(&model.outlier_rate) && model.jitter_sigma >= 0.0,
        "noise model invariants violated"
    );
    let (h, w) = gt.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let mut out = gt.clone();
    for i in 0..h {
        for j in 0..w {
            // Fixed draw count per pixel keeps the stream deterministic.
            let (g0, g1): (f64, f64) = (rng.gen(), rng.gen());
            let is_outlier = rng.gen::<f64>() < model.outlier_rate;
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let gauss =
                (-2.0 * g0.max(1e-300).ln()).sqrt() * (std::f64::consts::TAU * g1).cos();
            if is_outlier {
                out[(i, j)] = gt[(i, j)] + sign * model.outlier_magnitude;
            } else {
                out[(i, j)] += model.jitter_sigma * gauss;
            }
        }
    }
    if model.edge_bias != 0.0 {
        for i in 0..h {
            for j in 0..w {
                let mut near_edge = false;
                'scan: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        if (gt[(ni as usize, nj as usize)] - gt[(i, j)]).abs() > 1.0 {
                            near_edge = true;
                            break 'scan;
                        }
                    }
                }
                if near_edge {
                    out[(i, j)] += model.edge_bias;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::bilinear;
    use approx::assert_abs_diff_eq;

    fn rig() -> CameraRig {
        CameraRig::new(100.0, 100.0, 50.0, 50.0, 0.5, 101, 101).unwrap()
    }

    fn plane_at(z: f64, half: f64) -> ObjectSpec {
        ObjectSpec {
            kind: ObjectKind::Plane {
                half_width: half,
                half_height: half,
            },
            center: Vector3::new(0.0, 0.0, z),
            motion: MotionSpec::fixed(),
        }
    }

    #[test]
    fn build_rejects_short_sequences_and_bad_depths() {
        let mut cfg = SceneConfig::basic(rig(), 10.0, 1);
        assert!(matches!(
            Scene::build(cfg.clone()),
            Err(SimError::InvalidConfig(_))
        ));
        cfg.length = 5;
        cfg.objects.push(plane_at(60.0, 1.0)); // beyond fB = 50 m
        assert!(matches!(
            Scene::build(cfg),
            Err(SimError::InvalidConfig(_))
        ));
    }

    #[test]
    fn deterministic_renders() {
        let mut cfg = SceneConfig::basic(rig(), 10.0, 3);
        cfg.objects.push(plane_at(5.0, 2.0));
        let a = Scene::build(cfg.clone()).unwrap().render_sample(1).unwrap();
        let b = Scene::build(cfg).unwrap().render_sample(1).unwrap();
        assert_eq!(a.left, b.left);
        assert_eq!(a.right, b.right);
        assert_eq!(a.gt_disparity, b.gt_disparity);
        assert_eq!(a.gt_flow, b.gt_flow);
    }

    #[test]
    fn background_only_scene_labels_zero() {
        let scene = Scene::build(SceneConfig::basic(rig(), 10.0, 2)).unwrap();
        let s = scene.render_sample(0).unwrap();
        assert!(s.labels.iter().all(|&l| l == 0));
        assert!(s.valid.iter().all(|&v| v));
    }

    #[test]
    fn static_scene_zero_flow_identity_field() {
        let mut cfg = SceneConfig::basic(rig(), 10.0, 3);
        cfg.objects.push(plane_at(5.0, 1.0));
        let scene = Scene::build(cfg).unwrap();
        let s = scene.render_sample(2).unwrap();
        assert!(s.gt_flow.iter().all(|&f| f.abs() < 1e-12));
        for i in 0..101 {
            for j in 0..101 {
                assert!(s.gt_se3_field.get(i, j).rotation_angle() < 1e-12);
                assert!(s.gt_se3_field.get(i, j).translation().norm() < 1e-12);
            }
        }
    }

    #[test]
    fn fronto_parallel_plane_disparity_constant() {
        let mut cfg = SceneConfig::basic(rig(), 10.0, 2);
        cfg.objects.push(plane_at(5.0, 3.0));
        let scene = Scene::build(cfg).unwrap();
        let s = scene.render_sample(0).unwrap();
        let mut on_plane = 0usize;
        for i in 0..101 {
            for j in 0..101 {
                if s.labels[(i, j)] == 1 {
                    assert_abs_diff_eq!(s.gt_disparity[(i, j)], 10.0, epsilon = 1e-9);
                    on_plane += 1;
                }
            }
        }
        assert!(on_plane > 1000, "plane should cover a large region");
    }

    #[test]
    fn approaching_camera_monotonic_disparity() {
        let mut cfg = SceneConfig::basic(rig(), 20.0, 4);
        cfg.objects.push(plane_at(8.0, 4.0));
        cfg.camera = MotionSpec {
            velocity: Vector3::new(0.0, 0.0, 0.5),
            rotation_axis: Vector3::z(),
            rotation_rate: 0.0,
        };
        let scene = Scene::build(cfg).unwrap();
        let mut prev = None;
        for t in 0..4 {
            let s = scene.render_sample(t).unwrap();
            let d = s.gt_disparity[(50, 50)];
            assert_eq!(s.labels[(50, 50)], 1);
            if let Some(p) = prev {
                assert!(d > p, "disparity must increase toward the plane");
            }
            prev = Some(d);
        }
    }

    #[test]
    fn flow_se3_consistency() {
        let mut cfg = SceneConfig::basic(rig(), 12.0, 3);
        cfg.objects.push(ObjectSpec {
            kind: ObjectKind::Sphere { radius: 1.0 },
            center: Vector3::new(0.5, -0.3, 6.0),
            motion: MotionSpec {
                velocity: Vector3::new(0.05, 0.02, -0.04),
                rotation_axis: Vector3::new(0.0, 1.0, 0.3),
                rotation_rate: 0.03,
            },
        });
        cfg.camera = MotionSpec {
            velocity: Vector3::new(0.02, 0.0, 0.05),
            rotation_axis: Vector3::y(),
            rotation_rate: 0.002,
        };
        let scene = Scene::build(cfg).unwrap();
        let prev = scene.render_sample(1).unwrap();
        let s = scene.render_sample(2).unwrap();
        let r = rig();
        for i in 0..101 {
            for j in 0..101 {
                let d_prev = prev.gt_disparity[(i, j)];
                let q = lift(j as f64, i as f64, d_prev, &r).unwrap();
                let moved = s.gt_se3_field.get(i, j).apply(&q);
                let (u2, v2, _) = project(&moved, &r).unwrap();
                assert!((u2 - j as f64 - s.gt_flow[(i, j, 0)]).abs() < 1e-6);
                assert!((v2 - i as f64 - s.gt_flow[(i, j, 1)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn disparity_flow_consistency_on_covisible() {
        let mut cfg = SceneConfig::basic(rig(), 12.0, 3);
        cfg.objects.push(plane_at(5.0, 1.5));
        cfg.objects[0].motion = MotionSpec {
            velocity: Vector3::new(0.06, -0.03, 0.08),
            rotation_axis: Vector3::z(),
            rotation_rate: 0.02,
        };
        let scene = Scene::build(cfg).unwrap();
        let prev = scene.render_sample(1).unwrap();
        let s = scene.render_sample(2).unwrap();
        let covis = scene.covisibility(2).unwrap();
        let r = rig();
        let fb = r.focal_baseline();
        let mut checked = 0usize;
        for i in 0..101 {
            for j in 0..101 {
                if !covis[(i, j)] {
                    continue;
                }
                let d_prev = prev.gt_disparity[(i, j)];
                let q = lift(j as f64, i as f64, d_prev, &r).unwrap();
                let moved = s.gt_se3_field.get(i, j).apply(&q);
                let (u2, v2, d_field) = project(&moved, &r).unwrap();
                // Exact disparity at the traced subpixel position.
                let hit = scene.raycast(2, u2, v2, Eye::Left).unwrap();
                let d_traced = fb / hit.depth;
                assert!(
                    (d_field - d_traced).abs() < 1e-6,
                    "se3-projected vs traced disparity at ({i},{j})"
                );
                checked += 1;
            }
        }
        assert!(checked > 5000, "covisible set too small: {checked}");
    }

    #[test]
    fn photometric_stereo_consistency() {
        let mut cfg = SceneConfig::basic(rig(), 10.0, 2);
        cfg.objects.push(plane_at(5.0, 1.5));
        cfg.objects.push(ObjectSpec {
            kind: ObjectKind::Sphere { radius: 0.8 },
            center: Vector3::new(1.2, 0.8, 7.0),
            motion: MotionSpec::fixed(),
        });
        let scene = Scene::build(cfg).unwrap();
        let s = scene.render_sample(0).unwrap();
        let (mut ok, mut total) = (0usize, 0usize);
        for i in 0..101 {
            for j in 0..101 {
                let d = s.gt_disparity[(i, j)];
                let ur = j as f64 - d;
                if ur < 0.0 {
                    continue;
                }
                // Skip pixels occluded in the right view.
                let lhit = scene.raycast(0, j as f64, i as f64, Eye::Left).unwrap();
                let rhit = scene.raycast(0, ur, i as f64, Eye::Right).unwrap();
                if lhit.label != rhit.label
                    || (lhit.point_obj - rhit.point_obj).norm() > 1e-4
                {
                    continue;
                }
                total += 1;
                if (s.left[(i, j)] - bilinear(&s.right, ur, i as f64)).abs() < 0.02 {
                    ok += 1;
                }
            }
        }
        assert!(total > 5000);
        assert!(
            ok as f64 >= 0.95 * total as f64,
            "photometric consistency {ok}/{total}"
        );
    }

    #[test]
    fn perturb_zero_noise_is_identity() {
        let gt = Array2::from_shape_fn((20, 30), |(i, j)| 5.0 + (i + j) as f64 * 0.1);
        let out = perturb_disparity(&gt, &NoiseModel::clean(9));
        assert_eq!(out, gt);
    }

    #[test]
    fn perturb_jitter_std_matches() {
        let gt = Array2::from_elem((250, 400), 50.0);
        let model = NoiseModel {
            jitter_sigma: 0.5,
            outlier_rate: 0.0,
            outlier_magnitude: 0.0,
            edge_bias: 0.0,
            seed: 11,
        };
        let out = perturb_disparity(&gt, &model);
        let n = gt.len() as f64;
        let mean: f64 = (&out - &gt).sum() / n;
        let var: f64 = (&out - &gt).mapv(|d| (d - mean) * (d - mean)).sum() / (n - 1.0);
        let std = var.sqrt();
        assert!((0.49..=0.51).contains(&std), "std = {std}");
    }

    #[test]
    fn perturb_outlier_fraction_matches() {
        let gt = Array2::from_elem((250, 400), 50.0);
        let model = NoiseModel {
            jitter_sigma: 0.0,
            outlier_rate: 0.01,
            outlier_magnitude: 8.0,
            edge_bias: 0.0,
            seed: 13,
        };
        let out = perturb_disparity(&gt, &model);
        let frac = out
            .iter()
            .zip(gt.iter())
            .filter(|(a, b)| (**a - **b).abs() > 5.0)
            .count() as f64
            / gt.len() as f64;
        assert!((0.008..=0.012).contains(&frac), "fraction = {frac}");
    }

    #[test]
    fn perturb_edge_bias_hits_discontinuities_only() {
        let mut gt = Array2::from_elem((10, 10), 10.0);
        for i in 0..10 {
            for j in 5..10 {
                gt[(i, j)] = 20.0;
            }
        }
        let model = NoiseModel {
            jitter_sigma: 0.0,
            outlier_rate: 0.0,
            outlier_magnitude: 0.0,
            edge_bias: 2.0,
            seed: 1,
        };
        let out = perturb_disparity(&gt, &model);
        for i in 0..10 {
            for j in 0..10 {
                let expect = if (4..=5).contains(&j) { 2.0 } else { 0.0 };
                assert_abs_diff_eq!(out[(i, j)] - gt[(i, j)], expect);
            }
        }
    }
}
