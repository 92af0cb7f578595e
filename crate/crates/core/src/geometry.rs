//! Pinhole stereo camera model, 3D lifting/projection, per-pixel SE3
//! transforms, and z-buffered forward splatting.
//!
//! Conventions: `u` is the column (x) coordinate, `v` the row (y) coordinate,
//! pixel centers sit at integer coordinates, and the camera looks down +z.
//! Disparity is the horizontal left-right offset in pixels; depth is
//! `fx * baseline / disparity`.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("disparity must be positive, got {0}")]
    NonPositiveDisparity(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("rotation is not a proper orthonormal matrix: {0}")]
    NotRigid(String),
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
}

/// Pinhole intrinsics plus the stereo baseline.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        baseline: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let rig = Self {
            fx,
            fy,
            cx,
            cy,
            baseline,
            width,
            height,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.fx) || !positive(self.fy) {
            return Err(GeometryError::InvalidRig(format!(
                "focal lengths must be finite and positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !positive(self.baseline) {
            return Err(GeometryError::InvalidRig(format!(
                "baseline must be finite and positive ({})",
                self.baseline
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(GeometryError::InvalidRig(format!(
                "image must be at least 2x2 ({}x{})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// `fx * baseline`, the disparity-depth conversion constant.
    pub fn focal_baseline(&self) -> f64 {
        self.fx * self.baseline
    }
}

/// Convert disparity (pixels) to depth (meters): `z = fx * baseline / d`.
pub fn disparity_to_depth(d: f64, rig: &CameraRig) -> Result<f64, GeometryError> {
    if d <= 0.0 {
        return Err(GeometryError::NonPositiveDisparity(d));
    }
    Ok(rig.focal_baseline() / d)
}

/// Inverse perspective projection: pixel (u, v) with disparity d to a 3D
/// point in the camera frame.
pub fn lift(u: f64, v: f64, d: f64, rig: &CameraRig) -> Result<Vector3<f64>, GeometryError> {
    let z = disparity_to_depth(d, rig)?;
    let x = (u - rig.cx) * z / rig.fx;
    let y = (v - rig.cy) * z / rig.fy;
    Ok(Vector3::new(x, y, z))
}

/// Perspective projection of a camera-frame point to (u, v, disparity).
/// The returned pixel may lie outside the image; callers clip.
pub fn project(p: &Vector3<f64>, rig: &CameraRig) -> Result<(f64, f64, f64), GeometryError> {
    if p.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    let u = rig.fx * p.x / p.z + rig.cx;
    let v = rig.fy * p.y / p.z + rig.cy;
    let d = rig.focal_baseline() / p.z;
    Ok((u, v, d))
}

const RIGID_TOL: f64 = 1e-9;

/// A rigid-body transform: orthonormal rotation plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from parts, enforcing `R^T R = I` and `det R = 1` within 1e-9.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let ortho_err = gram.amax();
        if ortho_err > RIGID_TOL {
            return Err(GeometryError::NotRigid(format!(
                "R^T R deviates from identity by {ortho_err:.3e}"
            )));
        }
        let det_err = (rotation.determinant() - 1.0).abs();
        if det_err > RIGID_TOL {
            return Err(GeometryError::NotRigid(format!(
                "det R deviates from 1 by {det_err:.3e}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about `axis` by `angle` radians, zero translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self {
            rotation: rodrigues(&(axis.normalize() * angle)),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Exponential map of a twist (translation part first, then rotation).
    pub fn exp(twist: &Vector6<f64>) -> Self {
        let rho = Vector3::new(twist[0], twist[1], twist[2]);
        let phi = Vector3::new(twist[3], twist[4], twist[5]);
        let theta = phi.norm();
        let k = skew(&phi);
        let rotation = rodrigues(&phi);
        // V = I + (1-cos)/th^2 K + (th-sin)/th^3 K^2, with series fallback.
        let (a, b) = if theta < 1e-8 {
            (0.5 - theta * theta / 24.0, 1.0 / 6.0 - theta * theta / 120.0)
        } else {
            (
                (1.0 - theta.cos()) / (theta * theta),
                (theta - theta.sin()) / (theta * theta * theta),
            )
        };
        let v = Matrix3::identity() + k * a + k * k * b;
        Self {
            rotation,
            translation: v * rho,
        }
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation from a scaled axis.
fn rodrigues(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    if theta < 1e-12 {
        return Matrix3::identity() + skew(phi);
    }
    let k = skew(&(phi / theta));
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

impl std::ops::Mul for &Se3 {
    type Output = Se3;
    fn mul(self, rhs: &Se3) -> Se3 {
        self.compose(rhs)
    }
}

/// Weighted least-squares Gauss-Newton normal equations on the se3 tangent.
/// Shared by the rigid solver; kept here with the exp map it depends on.
pub(crate) fn solve_se3_normal_equations(
    jtj: &Matrix6<f64>,
    jtr: &Vector6<f64>,
) -> Option<Vector6<f64>> {
    let svd = jtj.svd(true, true);
    let max_sv = svd.singular_values.max();
    if max_sv <= 0.0 || svd.singular_values.min() / max_sv < 1e-12 {
        return None;
    }
    svd.solve(jtr, 0.0).ok()
}

/// A rigid transform per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Se3Field {
    data: Vec<Se3>,
    height: usize,
    width: usize,
}

impl Se3Field {
    pub fn identity(height: usize, width: usize) -> Self {
        Self::uniform(Se3::identity(), height, width)
    }

    pub fn uniform(se3: Se3, height: usize, width: usize) -> Self {
        Self {
            data: vec![se3; height * width],
            height,
            width,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Se3) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            data,
            height,
            width,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> &Se3 {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, se3: Se3) {
        self.data[row * self.width + col] = se3;
    }
}

/// Per-pixel bundle of disparity, features, and auxiliary channels carried
/// across frames.
#[derive(Debug, Clone)]
pub struct MemoryState {
    /// Disparity in pixels; finite and positive wherever `valid`.
    pub disparity: Array2<f64>,
    /// (H, W, C) feature channels.
    pub features: Array3<f64>,
    /// Pixels observed in the previous frame after motion correction.
    pub visibility: Array2<bool>,
    /// 2D flow magnitude in pixels of the point that landed here.
    pub flow_magnitude: Array2<f64>,
    /// Motion-matching confidence in [0, 1].
    pub flow_confidence: Array2<f64>,
    /// Pixels carrying a usable disparity.
    pub valid: Array2<bool>,
}

impl MemoryState {
    /// All-invalid state with `channels` feature channels.
    pub fn empty(height: usize, width: usize, channels: usize) -> Self {
        Self {
            disparity: Array2::zeros((height, width)),
            features: Array3::zeros((height, width, channels)),
            visibility: Array2::from_elem((height, width), false),
            flow_magnitude: Array2::zeros((height, width)),
            flow_confidence: Array2::zeros((height, width)),
            valid: Array2::from_elem((height, width), false),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.disparity.dim()
    }

    pub fn channels(&self) -> usize {
        self.features.dim().2
    }
}

/// Apply a per-pixel rigid transform to an (H, W, 3) point map.
pub fn apply_se3_field(
    points: &Array3<f64>,
    field: &Se3Field,
) -> Result<Array3<f64>, GeometryError> {
    let (h, w, c) = points.dim();
    if c != 3 || (h, w) != field.dim() {
        return Err(GeometryError::DimensionMismatch {
            expected: field.dim(),
            got: (h, w),
        });
    }
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let p = Vector3::new(points[(i, j, 0)], points[(i, j, 1)], points[(i, j, 2)]);
            let q = field.get(i, j).apply(&p);
            out[(i, j, 0)] = q.x;
            out[(i, j, 1)] = q.y;
            out[(i, j, 2)] = q.z;
        }
    }
    Ok(out)
}

/// Round half up, matching the rasterization rule of [`splat`].
pub fn raster_round(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

const ZBUF_TIE: f64 = 1e-12;

/// Forward-splat a memory state through a per-pixel SE3 field.
///
/// Every valid source pixel is lifted to 3D, transformed, projected, and
/// rasterized to the nearest target pixel with a z-buffer (closest depth
/// wins; ties go to the lower source row, then column). Winners carry their
/// feature channels and flow confidence; `flow_magnitude` records the 2D
/// displacement norm. Target pixels nobody reached stay invalid with
/// visibility 0.
pub fn splat(state: &MemoryState, field: &Se3Field, rig: &CameraRig) -> MemoryState {
    let (h, w) = state.dim();
    assert_eq!(
        (h, w),
        field.dim(),
        "state and field dimensions must match"
    );
    let channels = state.channels();
    let mut out = MemoryState::empty(h, w, channels);
    let mut zbuf = Array2::from_elem((h, w), f64::INFINITY);

    for i in 0..h {
        for j in 0..w {
            if !state.valid[(i, j)] {
                continue;
            }
            let d = state.disparity[(i, j)];
            let p = match lift(j as f64, i as f64, d, rig) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let q = field.get(i, j).apply(&p);
            let (u, v, d_new) = match project(&q, rig) {
                Ok(t) => t,
                Err(_) => continue,
            };
            let tu = raster_round(u);
            let tv = raster_round(v);
            if tu < 0 || tv < 0 || tu >= w as i64 || tv >= h as i64 {
                continue;
            }
            let (ti, tj) = (tv as usize, tu as usize);
            // Row-major iteration means the first writer keeps ties.
            if q.z >= zbuf[(ti, tj)] - ZBUF_TIE {
                continue;
            }
            zbuf[(ti, tj)] = q.z;
            out.disparity[(ti, tj)] = d_new;
            out.valid[(ti, tj)] = true;
            out.visibility[(ti, tj)] = true;
            let du = u - j as f64;
            let dv = v - i as f64;
            out.flow_magnitude[(ti, tj)] = (du * du + dv * dv).sqrt();
            out.flow_confidence[(ti, tj)] = state.flow_confidence[(i, j)];
            for c in 0..channels {
                out.features[(ti, tj, c)] = state.features[(i, j, c)];
            }
        }
    }
    out
}
