//! Inter-frame motion: census patch matching on a stride grid, weighted
//! Gauss-Newton rigid estimation on the se3 tangent, per-object field
//! assembly, and forward alignment of the previous memory state.

use crate::geometry::{
    lift, project, solve_se3_normal_equations, splat, CameraRig, MemoryState, Se3, Se3Field,
};
use crate::stereo::{census_bits, StereoResult};
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("mode requires ground truth: {0}")]
    MissingGroundTruth(&'static str),
}

/// One matched pixel pair between consecutive frames.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    /// (u, v) in the previous frame.
    pub source: (f64, f64),
    /// (u, v) in the current frame.
    pub target: (f64, f64),
    pub d_source: f64,
    pub d_target: f64,
    /// Matching confidence in [0, 1]; near 0 on textureless patches.
    pub weight: f64,
}

/// Dense motion description for one frame transition.
#[derive(Debug, Clone)]
pub struct MotionEstimate {
    pub field: Se3Field,
    /// Flow of each t-1 pixel under its transform, (H, W, 2).
    pub flow: Array3<f64>,
    /// Matching confidence resampled per pixel, [0, 1].
    pub confidence: Array2<f64>,
    pub iterations_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    /// Copy the ground-truth field, confidence 1.
    Oracle,
    /// One rigid transform for the whole frame.
    GlobalRigid,
    /// One rigid transform per ground-truth label region.
    PerObjectRigid,
}

#[derive(Debug, Clone, Copy)]
pub struct MotionParams {
    /// Gauss-Newton iterations K.
    pub iterations: usize,
    /// Search radius of the correspondence matcher, pixels.
    pub search_radius: usize,
    /// Grid stride of the correspondence matcher, pixels.
    pub stride: usize,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            iterations: 16,
            search_radius: 8,
            stride: 4,
        }
    }
}

/// Image + stereo output of one frame, as the matcher consumes it.
#[derive(Clone, Copy)]
pub struct FrameObs<'a> {
    pub image: &'a Array2<f64>,
    pub stereo: &'a StereoResult,
}

/// Ground-truth inputs for the oracle and per-object modes.
#[derive(Clone, Copy)]
pub struct OracleMotion<'a> {
    pub field: Option<&'a Se3Field>,
    /// Labels on the t-1 grid.
    pub labels: Option<&'a Array2<usize>>,
}

/// Census patch radius (3x3 signatures per comparison).
const PATCH_RADIUS: isize = 1;
const PATCH_BITS: f64 = 9.0 * 48.0;
/// Cost margin (normalized bits) that saturates the matching weight.
const MARGIN_SCALE: f64 = 0.02;

/// Match census patches from `prev` to `curr` on a stride grid. The weight
/// combines the best cost with the margin to the best cost outside the
/// 8-neighborhood of the winner, so ambiguous (flat) patches score near 0.
pub fn match_frames(
    prev: FrameObs,
    curr: FrameObs,
    search_radius: usize,
    stride: usize,
) -> Vec<Correspondence> {
    let (h, w) = prev.image.dim();
    let census_prev = census_bits(prev.image);
    let census_curr = census_bits(curr.image);
    let r = search_radius as isize;

    // Offsets sorted so ties resolve to the smallest displacement.
    let mut offsets: Vec<(isize, isize)> = Vec::new();
    for dv in -r..=r {
        for du in -r..=r {
            offsets.push((du, dv));
        }
    }
    offsets.sort_by_key(|&(du, dv)| (du * du + dv * dv, dv, du));

    let patch_cost = |si: usize, sj: usize, ti: usize, tj: usize| -> f64 {
        let mut bits = 0u32;
        for py in -PATCH_RADIUS..=PATCH_RADIUS {
            for px in -PATCH_RADIUS..=PATCH_RADIUS {
                let a = census_prev[(
                    crate::grid::clamp_index(si as isize + py, h),
                    crate::grid::clamp_index(sj as isize + px, w),
                )];
                let b = census_curr[(
                    crate::grid::clamp_index(ti as isize + py, h),
                    crate::grid::clamp_index(tj as isize + px, w),
                )];
                bits += (a ^ b).count_ones();
            }
        }
        bits as f64 / PATCH_BITS
    };

    let mut out = Vec::new();
    let margin = stride.max(1);
    for i in (0..h).step_by(margin) {
        for j in (0..w).step_by(margin) {
            if !prev.stereo.valid[(i, j)] {
                continue;
            }
            let mut best = f64::MAX;
            let mut best_off = (0isize, 0isize);
            let mut costs: Vec<((isize, isize), f64)> = Vec::with_capacity(offsets.len());
            for &(du, dv) in &offsets {
                let ti = i as isize + dv;
                let tj = j as isize + du;
                if ti < 0 || tj < 0 || ti >= h as isize || tj >= w as isize {
                    continue;
                }
                let c = patch_cost(i, j, ti as usize, tj as usize);
                costs.push(((du, dv), c));
                if c < best {
                    best = c;
                    best_off = (du, dv);
                }
            }
            if best == f64::MAX {
                continue;
            }
            let (ti, tj) = (
                (i as isize + best_off.1) as usize,
                (j as isize + best_off.0) as usize,
            );
            if !curr.stereo.valid[(ti, tj)] {
                continue;
            }
            // Second-best outside the winner's 8-neighborhood.
            let second = costs
                .iter()
                .filter(|((du, dv), _)| {
                    (du - best_off.0).abs().max((dv - best_off.1).abs()) > 1
                })
                .map(|&(_, c)| c)
                .fold(f64::MAX, f64::min);
            let margin_score = if second == f64::MAX {
                0.0
            } else {
                ((second - best) / MARGIN_SCALE).clamp(0.0, 1.0)
            };
            let weight = (1.0 - best).max(0.0) * margin_score;
            out.push(Correspondence {
                source: (j as f64, i as f64),
                target: (tj as f64, ti as f64),
                d_source: prev.stereo.disparity[(i, j)],
                d_target: curr.stereo.disparity[(ti, tj)],
                weight,
            });
        }
    }
    out
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

struct LiftedPair {
    x: Vector3<f64>,
    y: Vector3<f64>,
    w: f64,
}

fn lift_pairs(corr: &[Correspondence], rig: &CameraRig) -> Vec<LiftedPair> {
    corr.iter()
        .filter(|c| c.weight > 0.0)
        .filter_map(|c| {
            let x = lift(c.source.0, c.source.1, c.d_source, rig).ok()?;
            let y = lift(c.target.0, c.target.1, c.d_target, rig).ok()?;
            Some(LiftedPair { x, y, w: c.weight })
        })
        .collect()
}

fn weighted_residual(t: &Se3, pairs: &[LiftedPair]) -> f64 {
    pairs
        .iter()
        .map(|p| p.w * (t.apply(&p.x) - p.y).norm_squared())
        .sum()
}

fn gn_solve(pairs: &[LiftedPair], iterations: usize) -> Result<(Se3, usize), MotionError> {
    if pairs.len() < 3 {
        return Err(MotionError::DegenerateGeometry(format!(
            "{} weighted correspondences, need at least 3",
            pairs.len()
        )));
    }
    let mut t = Se3::identity();
    let mut best = t;
    let mut best_res = weighted_residual(&t, pairs);
    let mut used = 0usize;
    for _ in 0..iterations {
        used += 1;
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for p in pairs {
            let tp = t.apply(&p.x);
            let r = tp - p.y;
            // J = [I | -[tp]x] for a twist (translation, rotation).
            let s = skew(&tp);
            let mut j = Matrix6::<f64>::zeros().fixed_view_mut::<3, 6>(0, 0).into_owned();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-s));
            jtj += p.w * j.transpose() * j;
            jtr += p.w * j.transpose() * r;
        }
        let step = solve_se3_normal_equations(&jtj, &(-jtr)).ok_or_else(|| {
            MotionError::DegenerateGeometry("rank-deficient normal equations".into())
        })?;
        if step.norm() < 1e-14 {
            break;
        }
        // Halve the step until the residual does not increase.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..10 {
            let cand = Se3::exp(&(step * scale)).compose(&t);
            let res = weighted_residual(&cand, pairs);
            if res <= best_res {
                t = cand;
                best_res = res;
                best = cand;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((best, used))
}

/// Weighted point-to-point Gauss-Newton; the returned residual never
/// exceeds the identity transform's.
pub fn estimate_rigid_gn(
    correspondences: &[Correspondence],
    rig: &CameraRig,
    iterations: usize,
) -> Result<Se3, MotionError> {
    let pairs = lift_pairs(correspondences, rig);
    gn_solve(&pairs, iterations).map(|(t, _)| t)
}

/// Solve, drop residuals above 3x the median, and re-solve on the inliers.
fn gn_solve_trimmed(
    pairs: Vec<LiftedPair>,
    iterations: usize,
) -> Result<(Se3, usize), MotionError> {
    let (t0, used0) = gn_solve(&pairs, iterations)?;
    let mut residuals: Vec<f64> = pairs
        .iter()
        .map(|p| (t0.apply(&p.x) - p.y).norm())
        .collect();
    let mut sorted = residuals.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    if median < 1e-12 {
        return Ok((t0, used0));
    }
    let keep: Vec<LiftedPair> = pairs
        .into_iter()
        .zip(residuals.drain(..))
        .filter(|(_, r)| *r <= 3.0 * median)
        .map(|(p, _)| p)
        .collect();
    match gn_solve(&keep, iterations) {
        Ok((t, used)) => Ok((t, used0 + used)),
        Err(_) => Ok((t0, used0)),
    }
}

/// Estimate the dense motion field for one frame transition.
///
/// `oracle.field` feeds [`MotionMode::Oracle`]; `oracle.labels` (t-1 grid)
/// feeds [`MotionMode::PerObjectRigid`]. Degenerate regions fall back to the
/// identity transform with confidence 0.
pub fn estimate_field(
    prev: FrameObs,
    curr: FrameObs,
    mode: MotionMode,
    rig: &CameraRig,
    params: &MotionParams,
    oracle: OracleMotion,
) -> Result<MotionEstimate, MotionError> {
    let (h, w) = prev.image.dim();
    let (field, confidence, iterations_used) = match mode {
        MotionMode::Oracle => {
            let gt = oracle
                .field
                .ok_or(MotionError::MissingGroundTruth("oracle mode needs gt field"))?;
            (gt.clone(), Array2::from_elem((h, w), 1.0), 0)
        }
        MotionMode::GlobalRigid => {
            let corr = match_frames(prev, curr, params.search_radius, params.stride);
            let conf = resample_confidence(&corr, h, w, params.stride);
            let pairs = lift_pairs(&corr, rig);
            match gn_solve_trimmed(pairs, params.iterations) {
                Ok((t, used)) => (Se3Field::uniform(t, h, w), conf, used),
                Err(_) => (Se3Field::identity(h, w), Array2::zeros((h, w)), 0),
            }
        }
        MotionMode::PerObjectRigid => {
            let labels = oracle.labels.ok_or(MotionError::MissingGroundTruth(
                "per-object mode needs labels",
            ))?;
            let corr = match_frames(prev, curr, params.search_radius, params.stride);
            let mut conf = resample_confidence(&corr, h, w, params.stride);
            let max_label = labels.iter().copied().max().unwrap_or(0);
            let mut transforms = vec![Se3::identity(); max_label + 1];
            let mut solved = vec![false; max_label + 1];
            let mut iterations_used = 0usize;
            for label in 0..=max_label {
                let subset: Vec<Correspondence> = corr
                    .iter()
                    .copied()
                    .filter(|c| {
                        labels[(c.source.1 as usize, c.source.0 as usize)] == label
                    })
                    .collect();
                let pairs = lift_pairs(&subset, rig);
                if let Ok((t, used)) = gn_solve_trimmed(pairs, params.iterations) {
                    transforms[label] = t;
                    solved[label] = true;
                    iterations_used = iterations_used.max(used);
                }
            }
            let field = Se3Field::from_fn(h, w, |i, j| transforms[labels[(i, j)]]);
            for i in 0..h {
                for j in 0..w {
                    if !solved[labels[(i, j)]] {
                        conf[(i, j)] = 0.0;
                    }
                }
            }
            (field, conf, iterations_used)
        }
    };

    // Flow of every pixel under its transform, using the previous frame's
    // disparity; pixels without a usable disparity keep zero flow.
    let mut flow = Array3::zeros((h, w, 2));
    for i in 0..h {
        for j in 0..w {
            if !prev.stereo.valid[(i, j)] && mode != MotionMode::Oracle {
                continue;
            }
            let d = prev.stereo.disparity[(i, j)];
            let p = match lift(j as f64, i as f64, d, rig) {
                Ok(p) => p,
                Err(_) => continue,
            };
            if let Ok((u2, v2, _)) = project(&field.get(i, j).apply(&p), rig) {
                flow[(i, j, 0)] = u2 - j as f64;
                flow[(i, j, 1)] = v2 - i as f64;
            }
        }
    }

    Ok(MotionEstimate {
        field,
        flow,
        confidence,
        iterations_used,
    })
}

/// Nearest-grid-point lookup of correspondence weights.
fn resample_confidence(
    corr: &[Correspondence],
    h: usize,
    w: usize,
    stride: usize,
) -> Array2<f64> {
    let stride = stride.max(1);
    let (gh, gw) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut grid = Array2::zeros((gh, gw));
    for c in corr {
        let gi = c.source.1 as usize / stride;
        let gj = c.source.0 as usize / stride;
        grid[(gi, gj)] = c.weight;
    }
    Array2::from_shape_fn((h, w), |(i, j)| {
        let gi = ((i as f64 / stride as f64).round() as usize).min(gh - 1);
        let gj = ((j as f64 / stride as f64).round() as usize).min(gw - 1);
        grid[(gi, gj)]
    })
}

/// Warp the previous memory state into the current frame (Eq.-style
/// lift/transform/project via the z-buffer splat). Splat holes mark pixels
/// of the current frame that were not visible in the previous one.
pub fn align_previous(
    prev_state: &MemoryState,
    estimate: &MotionEstimate,
    rig: &CameraRig,
) -> MemoryState {
    let mut state = prev_state.clone();
    state.flow_confidence = estimate.confidence.clone();
    splat(&state, &estimate.field, rig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{MotionSpec, ObjectKind, ObjectSpec, Scene, SceneConfig};
    use crate::stereo::{extract_features, FeatureMap, FEATURE_CHANNELS};
    use approx::assert_abs_diff_eq;
    use ndarray::Array3 as NdArray3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig() -> CameraRig {
        CameraRig::new(100.0, 100.0, 50.0, 50.0, 0.5, 101, 101).unwrap()
    }

    /// StereoResult wrapper around a given disparity map (all valid).
    fn oracle_stereo(disparity: &Array2<f64>, image: &Array2<f64>) -> StereoResult {
        let f = extract_features(image);
        StereoResult {
            disparity: disparity.clone(),
            left_features: f.clone(),
            right_features: f,
            valid: Array2::from_elem(disparity.dim(), true),
        }
    }

    fn white_noise(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.gen_range(0.15..0.65))
    }

    #[test]
    fn identical_frames_zero_displacement_high_weight() {
        let img = white_noise(64, 64, 7);
        let d = Array2::from_elem((64, 64), 10.0);
        let st = oracle_stereo(&d, &img);
        let corr = match_frames(
            FrameObs { image: &img, stereo: &st },
            FrameObs { image: &img, stereo: &st },
            6,
            4,
        );
        assert!(corr.len() > 200);
        for c in &corr {
            assert_eq!(c.source, c.target, "displacement must be zero");
            assert!(c.weight >= 0.9, "weight {} at {:?}", c.weight, c.source);
        }
    }

    #[test]
    fn integer_shift_recovered_exactly() {
        let (h, w) = (64, 96);
        let img = white_noise(h, w, 8);
        let mut shifted = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                shifted[(i, j)] = img[(i, (j + w - 3) % w)];
            }
        }
        let d = Array2::from_elem((h, w), 10.0);
        let sp = oracle_stereo(&d, &img);
        let sc = oracle_stereo(&d, &shifted);
        let corr = match_frames(
            FrameObs { image: &img, stereo: &sp },
            FrameObs { image: &shifted, stereo: &sc },
            6,
            4,
        );
        let exact = corr
            .iter()
            .filter(|c| c.target.0 - c.source.0 == 3.0 && c.target.1 == c.source.1)
            .count();
        assert!(
            exact as f64 >= 0.9 * corr.len() as f64,
            "{exact}/{} exact",
            corr.len()
        );
    }

    #[test]
    fn flat_patches_low_weight() {
        let (h, w) = (48, 48);
        let mut img = white_noise(h, w, 9);
        for i in 8..28 {
            for j in 8..28 {
                img[(i, j)] = 0.4;
            }
        }
        let d = Array2::from_elem((h, w), 10.0);
        let st = oracle_stereo(&d, &img);
        let corr = match_frames(
            FrameObs { image: &img, stereo: &st },
            FrameObs { image: &img, stereo: &st },
            6,
            4,
        );
        let mut flat_seen = 0usize;
        for c in &corr {
            let (u, v) = (c.source.0 as usize, c.source.1 as usize);
            // Deep interior of the flat square: census patch fully flat.
            if (14..=22).contains(&u) && (14..=22).contains(&v) {
                flat_seen += 1;
                assert!(c.weight < 0.2, "flat weight {} at ({u},{v})", c.weight);
            }
        }
        assert!(flat_seen >= 4);
    }

    fn synth_correspondences(
        t: &Se3,
        rig: &CameraRig,
        n: usize,
        seed: u64,
    ) -> Vec<Correspondence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let u = rng.gen_range(5.0..95.0);
            let v = rng.gen_range(5.0..95.0);
            let d = rng.gen_range(5.0..40.0);
            let x = lift(u, v, d, rig).unwrap();
            let y = t.apply(&x);
            if let Ok((u2, v2, d2)) = project(&y, rig) {
                out.push(Correspondence {
                    source: (u, v),
                    target: (u2, v2),
                    d_source: d,
                    d_target: d2,
                    weight: rng.gen_range(0.5..1.0),
                });
            }
        }
        out
    }

    fn pose_error(a: &Se3, b: &Se3) -> (f64, f64) {
        let rel = a.compose(&b.inverse());
        (rel.rotation_angle(), rel.translation().norm())
    }

    #[test]
    fn gn_zero_motion_is_identity() {
        let rig = rig();
        let corr = synth_correspondences(&Se3::identity(), &rig, 50, 3);
        let t = estimate_rigid_gn(&corr, &rig, 16).unwrap();
        let (ang, tr) = pose_error(&t, &Se3::identity());
        assert!(ang < 1e-10 && tr < 1e-10, "angle {ang}, translation {tr}");
    }

    #[test]
    fn gn_recovers_known_motion() {
        let rig = rig();
        let truth = Se3::from_axis_angle(&Vector3::y(), 5.0_f64.to_radians())
            .compose(&Se3::from_translation(Vector3::new(0.05, 0.0, 0.02)));
        let corr = synth_correspondences(&truth, &rig, 120, 4);
        let t = estimate_rigid_gn(&corr, &rig, 16).unwrap();
        let (ang, tr) = pose_error(&t, &truth);
        assert!(ang < 1e-6, "rotation error {ang}");
        assert!(tr < 1e-6, "translation error {tr}");
    }

    #[test]
    fn gn_degenerate_cases() {
        let rig = rig();
        let truth = Se3::from_translation(Vector3::new(0.01, 0.0, 0.0));
        let mut corr = synth_correspondences(&truth, &rig, 2, 5);
        assert!(matches!(
            estimate_rigid_gn(&corr, &rig, 16),
            Err(MotionError::DegenerateGeometry(_))
        ));
        // Collinear points: all on the optical axis ray.
        corr = (1..6)
            .map(|k| {
                let d = 50.0 / k as f64;
                Correspondence {
                    source: (50.0, 50.0),
                    target: (50.0, 50.0),
                    d_source: d,
                    d_target: d,
                    weight: 1.0,
                }
            })
            .collect();
        assert!(matches!(
            estimate_rigid_gn(&corr, &rig, 16),
            Err(MotionError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn gn_random_motions_recovered() {
        let rig = rig();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let angle = rng.gen_range(-0.17..0.17); // < 10 degrees
            let t = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let truth = Se3::from_axis_angle(&axis, angle).compose(&Se3::from_translation(t));
            let corr = synth_correspondences(&truth, &rig, 80, 100 + trial);
            let rec = estimate_rigid_gn(&corr, &rig, 16).unwrap();
            let (ang, tr) = pose_error(&rec, &truth);
            assert!(ang < 1e-6 && tr < 1e-6, "trial {trial}: {ang}, {tr}");
        }
    }

    #[test]
    fn gn_residual_not_worse_than_identity() {
        let rig = rig();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let truth = Se3::from_axis_angle(&Vector3::x(), 0.05);
        let mut corr = synth_correspondences(&truth, &rig, 60, 6);
        // Corrupt a third of the targets to make the fit imperfect.
        for c in corr.iter_mut().take(20) {
            c.d_target += rng.gen_range(-3.0..3.0);
        }
        let rec = estimate_rigid_gn(&corr, &rig, 16).unwrap();
        let pairs = lift_pairs(&corr, &rig);
        assert!(
            weighted_residual(&rec, &pairs) <= weighted_residual(&Se3::identity(), &pairs) + 1e-12
        );
    }

    #[test]
    fn oracle_mode_passthrough() {
        let r = rig();
        let mut cfg = SceneConfig::basic(r, 10.0, 3);
        cfg.camera = MotionSpec {
            velocity: Vector3::new(0.03, 0.0, 0.02),
            rotation_axis: Vector3::y(),
            rotation_rate: 0.001,
        };
        let scene = Scene::build(cfg).unwrap();
        let prev = scene.render_sample(0).unwrap();
        let curr = scene.render_sample(1).unwrap();
        let sp = oracle_stereo(&prev.gt_disparity, &prev.left);
        let sc = oracle_stereo(&curr.gt_disparity, &curr.left);
        let est = estimate_field(
            FrameObs { image: &prev.left, stereo: &sp },
            FrameObs { image: &curr.left, stereo: &sc },
            MotionMode::Oracle,
            &r,
            &MotionParams::default(),
            OracleMotion {
                field: Some(&curr.gt_se3_field),
                labels: None,
            },
        )
        .unwrap();
        assert_eq!(est.field, curr.gt_se3_field);
        assert!(est.confidence.iter().all(|&c| c == 1.0));
        // Estimate flow agrees with analytic gt flow (same disparity, same field).
        for i in 0..101 {
            for j in 0..101 {
                assert!((est.flow[(i, j, 0)] - curr.gt_flow[(i, j, 0)]).abs() < 1e-9);
                assert!((est.flow[(i, j, 1)] - curr.gt_flow[(i, j, 1)]).abs() < 1e-9);
            }
        }

        assert!(matches!(
            estimate_field(
                FrameObs { image: &prev.left, stereo: &sp },
                FrameObs { image: &curr.left, stereo: &sc },
                MotionMode::Oracle,
                &r,
                &MotionParams::default(),
                OracleMotion { field: None, labels: None },
            ),
            Err(MotionError::MissingGroundTruth(_))
        ));
    }

    #[test]
    fn global_rigid_static_scene_low_fepe() {
        let r = rig();
        let mut cfg = SceneConfig::basic(r, 10.0, 2);
        cfg.objects.push(ObjectSpec {
            kind: ObjectKind::Plane {
                half_width: 2.0,
                half_height: 2.0,
            },
            center: Vector3::new(0.5, 0.3, 5.0),
            motion: MotionSpec::fixed(),
        });
        cfg.camera = MotionSpec {
            velocity: Vector3::new(0.04, 0.01, 0.03),
            rotation_axis: Vector3::z(),
            rotation_rate: 0.002,
        };
        let scene = Scene::build(cfg).unwrap();
        let prev = scene.render_sample(0).unwrap();
        let curr = scene.render_sample(1).unwrap();
        let sp = oracle_stereo(&prev.gt_disparity, &prev.left);
        let sc = oracle_stereo(&curr.gt_disparity, &curr.left);
        let est = estimate_field(
            FrameObs { image: &prev.left, stereo: &sp },
            FrameObs { image: &curr.left, stereo: &sc },
            MotionMode::GlobalRigid,
            &r,
            &MotionParams::default(),
            OracleMotion { field: None, labels: None },
        )
        .unwrap();
        let mask = Array2::from_elem((101, 101), true);
        let (fepe, _) = crate::metrics::fepe_optical(&est.flow, &curr.gt_flow, &mask).unwrap();
        assert!(fepe < 0.3, "FEPE_of = {fepe}");
    }

    #[test]
    fn per_object_beats_global_on_opposing_motion() {
        let r = rig();
        let mut cfg = SceneConfig::basic(r, 10.0, 2);
        let moving = |x: f64, vx: f64| ObjectSpec {
            kind: ObjectKind::Plane {
                half_width: 1.2,
                half_height: 2.8,
            },
            center: Vector3::new(x, 0.0, 5.0),
            motion: MotionSpec {
                velocity: Vector3::new(vx, 0.0, 0.0),
                rotation_axis: Vector3::z(),
                rotation_rate: 0.0,
            },
        };
        cfg.objects.push(moving(-1.4, 0.08));
        cfg.objects.push(moving(1.4, -0.08));
        let scene = Scene::build(cfg).unwrap();
        let prev = scene.render_sample(0).unwrap();
        let curr = scene.render_sample(1).unwrap();
        let sp = oracle_stereo(&prev.gt_disparity, &prev.left);
        let sc = oracle_stereo(&curr.gt_disparity, &curr.left);
        let p = FrameObs { image: &prev.left, stereo: &sp };
        let c = FrameObs { image: &curr.left, stereo: &sc };
        let params = MotionParams::default();

        let global = estimate_field(
            p, c, MotionMode::GlobalRigid, &r, &params,
            OracleMotion { field: None, labels: None },
        )
        .unwrap();
        let per_obj = estimate_field(
            p, c, MotionMode::PerObjectRigid, &r, &params,
            OracleMotion { field: None, labels: Some(&prev.labels) },
        )
        .unwrap();
        let mask = Array2::from_elem((101, 101), true);
        let (fepe_g, _) =
            crate::metrics::fepe_optical(&global.flow, &curr.gt_flow, &mask).unwrap();
        let (fepe_o, _) =
            crate::metrics::fepe_optical(&per_obj.flow, &curr.gt_flow, &mask).unwrap();
        assert!(
            fepe_o < fepe_g,
            "per-object {fepe_o} must beat global {fepe_g}"
        );
    }

    #[test]
    fn align_previous_identity_and_visibility() {
        let r = rig();
        let (h, w) = (r.height, r.width);
        let mut state = MemoryState::empty(h, w, FEATURE_CHANNELS);
        state.disparity.fill(10.0);
        state.valid.fill(true);
        let est = MotionEstimate {
            field: Se3Field::identity(h, w),
            flow: NdArray3::zeros((h, w, 2)),
            confidence: Array2::from_elem((h, w), 0.8),
            iterations_used: 0,
        };
        let out = align_previous(&state, &est, &r);
        for i in 0..h {
            for j in 0..w {
                if out.visibility[(i, j)] {
                    assert_abs_diff_eq!(out.disparity[(i, j)], 10.0);
                    assert_abs_diff_eq!(out.flow_confidence[(i, j)], 0.8);
                }
            }
        }
    }

    #[test]
    fn align_oracle_matches_current_gt() {
        let r = rig();
        let mut cfg = SceneConfig::basic(r, 10.0, 2);
        cfg.objects.push(ObjectSpec {
            kind: ObjectKind::Plane {
                half_width: 2.0,
                half_height: 2.0,
            },
            center: Vector3::new(0.0, 0.0, 5.0),
            motion: MotionSpec::fixed(),
        });
        cfg.camera = MotionSpec {
            velocity: Vector3::new(0.05, 0.0, 0.04),
            rotation_axis: Vector3::y(),
            rotation_rate: 0.002,
        };
        let scene = Scene::build(cfg).unwrap();
        let prev = scene.render_sample(0).unwrap();
        let curr = scene.render_sample(1).unwrap();
        let sp = oracle_stereo(&prev.gt_disparity, &prev.left);
        let mut state = sp.to_memory_state();
        state.valid.fill(true);
        let est = MotionEstimate {
            field: curr.gt_se3_field.clone(),
            flow: curr.gt_flow.clone(),
            confidence: Array2::from_elem((101, 101), 1.0),
            iterations_used: 0,
        };
        let out = align_previous(&state, &est, &r);
        let (mut close, mut visible) = (0usize, 0usize);
        for i in 0..101 {
            for j in 0..101 {
                if out.visibility[(i, j)] {
                    visible += 1;
                    if (out.disparity[(i, j)] - curr.gt_disparity[(i, j)]).abs() < 0.5 {
                        close += 1;
                    }
                }
            }
        }
        assert!(visible > 8000);
        assert!(
            close as f64 >= 0.95 * visible as f64,
            "{close}/{visible} within 0.5 px"
        );
    }

    #[test]
    fn object_leaving_frame_leaves_holes() {
        let r = rig();
        let mut cfg = SceneConfig::basic(r, 10.0, 2);
        // Plane occupying the right half, moving right fast.
        cfg.objects.push(ObjectSpec {
            kind: ObjectKind::Plane {
                half_width: 1.2,
                half_height: 2.8,
            },
            center: Vector3::new(1.3, 0.0, 5.0),
            motion: MotionSpec {
                velocity: Vector3::new(0.6, 0.0, 0.0),
                rotation_axis: Vector3::z(),
                rotation_rate: 0.0,
            },
        });
        let scene = Scene::build(cfg).unwrap();
        let prev = scene.render_sample(0).unwrap();
        let curr = scene.render_sample(1).unwrap();
        let sp = oracle_stereo(&prev.gt_disparity, &prev.left);
        let mut state = sp.to_memory_state();
        state.valid.fill(true);
        let est = MotionEstimate {
            field: curr.gt_se3_field.clone(),
            flow: curr.gt_flow.clone(),
            confidence: Array2::from_elem((101, 101), 1.0),
            iterations_used: 0,
        };
        let out = align_previous(&state, &est, &r);
        // The vacated strip (object gone, background was hidden at t-1)
        // must be marked not visible.
        let (mut holes, mut strip) = (0usize, 0usize);
        for i in 0..101 {
            for j in 0..101 {
                if prev.labels[(i, j)] == 1 && curr.labels[(i, j)] == 0 {
                    strip += 1;
                    if !out.visibility[(i, j)] {
                        holes += 1;
                    }
                }
            }
        }
        assert!(strip > 500, "strip too small: {strip}");
        assert!(
            holes as f64 >= 0.9 * strip as f64,
            "{holes}/{strip} splat holes in the vacated strip"
        );
    }

    #[test]
    fn unused_feature_map_type_is_consistent() {
        // FeatureMap round-trips through MemoryState with its channel count.
        let img = white_noise(12, 12, 2);
        let f: FeatureMap = extract_features(&img);
        assert_eq!(f.data.dim().2, FEATURE_CHANNELS);
    }
}
