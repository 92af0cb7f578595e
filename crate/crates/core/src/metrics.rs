//! Evaluation suite: temporal end-point error over ground-truth-traced
//! pixel pairs, per-pixel disparity EPE, flow end-point errors, validity
//! masking, and count-weighted aggregation across frames.

use crate::geometry::{lift, CameraRig};
use crate::grid::{bilinear, in_image};
use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no traced pairs to evaluate")]
    EmptyPairSet,
    #[error("no masked pixels to evaluate")]
    EmptyMask,
}

/// Validity window bounds shared by every metric (disparity in pixels).
pub const VALID_DISPARITY_MIN: f64 = 1.0;
pub const VALID_DISPARITY_MAX: f64 = 210.0;
pub const VALID_FLOW_MAX: f64 = 210.0;
/// Denominator guard of the relative temporal error.
pub const TEPE_R_EPSILON: f64 = 1e-3;

/// A t-1 pixel traced to its ground-truth position at t, with predicted and
/// true disparities at both ends (t-side values sampled bilinearly).
#[derive(Debug, Clone, Copy)]
pub struct TracedPair {
    /// Source pixel, t-1 grid.
    pub row: usize,
    pub col: usize,
    /// Ground-truth landing position at t.
    pub x: f64,
    pub y: f64,
    pub d_pred_prev: f64,
    pub d_pred_curr: f64,
    pub d_gt_prev: f64,
    pub d_gt_curr: f64,
}

impl TracedPair {
    /// Signed predicted disparity change across the pair.
    pub fn delta_pred(&self) -> f64 {
        self.d_pred_curr - self.d_pred_prev
    }

    /// Signed ground-truth disparity change.
    pub fn delta_gt(&self) -> f64 {
        self.d_gt_curr - self.d_gt_prev
    }
}

/// Pixels kept by every metric: disparity inside [1, 210] px and flow
/// magnitude at most 210 px.
pub fn validity_mask(d_gt: &Array2<f64>, flow_gt: &Array3<f64>) -> Array2<bool> {
    let (h, w) = d_gt.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let d = d_gt[(i, j)];
        let fm = (flow_gt[(i, j, 0)].powi(2) + flow_gt[(i, j, 1)].powi(2)).sqrt();
        (VALID_DISPARITY_MIN..=VALID_DISPARITY_MAX).contains(&d) && fm <= VALID_FLOW_MAX
    })
}

/// Trace every valid t-1 pixel through the ground-truth flow and sample the
/// t-side maps bilinearly. Pairs leaving the image or the validity window at
/// either end are dropped.
pub fn trace(
    flow_gt: &Array3<f64>,
    d_pred_prev: &Array2<f64>,
    d_pred_curr: &Array2<f64>,
    d_gt_prev: &Array2<f64>,
    d_gt_curr: &Array2<f64>,
) -> Vec<TracedPair> {
    let (h, w) = d_gt_prev.dim();
    let mut pairs = Vec::new();
    let window = VALID_DISPARITY_MIN..=VALID_DISPARITY_MAX;
    for i in 0..h {
        for j in 0..w {
            let fu = flow_gt[(i, j, 0)];
            let fv = flow_gt[(i, j, 1)];
            if (fu * fu + fv * fv).sqrt() > VALID_FLOW_MAX {
                continue;
            }
            let d_prev = d_gt_prev[(i, j)];
            if !window.contains(&d_prev) {
                continue;
            }
            let x = j as f64 + fu;
            let y = i as f64 + fv;
            if !in_image(x, y, w, h) {
                continue;
            }
            let d_curr = bilinear(d_gt_curr, x, y);
            if !window.contains(&d_curr) {
                continue;
            }
            pairs.push(TracedPair {
                row: i,
                col: j,
                x,
                y,
                d_pred_prev: d_pred_prev[(i, j)],
                d_pred_curr: bilinear(d_pred_curr, x, y),
                d_gt_prev: d_prev,
                d_gt_curr: d_curr,
            });
        }
    }
    pairs
}

/// Temporal end-point error over traced pairs:
/// (TEPE, fraction > 3 px, relative TEPE, fraction of relative > 1).
pub fn tepe(pairs: &[TracedPair]) -> Result<(f64, f64, f64, f64), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyPairSet);
    }
    let n = pairs.len() as f64;
    let (mut sum, mut over3, mut rel_sum, mut rel_over1) = (0.0, 0.0, 0.0, 0.0);
    for p in pairs {
        let err = (p.delta_pred() - p.delta_gt()).abs();
        sum += err;
        if err > 3.0 {
            over3 += 1.0;
        }
        let rel = err / (p.delta_gt().abs() + TEPE_R_EPSILON);
        rel_sum += rel;
        if rel > 1.0 {
            rel_over1 += 1.0;
        }
    }
    Ok((sum / n, over3 / n, rel_sum / n, rel_over1 / n))
}

/// Per-pixel disparity end-point error over a mask: (EPE, fraction > 3 px).
pub fn epe(
    d_pred: &Array2<f64>,
    d_gt: &Array2<f64>,
    mask: &Array2<bool>,
) -> Result<(f64, f64), MetricsError> {
    let (mut sum, mut over3, mut n) = (0.0, 0.0, 0usize);
    for (idx, &keep) in mask.indexed_iter() {
        if !keep {
            continue;
        }
        let err = (d_pred[idx] - d_gt[idx]).abs();
        sum += err;
        if err > 3.0 {
            over3 += 1.0;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok((sum / n as f64, over3 / n as f64))
}

/// Optical-flow end-point error in pixels: (FEPE, fraction > 1 px).
pub fn fepe_optical(
    flow_pred: &Array3<f64>,
    flow_gt: &Array3<f64>,
    mask: &Array2<bool>,
) -> Result<(f64, f64), MetricsError> {
    let (mut sum, mut over1, mut n) = (0.0, 0.0, 0usize);
    for (idx, &keep) in mask.indexed_iter() {
        if !keep {
            continue;
        }
        let du = flow_pred[(idx.0, idx.1, 0)] - flow_gt[(idx.0, idx.1, 0)];
        let dv = flow_pred[(idx.0, idx.1, 1)] - flow_gt[(idx.0, idx.1, 1)];
        let err = (du * du + dv * dv).sqrt();
        sum += err;
        if err > 1.0 {
            over1 += 1.0;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok((sum / n as f64, over1 / n as f64))
}

/// Scene-flow end-point error: 3D displacement mismatch in meters, plus a
/// pixel-normalized variant (meters scaled by fx / depth at the source
/// pixel) and its > 1 px fraction. `d_gt_prev` supplies the depths.
pub fn fepe_scene(
    sf_pred: &Array3<f64>,
    sf_gt: &Array3<f64>,
    d_gt_prev: &Array2<f64>,
    rig: &CameraRig,
    mask: &Array2<bool>,
) -> Result<(f64, f64, f64), MetricsError> {
    let (mut sum_m, mut sum_px, mut over1, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (idx, &keep) in mask.indexed_iter() {
        if !keep {
            continue;
        }
        let mut sq = 0.0;
        for c in 0..3 {
            let d = sf_pred[(idx.0, idx.1, c)] - sf_gt[(idx.0, idx.1, c)];
            sq += d * d;
        }
        let err_m = sq.sqrt();
        let depth = match lift(idx.1 as f64, idx.0 as f64, d_gt_prev[idx], rig) {
            Ok(p) => p.z,
            Err(_) => continue,
        };
        let err_px = err_m * rig.fx / depth;
        sum_m += err_m;
        sum_px += err_px;
        if err_px > 1.0 {
            over1 += 1.0;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok((sum_m / n as f64, sum_px / n as f64, over1 / n as f64))
}

/// Metrics of one frame; counts record how many samples fed each family so
/// aggregation can weight correctly (zero counts contribute nothing).
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub tepe: f64,
    pub tepe_3px: f64,
    pub tepe_r: f64,
    pub tepe_r_100pct: f64,
    pub epe: f64,
    pub d3px: f64,
    pub fepe_of: f64,
    pub fepe_of_1px: f64,
    pub fepe_sf_m: f64,
    pub fepe_sf_px: f64,
    pub fepe_sf_1px: f64,
    pub pair_count: usize,
    pub pixel_count: usize,
    pub flow_count: usize,
}

/// Count-weighted aggregate over frames, with the per-frame breakdown kept.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub tepe: f64,
    pub tepe_3px: f64,
    pub tepe_r: f64,
    pub tepe_r_100pct: f64,
    pub epe: f64,
    pub d3px: f64,
    pub fepe_of: f64,
    pub fepe_of_1px: f64,
    pub fepe_sf_m: f64,
    pub fepe_sf_px: f64,
    pub fepe_sf_1px: f64,
    pub pair_count: usize,
    pub pixel_count: usize,
    pub flow_count: usize,
    pub frames: Vec<FrameMetrics>,
}

/// Pixel-count-weighted means across frames. Frames with a zero count for a
/// metric family simply do not contribute to that family.
pub fn aggregate(frames: &[FrameMetrics]) -> MetricReport {
    let mut r = MetricReport {
        frames: frames.to_vec(),
        ..MetricReport::default()
    };
    let (mut pairs, mut pixels, mut flows) = (0usize, 0usize, 0usize);
    for f in frames {
        let pw = f.pair_count as f64;
        r.tepe += f.tepe * pw;
        r.tepe_3px += f.tepe_3px * pw;
        r.tepe_r += f.tepe_r * pw;
        r.tepe_r_100pct += f.tepe_r_100pct * pw;
        pairs += f.pair_count;

        let xw = f.pixel_count as f64;
        r.epe += f.epe * xw;
        r.d3px += f.d3px * xw;
        pixels += f.pixel_count;

        let fw = f.flow_count as f64;
        r.fepe_of += f.fepe_of * fw;
        r.fepe_of_1px += f.fepe_of_1px * fw;
        r.fepe_sf_m += f.fepe_sf_m * fw;
        r.fepe_sf_px += f.fepe_sf_px * fw;
        r.fepe_sf_1px += f.fepe_sf_1px * fw;
        flows += f.flow_count;
    }
    if pairs > 0 {
        let inv = 1.0 / pairs as f64;
        r.tepe *= inv;
        r.tepe_3px *= inv;
        r.tepe_r *= inv;
        r.tepe_r_100pct *= inv;
    }
    if pixels > 0 {
        let inv = 1.0 / pixels as f64;
        r.epe *= inv;
        r.d3px *= inv;
    }
    if flows > 0 {
        let inv = 1.0 / flows as f64;
        r.fepe_of *= inv;
        r.fepe_of_1px *= inv;
        r.fepe_sf_m *= inv;
        r.fepe_sf_px *= inv;
        r.fepe_sf_1px *= inv;
    }
    r.pair_count = pairs;
    r.pixel_count = pixels;
    r.flow_count = flows;
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(delta_pred: f64, delta_gt: f64) -> TracedPair {
        TracedPair {
            row: 0,
            col: 0,
            x: 0.0,
            y: 0.0,
            d_pred_prev: 10.0,
            d_pred_curr: 10.0 + delta_pred,
            d_gt_prev: 10.0,
            d_gt_curr: 10.0 + delta_gt,
        }
    }

    #[test]
    fn validity_window_edges() {
        let d = array![[0.5, 100.0, 300.0, 1.0, 210.0]];
        let mut flow = Array3::zeros((1, 5, 2));
        flow[(0, 1, 0)] = 50.0;
        let m = validity_mask(&d, &flow);
        assert_eq!(
            m.iter().copied().collect::<Vec<_>>(),
            vec![false, true, false, true, true]
        );
        // Flow above the ceiling excludes an otherwise valid pixel.
        flow[(0, 1, 0)] = 300.0;
        assert!(!validity_mask(&d, &flow)[(0, 1)]);
    }

    #[test]
    fn tepe_single_pair_formulas() {
        let (t, t3, tr, tr100) = tepe(&[pair(2.0, 3.0)]).unwrap();
        assert_abs_diff_eq!(t, 1.0);
        assert_abs_diff_eq!(t3, 0.0);
        assert_abs_diff_eq!(tr, 1.0 / 3.001, epsilon = 1e-12);
        assert_abs_diff_eq!(tr100, 0.0);
    }

    #[test]
    fn tepe_perfect_and_static_epsilon() {
        let (t, t3, tr, tr100) = tepe(&[pair(1.5, 1.5), pair(-2.0, -2.0)]).unwrap();
        assert_eq!((t, t3, tr, tr100), (0.0, 0.0, 0.0, 0.0));

        let (_, _, tr, tr100) = tepe(&[pair(0.01, 0.0)]).unwrap();
        assert_abs_diff_eq!(tr, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(tr100, 1.0);

        assert!(matches!(tepe(&[]), Err(MetricsError::EmptyPairSet)));
    }

    #[test]
    fn epe_bias_examples() {
        let gt = Array2::from_elem((4, 4), 10.0);
        let mask = Array2::from_elem((4, 4), true);
        assert_eq!(epe(&gt, &gt, &mask).unwrap(), (0.0, 0.0));
        let (e, d3) = epe(&gt.mapv(|v| v + 2.0), &gt, &mask).unwrap();
        assert_abs_diff_eq!(e, 2.0);
        assert_abs_diff_eq!(d3, 0.0);
        let (e, d3) = epe(&gt.mapv(|v| v + 4.0), &gt, &mask).unwrap();
        assert_abs_diff_eq!(e, 4.0);
        assert_abs_diff_eq!(d3, 1.0);
        let none = Array2::from_elem((4, 4), false);
        assert!(matches!(epe(&gt, &gt, &none), Err(MetricsError::EmptyMask)));
    }

    #[test]
    fn fepe_optical_offset_boundary_strict() {
        let gt = Array3::zeros((3, 3, 2));
        let mut pred = Array3::zeros((3, 3, 2));
        for i in 0..3 {
            for j in 0..3 {
                pred[(i, j, 0)] = 1.0;
            }
        }
        let mask = Array2::from_elem((3, 3), true);
        let (f, f1) = fepe_optical(&pred, &gt, &mask).unwrap();
        assert_abs_diff_eq!(f, 1.0);
        // Exactly 1 px is not "> 1 px".
        assert_abs_diff_eq!(f1, 0.0);
    }

    #[test]
    fn fepe_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w) = (64, 64);
        let rig = CameraRig::new(100.0, 100.0, 32.0, 32.0, 0.5, w, h).unwrap();
        let rand3 = |rng: &mut ChaCha8Rng| {
            Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(-2.0..2.0))
        };
        let sf_pred = rand3(&mut rng);
        let sf_gt = rand3(&mut rng);
        let d_prev = Array2::from_shape_fn((h, w), |_| rng.gen_range(5.0..50.0));
        let mask = Array2::from_shape_fn((h, w), |_| rng.gen_bool(0.8));
        let (m, px, over) = fepe_scene(&sf_pred, &sf_gt, &d_prev, &rig, &mask).unwrap();

        // Naive reference.
        let (mut sm, mut spx, mut so, mut n) = (0.0, 0.0, 0.0, 0);
        for i in 0..h {
            for j in 0..w {
                if !mask[(i, j)] {
                    continue;
                }
                let e = ((sf_pred[(i, j, 0)] - sf_gt[(i, j, 0)]).powi(2)
                    + (sf_pred[(i, j, 1)] - sf_gt[(i, j, 1)]).powi(2)
                    + (sf_pred[(i, j, 2)] - sf_gt[(i, j, 2)]).powi(2))
                .sqrt();
                let z = rig.focal_baseline() / d_prev[(i, j)];
                let epx = e * rig.fx / z;
                sm += e;
                spx += epx;
                if epx > 1.0 {
                    so += 1.0;
                }
                n += 1;
            }
        }
        assert!((m - sm / n as f64).abs() < 1e-9);
        assert!((px - spx / n as f64).abs() < 1e-9);
        assert!((over - so / n as f64).abs() < 1e-9);
    }

    #[test]
    fn trace_hand_built_2x2() {
        // Flow (1,0) everywhere: only the left column lands inside.
        let mut flow = Array3::zeros((2, 2, 2));
        for i in 0..2 {
            for j in 0..2 {
                flow[(i, j, 0)] = 1.0;
            }
        }
        let d_gt_prev = array![[10.0, 11.0], [12.0, 13.0]];
        let d_gt_curr = array![[11.0, 12.0], [13.0, 14.0]];
        let d_pred_prev = array![[10.5, 11.0], [12.0, 13.0]];
        let d_pred_curr = array![[11.0, 12.5], [13.0, 14.5]];
        let pairs = trace(&flow, &d_pred_prev, &d_pred_curr, &d_gt_prev, &d_gt_curr);
        assert_eq!(pairs.len(), 2);
        // (0,0) -> (0,1):
        assert_eq!((pairs[0].row, pairs[0].col), (0, 0));
        assert_abs_diff_eq!(pairs[0].d_gt_curr, 12.0);
        assert_abs_diff_eq!(pairs[0].delta_gt(), 2.0);
        assert_abs_diff_eq!(pairs[0].delta_pred(), 2.0);
        // (1,0) -> (1,1):
        assert_eq!((pairs[1].row, pairs[1].col), (1, 0));
        assert_abs_diff_eq!(pairs[1].delta_pred(), 2.5);
    }

    #[test]
    fn trace_zero_flow_identity() {
        let flow = Array3::zeros((3, 3, 2));
        let d = Array2::from_elem((3, 3), 20.0);
        let pairs = trace(&flow, &d, &d, &d, &d);
        assert_eq!(pairs.len(), 9);
        assert!(pairs.iter().all(|p| p.delta_pred() == 0.0 && p.delta_gt() == 0.0));
    }

    #[test]
    fn trace_drops_invalid_and_out_of_image() {
        let mut flow = Array3::zeros((2, 2, 2));
        flow[(0, 0, 1)] = 5.0; // leaves the 2x2 image
        let mut d_gt_prev = Array2::from_elem((2, 2), 10.0);
        d_gt_prev[(0, 1)] = 0.5; // below validity window
        let d = Array2::from_elem((2, 2), 10.0);
        let pairs = trace(&flow, &d, &d, &d_gt_prev, &d);
        assert_eq!(pairs.len(), 2);
        assert!(pairs.len() <= 4);
    }

    #[test]
    fn aggregate_weighted_means() {
        let f1 = FrameMetrics {
            frame: 1,
            epe: 1.0,
            pixel_count: 100,
            tepe: 0.5,
            pair_count: 10,
            ..FrameMetrics::default()
        };
        let f2 = FrameMetrics {
            frame: 2,
            epe: 3.0,
            pixel_count: 300,
            tepe: 0.5,
            pair_count: 30,
            ..FrameMetrics::default()
        };
        let single = aggregate(std::slice::from_ref(&f1));
        assert_abs_diff_eq!(single.epe, 1.0);
        assert_abs_diff_eq!(single.tepe, 0.5);

        let r = aggregate(&[f1, f2]);
        assert_abs_diff_eq!(r.epe, 2.5);
        assert_abs_diff_eq!(r.tepe, 0.5);
        assert_eq!(r.pixel_count, 400);
        assert_eq!(r.frames.len(), 2);
    }

    /// Threshold metrics never decrease as prediction noise grows.
    #[test]
    fn threshold_metrics_monotone_in_noise() {
        let (h, w) = (32, 32);
        let d_gt = Array2::from_shape_fn((h, w), |(i, j)| 20.0 + (i as f64 - j as f64) * 0.05);
        let mask = Array2::from_elem((h, w), true);
        let mut last = -1.0;
        for (k, sigma) in [0.0, 0.5, 1.0, 2.0].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(50);
            let noise = Array2::from_shape_fn((h, w), |_| {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                (-2.0 * a.max(1e-300).ln()).sqrt() * (std::f64::consts::TAU * b).cos()
            });
            // Same underlying draw scaled up: strictly more noise each step.
            let pred = &d_gt + &noise.mapv(|v| v * sigma);
            let (_, d3) = epe(&pred, &d_gt, &mask).unwrap();
            assert!(d3 >= last, "d3px must not decrease with noise (step {k})");
            last = d3;
        }
    }
}
