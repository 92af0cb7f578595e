//! Per-frame disparity via census block matching, plus the feature maps and
//! appearance confidence consumed by the fusion cues.
//!
//! Features are hand-crafted: 8 census bit-count octants (7x7 window, angle
//! sectors, ties count 0.5) and 2 absolute central-difference gradients, all
//! in [0, 1]. Matching cost is normalized census Hamming distance plus
//! 0.3 x normalized 7x7 SAD, winner-take-all with parabola sub-pixel
//! refinement and a 1 px left-right consistency check.

use crate::geometry::MemoryState;
use crate::grid::{bilinear_channel, clamp_index};
use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StereoError {
    #[error("max_disparity must lie in [2, 210], got {0}")]
    DisparityRangeInvalid(f64),
}

/// Census / SAD window radius (7x7 window).
pub const CENSUS_RADIUS: usize = 3;
/// Weight of normalized SAD relative to normalized Hamming cost.
pub const SAD_WEIGHT: f64 = 0.3;
/// Left-right consistency threshold in pixels.
pub const LR_THRESHOLD: f64 = 1.0;
/// Census bits in a 7x7 window, center excluded.
pub const CENSUS_BITS: u32 = 48;
/// Feature channels: 8 census octants + 2 gradients.
pub const FEATURE_CHANNELS: usize = 10;

/// (H, W, 10) per-pixel appearance features, every channel in [0, 1].
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn dim(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }
}

/// Output of the per-frame stereo front end.
#[derive(Debug, Clone)]
pub struct StereoResult {
    /// Disparity in pixels, clamped to [1, max_disparity] wherever a match
    /// was found; 0 where no candidate existed.
    pub disparity: Array2<f64>,
    pub left_features: FeatureMap,
    pub right_features: FeatureMap,
    /// Match found, in range, and left-right consistent.
    pub valid: Array2<bool>,
}

impl StereoResult {
    /// Package the stereo output as a memory state (the t=0 fused state and
    /// the input that motion alignment warps forward).
    pub fn to_memory_state(&self) -> MemoryState {
        let (h, w) = self.disparity.dim();
        let mut state = MemoryState::empty(h, w, FEATURE_CHANNELS);
        state.disparity = self.disparity.clone();
        state.features = self.left_features.data.clone();
        state.valid = self.valid.clone();
        state.visibility = self.valid.clone();
        state
    }
}

/// 48-bit census signature per pixel (strict greater-than, replicate pad).
pub(crate) fn census_bits(image: &Array2<f64>) -> Array2<u64> {
    let (h, w) = image.dim();
    let r = CENSUS_RADIUS as isize;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let center = image[(i, j)];
        let mut bits = 0u64;
        let mut k = 0u32;
        for dy in -r..=r {
            for dx in -r..=r {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let ni = clamp_index(i as isize + dy, h);
                let nj = clamp_index(j as isize + dx, w);
                if image[(ni, nj)] > center {
                    bits |= 1 << k;
                }
                k += 1;
            }
        }
        bits
    })
}

/// Octant (angle sector) of a window offset; boundary rays belong to the
/// sector they open. Each of the 8 sectors holds 6 of the 48 offsets.
fn octant(dy: isize, dx: isize) -> usize {
    let angle = (dy as f64).atan2(dx as f64);
    let k = ((angle + std::f64::consts::PI) / (std::f64::consts::PI / 4.0)).floor() as usize;
    k % 8
}

/// Hand-crafted appearance features; see module docs for the channel list.
pub fn extract_features(image: &Array2<f64>) -> FeatureMap {
    let (h, w) = image.dim();
    let r = CENSUS_RADIUS as isize;
    let mut data = Array3::zeros((h, w, FEATURE_CHANNELS));
    for i in 0..h {
        for j in 0..w {
            let center = image[(i, j)];
            let mut sums = [0.0f64; 8];
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ni = clamp_index(i as isize + dy, h);
                    let nj = clamp_index(j as isize + dx, w);
                    let v = image[(ni, nj)];
                    // Ties count half so flat regions sit at 0.5 exactly.
                    let b = if v > center {
                        1.0
                    } else if v < center {
                        0.0
                    } else {
                        0.5
                    };
                    sums[octant(dy, dx)] += b;
                }
            }
            for (c, s) in sums.iter().enumerate() {
                data[(i, j, c)] = s / 6.0;
            }
            let xm = image[(i, clamp_index(j as isize - 1, w))];
            let xp = image[(i, clamp_index(j as isize + 1, w))];
            let ym = image[(clamp_index(i as isize - 1, h), j)];
            let yp = image[(clamp_index(i as isize + 1, h), j)];
            data[(i, j, 8)] = (xp - xm).abs() / 2.0;
            data[(i, j, 9)] = (yp - ym).abs() / 2.0;
        }
    }
    FeatureMap { data }
}

/// Box-summed absolute difference between `a` and `b` shifted right by
/// `shift` columns (b sampled at j - shift), normalized by the clipped
/// window area. Entries where the shifted column leaves the image are f64::MAX.
fn sad_map(a: &Array2<f64>, b: &Array2<f64>, shift: isize) -> Array2<f64> {
    let (h, w) = a.dim();
    let r = CENSUS_RADIUS as isize;
    // Absolute-difference image with out-of-range marked.
    let mut ad = Array2::from_elem((h, w), f64::NAN);
    for i in 0..h {
        for j in 0..w {
            let js = j as isize - shift;
            if js >= 0 && js < w as isize {
                ad[(i, j)] = (a[(i, j)] - b[(i, js as usize)]).abs();
            }
        }
    }
    // Integral image over defined entries plus a parallel count.
    let mut integ = Array2::zeros((h + 1, w + 1));
    let mut count = Array2::zeros((h + 1, w + 1));
    for i in 0..h {
        for j in 0..w {
            let (v, c) = if ad[(i, j)].is_nan() {
                (0.0, 0.0)
            } else {
                (ad[(i, j)], 1.0)
            };
            integ[(i + 1, j + 1)] = v + integ[(i, j + 1)] + integ[(i + 1, j)] - integ[(i, j)];
            count[(i + 1, j + 1)] = c + count[(i, j + 1)] + count[(i + 1, j)] - count[(i, j)];
        }
    }
    let window = |m: &Array2<f64>, i: usize, j: usize| -> f64 {
        let i0 = (i as isize - r).max(0) as usize;
        let j0 = (j as isize - r).max(0) as usize;
        let i1 = (i + r as usize + 1).min(h);
        let j1 = (j + r as usize + 1).min(w);
        m[(i1, j1)] - m[(i0, j1)] - m[(i1, j0)] + m[(i0, j0)]
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let n = window(&count, i, j);
        if n == 0.0 || ad[(i, j)].is_nan() {
            f64::MAX
        } else {
            window(&integ, i, j) / n
        }
    })
}

/// Per-pixel winner-take-all disparity for one view. `sign` is +1 when the
/// match in the other view lies at j - d (left view), -1 for j + d.
fn match_view(
    census_a: &Array2<u64>,
    census_b: &Array2<u64>,
    image_a: &Array2<f64>,
    image_b: &Array2<f64>,
    max_disparity: usize,
    sign: isize,
) -> (Array2<f64>, Array2<bool>) {
    let (h, w) = image_a.dim();
    // cost[d-1] holds the cost map at integer disparity d.
    let costs: Vec<Array2<f64>> = (1..=max_disparity)
        .map(|d| {
            let shift = sign * d as isize;
            let sad = sad_map(image_a, image_b, shift);
            Array2::from_shape_fn((h, w), |(i, j)| {
                let js = j as isize - shift;
                if js < 0 || js >= w as isize {
                    return f64::MAX;
                }
                let ham = (census_a[(i, j)] ^ census_b[(i, js as usize)]).count_ones() as f64;
                ham / CENSUS_BITS as f64 + SAD_WEIGHT * sad[(i, j)] / 49.0
            })
        })
        .collect();

    let mut disparity = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let mut best_d = 0usize;
            let mut best_c = f64::MAX;
            for (k, cost) in costs.iter().enumerate() {
                let c = cost[(i, j)];
                if c < best_c {
                    best_c = c;
                    best_d = k + 1;
                }
            }
            if best_c == f64::MAX {
                continue;
            }
            let mut d = best_d as f64;
            // Parabola refinement over the integer cost curve, clamped to
            // half a pixel either side of the argmin.
            if best_d > 1 && best_d < max_disparity {
                let cl = costs[best_d - 2][(i, j)];
                let cr = costs[best_d][(i, j)];
                if cl != f64::MAX && cr != f64::MAX {
                    let denom = cl - 2.0 * best_c + cr;
                    if denom > 1e-12 {
                        d += (0.5 * (cl - cr) / denom).clamp(-0.5, 0.5);
                    }
                }
            }
            disparity[(i, j)] = d.clamp(1.0, max_disparity as f64);
            valid[(i, j)] = true;
        }
    }
    (disparity, valid)
}

/// Census + SAD block matching with left-right consistency screening.
pub fn block_match(
    left: &Array2<f64>,
    right: &Array2<f64>,
    max_disparity: usize,
) -> Result<StereoResult, StereoError> {
    if !(2..=210).contains(&max_disparity) {
        return Err(StereoError::DisparityRangeInvalid(max_disparity as f64));
    }
    assert_eq!(left.dim(), right.dim(), "stereo pair dimensions must match");
    let (h, w) = left.dim();
    let census_l = census_bits(left);
    let census_r = census_bits(right);

    let (disp_l, mut valid) = match_view(&census_l, &census_r, left, right, max_disparity, 1);
    let (disp_r, valid_r) = match_view(&census_r, &census_l, right, left, max_disparity, -1);

    for i in 0..h {
        for j in 0..w {
            if !valid[(i, j)] {
                continue;
            }
            let jr = j as isize - disp_l[(i, j)].round() as isize;
            let consistent = jr >= 0
                && (jr as usize) < w
                && valid_r[(i, jr as usize)]
                && (disp_l[(i, j)] - disp_r[(i, jr as usize)]).abs() <= LR_THRESHOLD;
            valid[(i, j)] = consistent;
        }
    }

    Ok(StereoResult {
        disparity: disp_l,
        left_features: extract_features(left),
        right_features: extract_features(right),
        valid,
    })
}

/// Appearance confidence of a disparity map: mean-over-channel l1 feature
/// distance between the left pixel and the right view sampled at disparity
/// d + offset for offsets {-1, 0, +1}. Out-of-image samples read 1 (worst).
pub fn disparity_confidence(
    left_features: &FeatureMap,
    right_features: &FeatureMap,
    disparity: &Array2<f64>,
) -> Array3<f64> {
    let (h, w, c) = left_features.data.dim();
    assert_eq!(left_features.data.dim(), right_features.data.dim());
    assert_eq!(disparity.dim(), (h, w));
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for (k, off) in [-1.0, 0.0, 1.0].into_iter().enumerate() {
                let x = j as f64 - (disparity[(i, j)] + off);
                if x < 0.0 || x > (w - 1) as f64 {
                    out[(i, j, k)] = 1.0;
                    continue;
                }
                let mut acc = 0.0;
                for ch in 0..c {
                    let rv = bilinear_channel(&right_features.data, x, i as f64, ch);
                    acc += (left_features.data[(i, j, ch)] - rv).abs();
                }
                out[(i, j, k)] = acc / c as f64;
            }
        }
    }
    out
}
