//! Cue construction, weight prediction, and disparity fusion.
//!
//! The per-pixel cue stack has 53 channels in a fixed, versioned order:
//!
//! | channels | content                                             |
//! |----------|-----------------------------------------------------|
//! | 0-2      | stereo confidence (offsets -1, 0, +1 at d_S)        |
//! | 3-5      | motion confidence (offsets -1, 0, +1 at d_M)        |
//! | 6-13     | disparity self-correlation, l1, 8 dilated neighbors |
//! | 14-21    | feature self-correlation, dot, 8 dilated neighbors  |
//! | 22-30    | disparity cross-correlation, l1, 3x3 dilated patch  |
//! | 31-39    | feature cross-correlation, dot, 3x3 dilated patch   |
//! | 40       | flow magnitude (px)                                 |
//! | 41       | flow confidence                                     |
//! | 42       | visibility (0/1)                                    |
//! | 43-52    | current left features                               |
//!
//! Fusion follows d_F = (1 - w_r * w_f) * d_S + w_r * w_f * d_M. Weights come
//! from a small shared-trunk logistic model, a per-pixel Kalman filter, or
//! the ground-truth empirical-best oracle.

use crate::geometry::MemoryState;
use crate::grid::{clamp_index, fnv1a};
use crate::losses::{
    fusion_loss, fusion_loss_grad, huber, huber_grad, reset_loss, reset_loss_grad, LossConfig,
};
use crate::stereo::{disparity_confidence, StereoResult};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("model was trained with a different cue layout (hash {got:#x}, expected {expected:#x})")]
    ChannelOrderMismatch { expected: u64, got: u64 },
    #[error("bad model file: {0}")]
    BadModelFile(String),
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

pub const CUE_CHANNELS: usize = 53;
/// Correlation patch size and dilation (W = 3, dilation = 2).
pub const CORR_WINDOW: usize = 3;
pub const CORR_DILATION: usize = 2;
/// Sentinel l1 distance contributed by invisible previous pixels.
pub const SENTINEL_L1: f64 = 210.0;
/// Sentinel dot product contributed by invisible previous pixels.
pub const SENTINEL_DOT: f64 = 0.0;

const CHANNEL_LAYOUT: &str = "stereo_conf:3|motion_conf:3|disp_self_l1:8|feat_self_dot:8|\
disp_cross_l1:9|feat_cross_dot:9|flow_mag:1|flow_conf:1|visibility:1|features:10|px_norm:210";

/// Version hash of the cue channel order; stored in model files.
pub fn channel_order_hash() -> u64 {
    fnv1a(CHANNEL_LAYOUT.as_bytes())
}

/// The 53-channel fusion input described in the module docs.
#[derive(Debug, Clone)]
pub struct CueStack {
    pub data: Array3<f64>,
}

impl CueStack {
    pub fn dim(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }
}

fn dilated_offsets(include_center: bool) -> Vec<(isize, isize)> {
    let r = (CORR_WINDOW as isize - 1) / 2;
    let d = CORR_DILATION as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if !include_center && dy == 0 && dx == 0 {
                continue;
            }
            out.push((dy * d, dx * d));
        }
    }
    out
}

/// l1 self-correlation of a scalar map with its 8 dilated neighbors
/// (replicate padding, center excluded).
pub fn self_correlation_l1(map: &Array2<f64>) -> Array3<f64> {
    let (h, w) = map.dim();
    let offsets = dilated_offsets(false);
    let mut out = Array3::zeros((h, w, offsets.len()));
    for i in 0..h {
        for j in 0..w {
            for (k, &(dy, dx)) in offsets.iter().enumerate() {
                let q = (
                    clamp_index(i as isize + dy, h),
                    clamp_index(j as isize + dx, w),
                );
                out[(i, j, k)] = (map[(i, j)] - map[q]).abs();
            }
        }
    }
    out
}

/// Channel-mean dot-product self-correlation of a feature map with its 8
/// dilated neighbors.
pub fn self_correlation_dot(map: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = map.dim();
    let offsets = dilated_offsets(false);
    let mut out = Array3::zeros((h, w, offsets.len()));
    for i in 0..h {
        for j in 0..w {
            for (k, &(dy, dx)) in offsets.iter().enumerate() {
                let (qi, qj) = (
                    clamp_index(i as isize + dy, h),
                    clamp_index(j as isize + dx, w),
                );
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += map[(i, j, ch)] * map[(qi, qj, ch)];
                }
                out[(i, j, k)] = acc / c as f64;
            }
        }
    }
    out
}

/// l1 cross-correlation: current pixel vs the 3x3 dilated patch of the
/// aligned previous map. Invisible previous pixels contribute 210.
pub fn cross_correlation_l1(
    curr: &Array2<f64>,
    prev: &Array2<f64>,
    prev_visible: &Array2<bool>,
) -> Array3<f64> {
    let (h, w) = curr.dim();
    let offsets = dilated_offsets(true);
    let mut out = Array3::zeros((h, w, offsets.len()));
    for i in 0..h {
        for j in 0..w {
            for (k, &(dy, dx)) in offsets.iter().enumerate() {
                let q = (
                    clamp_index(i as isize + dy, h),
                    clamp_index(j as isize + dx, w),
                );
                out[(i, j, k)] = if prev_visible[q] {
                    (curr[(i, j)] - prev[q]).abs()
                } else {
                    SENTINEL_L1
                };
            }
        }
    }
    out
}

/// Dot-product cross-correlation with sentinel 0 on invisible previous
/// pixels.
pub fn cross_correlation_dot(
    curr: &Array3<f64>,
    prev: &Array3<f64>,
    prev_visible: &Array2<bool>,
) -> Array3<f64> {
    let (h, w, c) = curr.dim();
    let offsets = dilated_offsets(true);
    let mut out = Array3::zeros((h, w, offsets.len()));
    for i in 0..h {
        for j in 0..w {
            for (k, &(dy, dx)) in offsets.iter().enumerate() {
                let (qi, qj) = (
                    clamp_index(i as isize + dy, h),
                    clamp_index(j as isize + dx, w),
                );
                out[(i, j, k)] = if prev_visible[(qi, qj)] {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += curr[(i, j, ch)] * prev[(qi, qj, ch)];
                    }
                    acc / c as f64
                } else {
                    SENTINEL_DOT
                };
            }
        }
    }
    out
}

/// Assemble the 53-channel cue stack from the aligned previous state and
/// the current stereo output.
pub fn build_cues(m_motion: &MemoryState, stereo: &StereoResult) -> Result<CueStack, FusionError> {
    let (h, w) = stereo.disparity.dim();
    if m_motion.dim() != (h, w) {
        return Err(FusionError::DimensionMismatch {
            expected: (h, w),
            got: m_motion.dim(),
        });
    }
    // Motion confidence is evaluated on the hole-filled motion disparity so
    // the sampling stays meaningful; holes are flagged by the visibility
    // channel and the sentinels instead.
    let d_m_filled = Array2::from_shape_fn((h, w), |(i, j)| {
        if m_motion.visibility[(i, j)] {
            m_motion.disparity[(i, j)]
        } else {
            stereo.disparity[(i, j)]
        }
    });
    let stereo_conf =
        disparity_confidence(&stereo.left_features, &stereo.right_features, &stereo.disparity);
    let motion_conf =
        disparity_confidence(&stereo.left_features, &stereo.right_features, &d_m_filled);
    let disp_self = self_correlation_l1(&stereo.disparity);
    let feat_self = self_correlation_dot(&stereo.left_features.data);
    let disp_cross =
        cross_correlation_l1(&stereo.disparity, &m_motion.disparity, &m_motion.visibility);
    let feat_cross =
        cross_correlation_dot(&stereo.left_features.data, &m_motion.features, &m_motion.visibility);

    let mut data = Array3::zeros((h, w, CUE_CHANNELS));
    for i in 0..h {
        for j in 0..w {
            let mut c = 0usize;
            for k in 0..3 {
                data[(i, j, c)] = stereo_conf[(i, j, k)];
                c += 1;
            }
            for k in 0..3 {
                data[(i, j, c)] = motion_conf[(i, j, k)];
                c += 1;
            }
            for k in 0..8 {
                data[(i, j, c)] = disp_self[(i, j, k)];
                c += 1;
            }
            for k in 0..8 {
                data[(i, j, c)] = feat_self[(i, j, k)];
                c += 1;
            }
            for k in 0..9 {
                data[(i, j, c)] = disp_cross[(i, j, k)];
                c += 1;
            }
            for k in 0..9 {
                data[(i, j, c)] = feat_cross[(i, j, k)];
                c += 1;
            }
            data[(i, j, c)] = m_motion.flow_magnitude[(i, j)];
            data[(i, j, c + 1)] = m_motion.flow_confidence[(i, j)];
            data[(i, j, c + 2)] = if m_motion.visibility[(i, j)] { 1.0 } else { 0.0 };
            c += 3;
            for k in 0..stereo.left_features.data.dim().2 {
                data[(i, j, c)] = stereo.left_features.data[(i, j, k)];
                c += 1;
            }
            debug_assert_eq!(c, CUE_CHANNELS);
        }
    }
    Ok(CueStack { data })
}

/// Reset and fusion weights, each strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct WeightMaps {
    pub w_reset: Array2<f64>,
    pub w_fusion: Array2<f64>,
}

/// Eq.-style convex fusion: d_F = (1 - w_r w_f) d_S + w_r w_f d_M.
/// Callers substitute d_M := d_S wherever the previous frame was invisible.
pub fn fuse(
    d_s: &Array2<f64>,
    d_m: &Array2<f64>,
    weights: &WeightMaps,
) -> Result<Array2<f64>, FusionError> {
    if d_s.dim() != d_m.dim() || d_s.dim() != weights.w_reset.dim() {
        return Err(FusionError::DimensionMismatch {
            expected: d_s.dim(),
            got: d_m.dim(),
        });
    }
    Ok(Array2::from_shape_fn(d_s.dim(), |idx| {
        let w = weights.w_reset[idx] * weights.w_fusion[idx];
        (1.0 - w) * d_s[idx] + w * d_m[idx]
    }))
}

/// Pick per pixel whichever estimate is closer to ground truth; ties keep
/// the stereo value.
pub fn empirical_best(
    d_s: &Array2<f64>,
    d_m: &Array2<f64>,
    d_gt: &Array2<f64>,
) -> Array2<f64> {
    Array2::from_shape_fn(d_s.dim(), |idx| {
        if (d_s[idx] - d_gt[idx]).abs() <= (d_m[idx] - d_gt[idx]).abs() {
            d_s[idx]
        } else {
            d_m[idx]
        }
    })
}

const HIDDEN: usize = 16;
/// 16x53 trunk + 16 bias + two (16 + 1) heads.
pub const PARAM_COUNT: usize = HIDDEN * CUE_CHANNELS + HIDDEN + 2 * (HIDDEN + 1);

/// Fixed per-channel normalization applied inside the model: disparity- and
/// pixel-valued channels are divided by 210 so every input is O(1).
fn channel_scale(c: usize) -> f64 {
    let px_valued = (6..14).contains(&c) || (22..31).contains(&c) || c == 40;
    if px_valued {
        210.0
    } else {
        1.0
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Shared-trunk logistic weight predictor: 53 -> 16 affine + ReLU, then two
/// sigmoid heads for w_reset and w_fusion. 898 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticWeightModel {
    trunk_w: Vec<f64>, // HIDDEN x CUE_CHANNELS, row-major
    trunk_b: Vec<f64>, // HIDDEN
    head_reset: Vec<f64>,
    bias_reset: f64,
    head_fusion: Vec<f64>,
    bias_fusion: f64,
}

impl LogisticWeightModel {
    /// All-zero model; predicts 0.5 everywhere (sigmoid of 0).
    pub fn zeros() -> Self {
        Self {
            trunk_w: vec![0.0; HIDDEN * CUE_CHANNELS],
            trunk_b: vec![0.0; HIDDEN],
            head_reset: vec![0.0; HIDDEN],
            bias_reset: 0.0,
            head_fusion: vec![0.0; HIDDEN],
            bias_fusion: 0.0,
        }
    }

    /// Small random init; required for the trunk to receive gradient.
    pub fn random_init(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros();
        for v in m.trunk_w.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
        for v in m.head_reset.iter_mut().chain(m.head_fusion.iter_mut()) {
            *v = rng.gen_range(-scale..scale);
        }
        m
    }

    pub fn param_count(&self) -> usize {
        PARAM_COUNT
    }

    fn to_params(&self) -> Vec<f32> {
        let mut p = Vec::with_capacity(PARAM_COUNT);
        p.extend(self.trunk_w.iter().map(|&v| v as f32));
        p.extend(self.trunk_b.iter().map(|&v| v as f32));
        p.extend(self.head_reset.iter().map(|&v| v as f32));
        p.push(self.bias_reset as f32);
        p.extend(self.head_fusion.iter().map(|&v| v as f32));
        p.push(self.bias_fusion as f32);
        p
    }

    fn from_params(params: &[f32]) -> Result<Self, FusionError> {
        if params.len() != PARAM_COUNT {
            return Err(FusionError::BadModelFile(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        let mut it = params.iter().map(|&v| v as f64);
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let trunk_w = take(HIDDEN * CUE_CHANNELS);
        let trunk_b = take(HIDDEN);
        let head_reset = take(HIDDEN);
        let bias_reset = take(1)[0];
        let head_fusion = take(HIDDEN);
        let bias_fusion = take(1)[0];
        Ok(Self {
            trunk_w,
            trunk_b,
            head_reset,
            bias_reset,
            head_fusion,
            bias_fusion,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        Ok(crate::io::write_model(
            path,
            channel_order_hash(),
            &self.to_params(),
        )?)
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let (hash, params) = crate::io::read_model(path)?;
        if hash != channel_order_hash() {
            return Err(FusionError::ChannelOrderMismatch {
                expected: channel_order_hash(),
                got: hash,
            });
        }
        Self::from_params(&params)
    }

    /// Forward pass for one normalized-on-the-fly cue vector.
    fn forward(&self, cues: &[f64]) -> (f64, f64) {
        debug_assert_eq!(cues.len(), CUE_CHANNELS);
        let mut zr = self.bias_reset;
        let mut zf = self.bias_fusion;
        for i in 0..HIDDEN {
            let row = &self.trunk_w[i * CUE_CHANNELS..(i + 1) * CUE_CHANNELS];
            let mut pre = self.trunk_b[i];
            for (c, (&w, &x)) in row.iter().zip(cues.iter()).enumerate() {
                pre += w * x / channel_scale(c);
            }
            if pre > 0.0 {
                zr += self.head_reset[i] * pre;
                zf += self.head_fusion[i] * pre;
            }
        }
        // Strictly inside (0,1) even when the sigmoid saturates in f64.
        let clamp = |w: f64| w.clamp(1e-9, 1.0 - 1e-9);
        (clamp(sigmoid(zr)), clamp(sigmoid(zf)))
    }
}

/// Predict weight maps for every pixel of a cue stack.
pub fn predict_weights(model: &LogisticWeightModel, cues: &CueStack) -> WeightMaps {
    let (h, w) = cues.dim();
    let mut w_reset = Array2::zeros((h, w));
    let mut w_fusion = Array2::zeros((h, w));
    let mut buf = vec![0.0; CUE_CHANNELS];
    for i in 0..h {
        for j in 0..w {
            for (c, b) in buf.iter_mut().enumerate() {
                *b = cues.data[(i, j, c)];
            }
            let (wr, wf) = model.forward(&buf);
            w_reset[(i, j)] = wr;
            w_fusion[(i, j)] = wf;
        }
    }
    WeightMaps { w_reset, w_fusion }
}

/// One training pixel: its cue vector plus the scalars the loss needs.
/// `e_m` comes from the raw aligned motion disparity (holes keep their
/// sentinel error) while `d_m` is the hole-filled value used in Eq. (3).
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub cues: Vec<f64>,
    pub d_s: f64,
    pub d_m: f64,
    pub e_m: f64,
    pub e_s: f64,
    pub d_gt: f64,
}

/// Subsample masked pixels of one frame into training records.
#[allow(clippy::too_many_arguments)]
pub fn collect_records(
    cues: &CueStack,
    d_s: &Array2<f64>,
    d_m: &Array2<f64>,
    e_m: &Array2<f64>,
    e_s: &Array2<f64>,
    d_gt: &Array2<f64>,
    mask: &Array2<bool>,
    stride: usize,
    out: &mut Vec<TrainRecord>,
) {
    let (h, w) = cues.dim();
    let stride = stride.max(1);
    for i in (0..h).step_by(stride) {
        for j in (0..w).step_by(stride) {
            if !mask[(i, j)] {
                continue;
            }
            let mut v = Vec::with_capacity(CUE_CHANNELS);
            for c in 0..CUE_CHANNELS {
                v.push(cues.data[(i, j, c)]);
            }
            out.push(TrainRecord {
                cues: v,
                d_s: d_s[(i, j)],
                d_m: d_m[(i, j)],
                e_m: e_m[(i, j)],
                e_s: e_s[(i, j)],
                d_gt: d_gt[(i, j)],
            });
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_scale: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1.0,
            init_scale: 0.05,
            seed: 7,
            loss: LossConfig::default(),
        }
    }
}

struct Gradients {
    trunk_w: Vec<f64>,
    trunk_b: Vec<f64>,
    head_reset: Vec<f64>,
    bias_reset: f64,
    head_fusion: Vec<f64>,
    bias_fusion: f64,
}

impl Gradients {
    fn zeros() -> Self {
        Self {
            trunk_w: vec![0.0; HIDDEN * CUE_CHANNELS],
            trunk_b: vec![0.0; HIDDEN],
            head_reset: vec![0.0; HIDDEN],
            bias_reset: 0.0,
            head_fusion: vec![0.0; HIDDEN],
            bias_fusion: 0.0,
        }
    }
}

/// Loss and parameter gradients of one record (subgradients at kinks are 0).
fn backward(
    model: &LogisticWeightModel,
    rec: &TrainRecord,
    cfg: &LossConfig,
    grads: &mut Gradients,
) -> f64 {
    // Forward, keeping intermediates.
    let mut pre = [0.0f64; HIDDEN];
    let mut hid = [0.0f64; HIDDEN];
    let mut zr = model.bias_reset;
    let mut zf = model.bias_fusion;
    for i in 0..HIDDEN {
        let row = &model.trunk_w[i * CUE_CHANNELS..(i + 1) * CUE_CHANNELS];
        let mut p = model.trunk_b[i];
        for (c, (&w, &x)) in row.iter().zip(rec.cues.iter()).enumerate() {
            p += w * x / channel_scale(c);
        }
        pre[i] = p;
        hid[i] = p.max(0.0);
        zr += model.head_reset[i] * hid[i];
        zf += model.head_fusion[i] * hid[i];
    }
    let w_r = sigmoid(zr);
    let w_f = sigmoid(zf);
    let prod = w_r * w_f;
    let d_f = (1.0 - prod) * rec.d_s + prod * rec.d_m;

    let loss = cfg.alpha_disp * huber(d_f, rec.d_gt, cfg.huber_delta)
        + cfg.alpha_fusion * fusion_loss(w_f, rec.e_m, rec.e_s, cfg.tau_fusion, cfg.alpha_reg)
        + cfg.alpha_reset * reset_loss(w_r, rec.e_m, rec.e_s, cfg.tau_reset);

    // Chain rule through Eq. (3) and the two case losses.
    let dh = cfg.alpha_disp * huber_grad(d_f, rec.d_gt, cfg.huber_delta) * (rec.d_m - rec.d_s);
    let dl_dwr = dh * w_f
        + cfg.alpha_reset * reset_loss_grad(w_r, rec.e_m, rec.e_s, cfg.tau_reset);
    let dl_dwf = dh * w_r
        + cfg.alpha_fusion
            * fusion_loss_grad(w_f, rec.e_m, rec.e_s, cfg.tau_fusion, cfg.alpha_reg);
    let gr = dl_dwr * w_r * (1.0 - w_r);
    let gf = dl_dwf * w_f * (1.0 - w_f);

    grads.bias_reset += gr;
    grads.bias_fusion += gf;
    for i in 0..HIDDEN {
        grads.head_reset[i] += gr * hid[i];
        grads.head_fusion[i] += gf * hid[i];
        if pre[i] > 0.0 {
            let dh_i = gr * model.head_reset[i] + gf * model.head_fusion[i];
            grads.trunk_b[i] += dh_i;
            let row = &mut grads.trunk_w[i * CUE_CHANNELS..(i + 1) * CUE_CHANNELS];
            for (c, (g, &x)) in row.iter_mut().zip(rec.cues.iter()).enumerate() {
                *g += dh_i * x / channel_scale(c);
            }
        }
    }
    loss
}

fn mean_loss(model: &LogisticWeightModel, records: &[TrainRecord], cfg: &LossConfig) -> f64 {
    let mut sum = 0.0;
    for rec in records {
        let (w_r, w_f) = model.forward(&rec.cues);
        let prod = w_r * w_f;
        let d_f = (1.0 - prod) * rec.d_s + prod * rec.d_m;
        sum += cfg.alpha_disp * huber(d_f, rec.d_gt, cfg.huber_delta)
            + cfg.alpha_fusion
                * fusion_loss(w_f, rec.e_m, rec.e_s, cfg.tau_fusion, cfg.alpha_reg)
            + cfg.alpha_reset * reset_loss(w_r, rec.e_m, rec.e_s, cfg.tau_reset);
    }
    sum / records.len() as f64
}

/// Mini-batch subgradient descent on the total loss. An epoch is kept only
/// if it lowers the full-pass loss; otherwise the parameters revert and the
/// step size halves. The curve therefore decreases monotonically from the
/// initial loss, and the returned model attains its final entry.
pub fn train_weight_model(
    records: &[TrainRecord],
    hyper: &TrainConfig,
) -> Result<(LogisticWeightModel, Vec<f64>), FusionError> {
    assert!(!records.is_empty(), "training needs at least one record");
    hyper
        .loss
        .validate()
        .map_err(|e| FusionError::BadModelFile(e.to_string()))?;
    let mut model = LogisticWeightModel::random_init(hyper.seed, hyper.init_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..records.len()).collect();

    let mut curve = Vec::with_capacity(hyper.epochs + 1);
    let mut current_loss = mean_loss(&model, records, &hyper.loss);
    if !current_loss.is_finite() {
        return Err(FusionError::NonFiniteLoss { epoch: 0 });
    }
    curve.push(current_loss);
    let mut lr = hyper.learning_rate;

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut candidate = model.clone();
        for batch in order.chunks(hyper.batch_size.max(1)) {
            let mut grads = Gradients::zeros();
            for &idx in batch {
                backward(&candidate, &records[idx], &hyper.loss, &mut grads);
            }
            let scale = lr / batch.len() as f64;
            for (w, g) in candidate.trunk_w.iter_mut().zip(&grads.trunk_w) {
                *w -= scale * g;
            }
            for (w, g) in candidate.trunk_b.iter_mut().zip(&grads.trunk_b) {
                *w -= scale * g;
            }
            for (w, g) in candidate.head_reset.iter_mut().zip(&grads.head_reset) {
                *w -= scale * g;
            }
            for (w, g) in candidate.head_fusion.iter_mut().zip(&grads.head_fusion) {
                *w -= scale * g;
            }
            candidate.bias_reset -= scale * grads.bias_reset;
            candidate.bias_fusion -= scale * grads.bias_fusion;
        }
        let loss = mean_loss(&candidate, records, &hyper.loss);
        if !loss.is_finite() {
            return Err(FusionError::NonFiniteLoss { epoch });
        }
        if loss <= current_loss {
            model = candidate;
            current_loss = loss;
        } else {
            lr *= 0.5;
        }
        curve.push(current_loss);
    }
    Ok((model, curve))
}

/// Per-pixel scalar Kalman filter state over disparity.
#[derive(Debug, Clone)]
pub struct KalmanState {
    pub mean: Array2<f64>,
    pub variance: Array2<f64>,
}

impl KalmanState {
    /// Initialize from a measurement.
    pub fn from_measurement(mean: &Array2<f64>, variance: &Array2<f64>) -> Self {
        Self {
            mean: mean.clone(),
            variance: variance.clone(),
        }
    }
}

/// One predict-update step. `prior` is the motion-aligned previous
/// posterior; invisible pixels reset to the measurement. Returns the new
/// state plus the implied motion weight (1 - gain), i.e. how much of the
/// prior survives in the posterior.
pub fn kalman_update(
    prior: &KalmanState,
    meas_mean: &Array2<f64>,
    meas_var: &Array2<f64>,
    process_noise: f64,
    visibility: &Array2<bool>,
) -> Result<(KalmanState, Array2<f64>), FusionError> {
    if process_noise < 0.0 {
        return Err(FusionError::NonPositiveVariance(process_noise));
    }
    let (h, w) = prior.mean.dim();
    let mut mean = Array2::zeros((h, w));
    let mut variance = Array2::zeros((h, w));
    let mut weight = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mv = meas_var[(i, j)];
            if mv <= 0.0 {
                return Err(FusionError::NonPositiveVariance(mv));
            }
            if !visibility[(i, j)] {
                mean[(i, j)] = meas_mean[(i, j)];
                variance[(i, j)] = mv;
                weight[(i, j)] = 0.0;
                continue;
            }
            let pv = prior.variance[(i, j)] + process_noise;
            if pv <= 0.0 {
                return Err(FusionError::NonPositiveVariance(pv));
            }
            let gain = pv / (pv + mv);
            mean[(i, j)] = prior.mean[(i, j)] + gain * (meas_mean[(i, j)] - prior.mean[(i, j)]);
            variance[(i, j)] = (1.0 - gain) * pv;
            weight[(i, j)] = 1.0 - gain;
        }
    }
    Ok((KalmanState { mean, variance }, weight))
}

/// Least-squares affine fit of squared stereo error against the confidence
/// center channel: var ~ a + b * conf, floored to stay positive.
pub fn calibrate_measurement_variance(conf_center: &[f64], sq_err: &[f64]) -> (f64, f64) {
    assert_eq!(conf_center.len(), sq_err.len());
    let n = conf_center.len() as f64;
    if n < 2.0 {
        return (0.25, 0.0);
    }
    let mx = conf_center.iter().sum::<f64>() / n;
    let my = sq_err.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in conf_center.iter().zip(sq_err.iter()) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let b = if sxx > 1e-12 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    (a, b)
}

/// Evaluate an affine variance calibration at a confidence value, floored.
pub fn measurement_variance(calib: (f64, f64), conf: f64) -> f64 {
    (calib.0 + calib.1 * conf).max(1e-4)
}
