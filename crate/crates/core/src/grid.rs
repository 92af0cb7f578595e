//! Small shared helpers for H x W maps.

use ndarray::{Array2, Array3};

/// Bilinear sample of a scalar map at continuous (x, y). Coordinates are
/// clamped to the image rectangle, so callers must do their own bounds
/// policy when clamping is not wanted.
pub fn bilinear(map: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = map.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = map[(y0, x0)] * (1.0 - fx) + map[(y0, x1)] * fx;
    let bot = map[(y1, x0)] * (1.0 - fx) + map[(y1, x1)] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear sample of one channel of an (H, W, C) map.
pub fn bilinear_channel(map: &Array3<f64>, x: f64, y: f64, c: usize) -> f64 {
    let (h, w, _) = map.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = map[(y0, x0, c)] * (1.0 - fx) + map[(y0, x1, c)] * fx;
    let bot = map[(y1, x0, c)] * (1.0 - fx) + map[(y1, x1, c)] * fx;
    top * (1.0 - fy) + bot * fy
}

/// True when (x, y) lies inside the image rectangle [0, w-1] x [0, h-1].
pub fn in_image(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64
}

/// Clamp an index offset into [0, len-1] with replicate semantics.
pub fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Deterministic 64-bit mix used for procedural textures and hashes.
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^= x >> 31;
    x
}

/// FNV-1a over bytes; used to fingerprint fixed layouts.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
