//! Image and model file formats: PFM for float maps, 8-bit PGM for
//! grayscale previews, and the "TFW1" binary container for trained weights.
//!
//! PFM follows the usual convention: `Pf` (1 channel) or `PF` (3 channels),
//! ASCII dimensions, a scale whose sign encodes endianness (negative =
//! little-endian, which is what we write), then rows bottom-to-top.

use ndarray::{Array2, Array3};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
}

/// Write a single-channel float map as PFM (little-endian, scale -1).
pub fn write_pfm(path: &Path, map: &Array2<f64>) -> Result<(), IoError> {
    let (h, w) = map.dim();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "Pf\n{} {}\n-1.0\n", w, h)?;
    for i in (0..h).rev() {
        for j in 0..w {
            out.write_all(&(map[(i, j)] as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Write a 2-channel flow field as 3-channel PFM (third channel zero),
/// the common storage convention for flow in PFM.
pub fn write_pfm_flow(path: &Path, flow: &Array3<f64>) -> Result<(), IoError> {
    let (h, w, c) = flow.dim();
    if c != 2 {
        return Err(IoError::Format(format!("flow must have 2 channels, got {c}")));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "PF\n{} {}\n-1.0\n", w, h)?;
    for i in (0..h).rev() {
        for j in 0..w {
            out.write_all(&(flow[(i, j, 0)] as f32).to_le_bytes())?;
            out.write_all(&(flow[(i, j, 1)] as f32).to_le_bytes())?;
            out.write_all(&0f32.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a PFM file into an (H, W, C) array, C = 1 or 3. Handles both
/// endiannesses via the scale sign.
pub fn read_pfm(path: &Path) -> Result<Array3<f64>, IoError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;

    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String, IoError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::Format("truncated PFM header".into()));
        }
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        // Consume the single whitespace terminating this token.
        if pos < bytes.len() {
            pos += 1;
        }
        Ok(tok)
    };

    let magic = next_token(&bytes)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(IoError::Format(format!("unknown PFM magic {other:?}"))),
    };
    let w: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| IoError::Format("bad PFM width".into()))?;
    let h: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| IoError::Format("bad PFM height".into()))?;
    let scale: f64 = next_token(&bytes)?
        .parse()
        .map_err(|_| IoError::Format("bad PFM scale".into()))?;
    let little_endian = scale < 0.0;

    let need = h * w * channels * 4;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(IoError::Format(format!(
            "PFM payload too short: need {need} bytes, have {}",
            data.len()
        )));
    }
    let mut out = Array3::zeros((h, w, channels));
    let mut k = 0usize;
    for i in (0..h).rev() {
        for j in 0..w {
            for c in 0..channels {
                let raw: [u8; 4] = data[k..k + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                out[(i, j, c)] = v as f64;
                k += 4;
            }
        }
    }
    Ok(out)
}

/// Read a single-channel PFM; 3-channel files are rejected.
pub fn read_pfm_gray(path: &Path) -> Result<Array2<f64>, IoError> {
    let arr = read_pfm(path)?;
    let c = arr.dim().2;
    if c != 1 {
        return Err(IoError::Format(format!(
            "expected single-channel PFM, got {c} channels"
        )));
    }
    Ok(arr.index_axis(ndarray::Axis(2), 0).to_owned())
}

/// Read a flow PFM (3-channel, third channel ignored) into (H, W, 2).
pub fn read_pfm_flow(path: &Path) -> Result<Array3<f64>, IoError> {
    let arr = read_pfm(path)?;
    let (h, w, c) = arr.dim();
    if c != 3 {
        return Err(IoError::Format(format!(
            "expected 3-channel flow PFM, got {c} channels"
        )));
    }
    let mut flow = Array3::zeros((h, w, 2));
    for i in 0..h {
        for j in 0..w {
            flow[(i, j, 0)] = arr[(i, j, 0)];
            flow[(i, j, 1)] = arr[(i, j, 1)];
        }
    }
    Ok(flow)
}

/// Write a [0, 1] grayscale map as binary 8-bit PGM (P5).
pub fn write_pgm(path: &Path, image: &Array2<f64>) -> Result<(), IoError> {
    let (h, w) = image.dim();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", w, h)?;
    for i in 0..h {
        for j in 0..w {
            let v = (image[(i, j)].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.write_all(&[v])?;
        }
    }
    out.flush()?;
    Ok(())
}

const MODEL_MAGIC: &[u8; 4] = b"TFW1";

/// Write trained weights: magic "TFW1", u64 channel-order hash, u32 count,
/// raw f32 values, all little-endian.
pub fn write_model(path: &Path, channel_hash: u64, params: &[f32]) -> Result<(), IoError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&channel_hash.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read a "TFW1" weights file, returning the channel-order hash and values.
pub fn read_model(path: &Path) -> Result<(u64, Vec<f32>), IoError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != MODEL_MAGIC {
        return Err(IoError::Format("not a TFW1 model file".into()));
    }
    let channel_hash = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + count * 4 {
        return Err(IoError::Format(format!(
            "model payload length {} does not match header count {count}",
            bytes.len() - 16
        )));
    }
    let params = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((channel_hash, params))
}
