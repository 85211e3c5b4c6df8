//! Binary PPM (P6) and PGM (P5) writers for quick visual inspection.

use std::io::Write;
use std::path::Path;

use crate::error::{DyError, Result};

/// Interleaved RGB bytes, row-major, `3 * width * height` of them.
pub fn write_ppm<W: Write>(mut w: W, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(DyError::invalid(format!(
            "ppm: {}x{} wants {} bytes, got {}",
            width,
            height,
            3 * width * height,
            rgb.len()
        )));
    }
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    Ok(())
}

/// Grayscale bytes, row-major, `width * height` of them.
pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(DyError::invalid(format!(
            "pgm: {}x{} wants {} bytes, got {}",
            width,
            height,
            width * height,
            gray.len()
        )));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)?;
    Ok(())
}

/// Map one value from [-1, 1] to a display byte, clamping overshoot.
pub fn unit_to_byte(v: f32) -> u8 {
    let scaled = ((v as f64 + 1.0) * 127.5).round();
    scaled.clamp(0.0, 255.0) as u8
}

/// Convert a channel-planar [-1, 1] image (1 or 3 channels) to interleaved
/// display bytes.
pub fn image_to_bytes(img: &[f32], channels: usize, extent: usize) -> Result<Vec<u8>> {
    let plane = extent * extent;
    if !(channels == 1 || channels == 3) || img.len() != channels * plane {
        return Err(DyError::invalid(format!(
            "image_to_bytes: {channels} channels x {extent}x{extent} does not describe {} values",
            img.len()
        )));
    }
    let mut out = Vec::with_capacity(img.len());
    for p in 0..plane {
        for c in 0..channels {
            out.push(unit_to_byte(img[c * plane + p]));
        }
    }
    Ok(out)
}

/// Write a channel-planar [-1, 1] image as PPM (3 channels) or PGM (1).
pub fn save_image(path: &Path, img: &[f32], channels: usize, extent: usize) -> Result<()> {
    let bytes = image_to_bytes(img, channels, extent)?;
    let file = std::fs::File::create(path)?;
    if channels == 3 {
        write_ppm(file, extent, extent, &bytes)
    } else {
        write_pgm(file, extent, extent, &bytes)
    }
}

/// Min-max normalize arbitrary values onto display bytes; a constant field
/// maps to mid-gray.
pub fn bytes_from_scalar_field(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}
