//! Input plumbing for the token transformer: patch extraction, fixed 2-D
//! sinusoidal position encodings, and the raw timestep frequency encoding.

use crate::error::{DyError, Result};

/// Flatten a channel-planar image (`channels * extent * extent`) into patch
/// rows. Patches are enumerated row-major over the patch grid; within a
/// patch the layout is channel-major: all of channel 0's `patch x patch`
/// pixels (row-major), then channel 1's, and so on.
pub fn patchify(image: &[f32], channels: usize, extent: usize, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || extent % patch != 0 {
        return Err(DyError::invalid(format!(
            "patch size {patch} does not divide extent {extent}"
        )));
    }
    if image.len() != channels * extent * extent {
        return Err(DyError::invalid(format!(
            "image has {} values, expected {}",
            image.len(),
            channels * extent * extent
        )));
    }
    let grid = extent / patch;
    let pd = channels * patch * patch;
    let mut out = vec![0.0f32; grid * grid * pd];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for c in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        out[row * pd + c * patch * patch + py * patch + px] =
                            image[c * extent * extent + y * extent + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]: reassemble patch rows into a channel-planar
/// image buffer.
pub fn unpatchify(
    patches: &[f32],
    channels: usize,
    extent: usize,
    patch: usize,
) -> Result<Vec<f32>> {
    if patch == 0 || extent % patch != 0 {
        return Err(DyError::invalid(format!(
            "patch size {patch} does not divide extent {extent}"
        )));
    }
    let grid = extent / patch;
    let pd = channels * patch * patch;
    if patches.len() != grid * grid * pd {
        return Err(DyError::invalid(format!(
            "patch buffer has {} values, expected {}",
            patches.len(),
            grid * grid * pd
        )));
    }
    let mut out = vec![0.0f32; channels * extent * extent];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for c in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        out[c * extent * extent + y * extent + x] =
                            patches[row * pd + c * patch * patch + py * patch + px];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 1-D sinusoidal encoding of a scalar position into `dim` values:
/// `dim/2` sine components followed by `dim/2` cosine components, with
/// geometric frequencies `10000^(-i / (dim/2))`.
fn sincos_1d(dim: usize, pos: f64) -> Vec<f32> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin() as f32;
        out[half + i] = (pos * omega).cos() as f32;
    }
    out
}

/// Fixed 2-D position encoding for a `grid x grid` token layout: the first
/// `dim/2` values encode the row index, the rest the column index. `dim`
/// must be a multiple of 4.
pub fn position_encoding(dim: usize, grid: usize) -> Result<Vec<f32>> {
    if dim % 4 != 0 || dim == 0 || grid == 0 {
        return Err(DyError::invalid(format!(
            "position encoding wants dim % 4 == 0 and a nonempty grid, got dim {dim}, grid {grid}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; grid * grid * dim];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            let y_part = sincos_1d(half, gy as f64);
            let x_part = sincos_1d(half, gx as f64);
            out[row * dim..row * dim + half].copy_from_slice(&y_part);
            out[row * dim + half..(row + 1) * dim].copy_from_slice(&x_part);
        }
    }
    Ok(out)
}

/// Frequency encoding of a raw timestep: `dim/2` cosine components followed
/// by `dim/2` sine components over frequencies `exp(-ln(10000) * i / (dim/2))`.
pub fn timestep_encoding(dim: usize, t: f64) -> Result<Vec<f32>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(DyError::invalid(format!(
            "timestep encoding wants an even dim, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).cos() as f32;
        out[half + i] = (t * freq).sin() as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_uses_channel_major_layout_within_patches() {
        // Encode (c, y, x) into each pixel so the expected ordering is legible.
        let (channels, extent, patch) = (2, 4, 2);
        let mut img = vec![0.0f32; channels * extent * extent];
        for c in 0..channels {
            for y in 0..extent {
                for x in 0..extent {
                    img[c * 16 + y * 4 + x] = (c * 10000 + y * 100 + x) as f32;
                }
            }
        }
        let p = patchify(&img, channels, extent, patch).unwrap();
        // Patch row 1 is grid cell (0, 1): pixels x in {2,3}, y in {0,1}.
        let row1 = &p[8..16];
        assert_eq!(
            row1,
            &[
                2.0, 3.0, 102.0, 103.0, // channel 0: (y0x2, y0x3, y1x2, y1x3)
                10002.0, 10003.0, 10102.0, 10103.0 // channel 1
            ]
        );
    }

    #[test]
    fn patchify_roundtrips_exactly() {
        let (channels, extent, patch) = (3, 8, 4);
        let img: Vec<f32> = (0..channels * extent * extent)
            .map(|i| (i as f32) * 0.37 - 11.0)
            .collect();
        let p = patchify(&img, channels, extent, patch).unwrap();
        assert_eq!(p.len(), 4 * 48);
        let back = unpatchify(&p, channels, extent, patch).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn patchify_validates_shapes() {
        assert!(patchify(&[0.0; 12], 3, 2, 4).is_err()); // patch > extent
        assert!(patchify(&[0.0; 11], 3, 2, 2).is_err()); // wrong buffer length
        assert!(unpatchify(&[0.0; 11], 3, 2, 2).is_err());
    }

    #[test]
    fn position_encoding_matches_direct_evaluation() {
        let dim = 8;
        let grid = 3;
        let enc = position_encoding(dim, grid).unwrap();
        // Token (gy=2, gx=1) sits at row 7. First half encodes gy, second gx.
        let row = &enc[7 * dim..8 * dim];
        let quarter = dim / 4; // = half/2 within each sincos_1d
        for i in 0..quarter {
            let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
            assert!((row[i] as f64 - (2.0 * omega).sin()).abs() < 1e-6);
            assert!((row[quarter + i] as f64 - (2.0 * omega).cos()).abs() < 1e-6);
            let off = dim / 2;
            assert!((row[off + i] as f64 - (1.0 * omega).sin()).abs() < 1e-6);
            assert!((row[off + quarter + i] as f64 - (1.0 * omega).cos()).abs() < 1e-6);
        }
        assert!(position_encoding(6, 2).is_err());
    }

    #[test]
    fn position_encoding_distinguishes_all_grid_cells() {
        let dim = 16;
        let grid = 4;
        let enc = position_encoding(dim, grid).unwrap();
        for a in 0..grid * grid {
            for b in (a + 1)..grid * grid {
                let ra = &enc[a * dim..(a + 1) * dim];
                let rb = &enc[b * dim..(b + 1) * dim];
                assert!(ra != rb, "tokens {a} and {b} share an encoding");
            }
        }
    }

    #[test]
    fn timestep_encoding_is_cosine_then_sine() {
        let enc = timestep_encoding(8, 0.0).unwrap();
        assert_eq!(&enc[..4], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(&enc[4..], &[0.0, 0.0, 0.0, 0.0]);
        let enc = timestep_encoding(8, 37.0).unwrap();
        for i in 0..4 {
            let freq = (-(10000f64.ln()) * i as f64 / 4.0).exp();
            assert!((enc[i] as f64 - (37.0 * freq).cos()).abs() < 1e-6);
            assert!((enc[4 + i] as f64 - (37.0 * freq).sin()).abs() < 1e-6);
        }
        assert!(timestep_encoding(7, 1.0).is_err());
    }

    #[test]
    fn nearby_timesteps_get_distinct_encodings() {
        let a = timestep_encoding(64, 50.0).unwrap();
        let b = timestep_encoding(64, 51.0).unwrap();
        assert!(a != b);
    }
}
