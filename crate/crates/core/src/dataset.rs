//! Labeled image container and a synthetic shape generator.
//!
//! Container layout (`DYDS`), all integers little-endian:
//! magic `DYDS`, version (u32 = 1), count, channels, extent, classes
//! (u32 each), then `count * channels * extent^2` raw image bytes
//! (channel-planar per image), then `count` u16 labels.
//!
//! Pixel bytes map to working values as `v / 127.5 - 1`, so 0 is -1.0 and
//! 255 is exactly +1.0.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DyError, Result};
use crate::rng::derive_seed;

const MAGIC: &[u8; 4] = b"DYDS";
const VERSION: u32 = 1;
/// Refuse to allocate for clearly corrupt headers.
const MAX_BYTES: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    channels: usize,
    extent: usize,
    classes: usize,
    images: Vec<u8>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        extent: usize,
        classes: usize,
        images: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        if channels == 0 || extent == 0 || classes == 0 {
            return Err(DyError::invalid("dataset: dimensions must be positive"));
        }
        if classes > u16::MAX as usize + 1 {
            return Err(DyError::invalid("dataset: too many classes for u16 labels"));
        }
        let stride = channels * extent * extent;
        if images.len() != stride * labels.len() {
            return Err(DyError::invalid(format!(
                "dataset: {} labels at {} bytes each wants {} image bytes, got {}",
                labels.len(),
                stride,
                stride * labels.len(),
                images.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(DyError::invalid(format!(
                "dataset: label {bad} outside [0, {classes})"
            )));
        }
        Ok(Dataset {
            channels,
            extent,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn stride(&self) -> usize {
        self.channels * self.extent * self.extent
    }

    pub fn label(&self, i: usize) -> u16 {
        self.labels[i]
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let s = self.stride();
        &self.images[i * s..(i + 1) * s]
    }

    /// Channel-planar pixels mapped onto [-1, 1].
    pub fn image_f32(&self, i: usize) -> Vec<f32> {
        self.raw_image(i)
            .iter()
            .map(|&v| (v as f64 / 127.5 - 1.0) as f32)
            .collect()
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.len() as u32,
            self.channels as u32,
            self.extent as u32,
            self.classes as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.images)?;
        for &l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        self.save(std::fs::File::create(path)?)
    }

    /// Every error names the byte offset of the field that caused it.
    pub fn load<R: Read>(r: R) -> Result<Self> {
        let mut r = Counting { inner: r, pos: 0 };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(r.fail_at(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail_at(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let extent = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let total = (count as u64)
            .saturating_mul(channels as u64)
            .saturating_mul(extent as u64)
            .saturating_mul(extent as u64);
        if total > MAX_BYTES {
            return Err(r.fail_at(8, format!("implausible size: {total} image bytes")));
        }
        let mut images = vec![0u8; total as usize];
        r.read_exact(&mut images)?;
        let mut labels = Vec::with_capacity(count);
        let mut pair = [0u8; 2];
        for i in 0..count {
            let at = r.pos;
            r.read_exact(&mut pair)?;
            let label = u16::from_le_bytes(pair);
            if label as usize >= classes {
                return Err(r.fail_at(
                    at,
                    format!("label {label} outside [0, {classes}) for image {i}"),
                ));
            }
            labels.push(label);
        }
        Dataset::new(channels, extent, classes, images, labels)
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::load(std::fs::File::open(path)?)
    }
}

/// Byte-position tracking for load diagnostics.
struct Counting<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Counting<R> {
    fn fail_at(&self, at: u64, msg: String) -> DyError {
        DyError::format("dataset", format!("{msg} (at byte {at})"))
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.pos += buf.len() as u64;
                Ok(())
            }
            Err(e) => Err(self.fail_at(
                self.pos,
                format!("wanted {} bytes, {e}", buf.len()),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Shape classes the generator can draw.
pub const SHAPE_CLASSES: usize = 4;

/// A generated dataset plus, for each image, which pixels belong to the
/// drawn object rather than the background.
pub struct GeneratedSet {
    pub dataset: Dataset,
    pub object_masks: Vec<Vec<bool>>,
}

fn rasterize(class: u16, extent: usize, cx: f64, cy: f64, r: f64) -> Vec<bool> {
    let mut mask = vec![false; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            mask[y * extent + x] = match class {
                // Disk.
                0 => dx * dx + dy * dy <= r * r,
                // Axis-aligned square.
                1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                // Upward-pointing triangle: apex at cy - r, base at cy + r.
                2 => {
                    let down = dy + r;
                    down >= 0.0 && down <= 2.0 * r && dx.abs() <= down * 0.55
                }
                // Ring.
                3 => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
                }
                _ => unreachable!("class out of range"),
            };
        }
    }
    mask
}

/// Draw `count` images, `extent` x `extent`, 3 channels: one bright shape
/// per image on a dark uniform background, lightly dithered. Labels cycle
/// through the four classes so any prefix is nearly balanced.
pub fn generate_shapes(count: usize, extent: usize, seed: u64) -> Result<GeneratedSet> {
    if extent < 8 {
        return Err(DyError::invalid("generate_shapes: extent must be at least 8"));
    }
    if count == 0 {
        return Err(DyError::invalid("generate_shapes: count must be positive"));
    }
    let plane = extent * extent;
    let mut images = Vec::with_capacity(count * 3 * plane);
    let mut labels = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let label = (i % SHAPE_CLASSES) as u16;
        let jitter = extent as f64 / 8.0;
        let cx = extent as f64 / 2.0 + rng.random_range(-jitter..=jitter);
        let cy = extent as f64 / 2.0 + rng.random_range(-jitter..=jitter);
        let r = rng.random_range(extent as f64 / 4.0..=extent as f64 / 3.0);
        let mask = rasterize(label, extent, cx, cy, r);
        let background: [u8; 3] = std::array::from_fn(|_| rng.random_range(20..=110));
        let object: [u8; 3] = std::array::from_fn(|_| rng.random_range(145..=235));
        for c in 0..3 {
            for p in 0..plane {
                let base = if mask[p] { object[c] } else { background[c] } as i16;
                let dither = rng.random_range(-4i16..=4);
                images.push((base + dither).clamp(0, 255) as u8);
            }
        }
        labels.push(label);
        masks.push(mask);
    }
    Ok(GeneratedSet {
        dataset: Dataset::new(3, extent, SHAPE_CLASSES, images, labels)?,
        object_masks: masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let set = generate_shapes(10, 16, 42).unwrap();
        let mut buf = Vec::new();
        set.dataset.save(&mut buf).unwrap();
        let back = Dataset::load(&buf[..]).unwrap();
        assert_eq!(set.dataset, back);
    }

    #[test]
    fn pixel_normalization_hits_exact_endpoints() {
        let d = Dataset::new(1, 1, 2, vec![0, 255, 128], vec![0, 1, 1]).unwrap();
        assert_eq!(d.image_f32(0)[0], -1.0);
        assert_eq!(d.image_f32(1)[0], 1.0);
        let mid = d.image_f32(2)[0];
        assert!(mid.abs() < 0.01, "128 should sit near zero, got {mid}");
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let a = generate_shapes(8, 16, 7).unwrap();
        let b = generate_shapes(8, 16, 7).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.object_masks, b.object_masks);
        let c = generate_shapes(8, 16, 8).unwrap();
        assert_ne!(a.dataset, c.dataset);
        // Image i depends only on (seed, i), not on count.
        let prefix = generate_shapes(3, 16, 7).unwrap();
        assert_eq!(prefix.dataset.raw_image(2), a.dataset.raw_image(2));
    }

    #[test]
    fn labels_cycle_and_objects_outshine_backgrounds() {
        let set = generate_shapes(12, 16, 3).unwrap();
        for i in 0..12 {
            assert_eq!(set.dataset.label(i) as usize, i % SHAPE_CLASSES);
            let mask = &set.object_masks[i];
            let on = mask.iter().filter(|&&m| m).count();
            assert!(on > 0 && on < mask.len(), "mask covers {on} pixels");
            let img = set.dataset.raw_image(i);
            let plane = 16 * 16;
            for c in 0..3 {
                let dimmest_object = (0..plane)
                    .filter(|&p| mask[p])
                    .map(|p| img[c * plane + p])
                    .min()
                    .unwrap();
                let brightest_background = (0..plane)
                    .filter(|&p| !mask[p])
                    .map(|p| img[c * plane + p])
                    .max()
                    .unwrap();
                assert!(
                    dimmest_object > brightest_background,
                    "image {i} channel {c}: object {dimmest_object} <= background {brightest_background}"
                );
            }
        }
    }

    #[test]
    fn the_four_shapes_are_pairwise_distinct() {
        let masks: Vec<Vec<bool>> = (0..4)
            .map(|k| rasterize(k, 16, 8.0, 8.0, 5.0))
            .collect();
        for a in 0..4 {
            assert!(masks[a].iter().any(|&m| m));
            for b in a + 1..4 {
                assert_ne!(masks[a], masks[b], "shapes {a} and {b} rasterized identically");
            }
        }
    }

    #[test]
    fn malformed_containers_are_rejected() {
        let set = generate_shapes(4, 8, 1).unwrap();
        let mut good = Vec::new();
        set.dataset.save(&mut good).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = Dataset::load(&bad_magic[..]).unwrap_err().to_string();
        assert!(err.contains("at byte 0"), "{err}");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let err = Dataset::load(&bad_version[..]).unwrap_err().to_string();
        assert!(err.contains("at byte 4"), "{err}");

        let truncated = &good[..good.len() - 3];
        let err = Dataset::load(truncated).unwrap_err().to_string();
        assert!(err.contains("at byte"), "{err}");

        // A stored label outside the declared class range, located exactly.
        let mut bad_label = good.clone();
        let label_start = good.len() - 2 * set.dataset.len();
        bad_label[label_start] = 9;
        let err = Dataset::load(&bad_label[..]).unwrap_err().to_string();
        assert!(
            err.contains("label 9") && err.contains(&format!("at byte {label_start}")),
            "{err}"
        );

        // Constructor validation: label outside the class range.
        assert!(Dataset::new(1, 2, 2, vec![0; 4], vec![2]).is_err());
        // Image byte count that does not match count * stride.
        assert!(Dataset::new(1, 2, 2, vec![0; 5], vec![0]).is_err());
        assert!(Dataset::new(0, 2, 2, vec![], vec![]).is_err());
        // A header promising absurd sizes must not allocate.
        let mut absurd = Vec::new();
        absurd.extend_from_slice(b"DYDS");
        absurd.extend_from_slice(&1u32.to_le_bytes());
        absurd.extend_from_slice(&u32::MAX.to_le_bytes());
        absurd.extend_from_slice(&u32::MAX.to_le_bytes());
        absurd.extend_from_slice(&u32::MAX.to_le_bytes());
        absurd.extend_from_slice(&4u32.to_le_bytes());
        assert!(Dataset::load(&absurd[..]).is_err());
    }
}
