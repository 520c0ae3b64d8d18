//! Deterministic procedural datasets: small labeled images of colored
//! geometric primitives, plus a binary container for external 32x32
//! datasets.
//!
//! Pixels are generated as bytes so that export/import round-trips are
//! exact. The normalized training tensors are derived from the bytes
//! with per-channel constants computed on the train split.

use crate::error::{DfqError, Result};
use crate::nn::generator::Normalization;
use crate::scalar::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DFQDATA1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Maximum positional offset of the primitive, in pixels.
    pub position_jitter: usize,
    /// Per-channel color jitter amplitude, in byte units.
    pub color_jitter: u8,
    /// Gaussian pixel noise std, in byte units.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 10,
            samples_per_class: 100,
            image_size: 32,
            position_jitter: 4,
            color_jitter: 24,
            noise_level: 8.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(DfqError::InvalidConfig(
                "dataset needs at least 2 classes".into(),
            ));
        }
        if self.num_classes > 10 {
            return Err(DfqError::InvalidConfig(
                "at most 10 primitive classes are registered".into(),
            ));
        }
        if self.samples_per_class < 50 {
            return Err(DfqError::InvalidConfig(
                "samples_per_class must be at least 50".into(),
            ));
        }
        if self.image_size < 16 {
            return Err(DfqError::InvalidConfig("image_size must be >= 16".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset<F: Scalar> {
    /// Normalized tensors, (N, 3, H, W).
    pub images: ArrayD<F>,
    pub labels: Vec<usize>,
    /// Raw pixels, (N, H, W, 3) row-major.
    pub pixels: Vec<u8>,
    pub num_classes: usize,
    pub image_size: usize,
    pub norm: Normalization,
    pub split: String,
}

impl<F: Scalar> LabeledDataset<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Normalized image tensor for a subset of indices.
    pub fn batch(&self, indices: &[usize]) -> (ArrayD<F>, Vec<usize>) {
        let hw = self.image_size;
        let mut out = Array4::<F>::zeros((indices.len(), 3, hw, hw));
        let img4 = self.images.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for (bi, &i) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&img4.index_axis(ndarray::Axis(0), i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out.into_dyn(), labels)
    }
}

const PALETTE: [[u8; 3]; 10] = [
    [220, 50, 40],   // red
    [40, 200, 60],   // green
    [50, 80, 230],   // blue
    [235, 220, 40],  // yellow
    [230, 60, 220],  // magenta
    [40, 220, 220],  // cyan
    [240, 140, 30],  // orange
    [150, 70, 230],  // purple
    [240, 240, 240], // white
    [130, 200, 130], // sage
];

fn put_pixel(img: &mut [u8], size: usize, x: usize, y: usize, color: [u8; 3]) {
    let off = (y * size + x) * 3;
    img[off..off + 3].copy_from_slice(&color);
}

fn draw_primitive(
    img: &mut [u8],
    size: usize,
    class: usize,
    cx: i64,
    cy: i64,
    r: i64,
    color: [u8; 3],
) {
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let dx = x - cx;
            let dy = y - cy;
            let inside = match class {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= r && dy.abs() <= r,
                2 => dy >= -r && dy <= r && dx.abs() <= (r - dy) / 2 + 1,
                3 => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (r - 3) * (r - 3)
                }
                4 => (dx.abs() <= 2 && dy.abs() <= r) || (dy.abs() <= 2 && dx.abs() <= r),
                5 => dy.abs() <= r && dx.abs() <= r && (dy.rem_euclid(6) < 3),
                6 => dy.abs() <= r && dx.abs() <= r && (dx.rem_euclid(6) < 3),
                7 => dy.abs() <= r && dx.abs() <= r && ((dx + dy).rem_euclid(8) < 4),
                8 => {
                    dy.abs() <= r
                        && dx.abs() <= r
                        && ((dx.rem_euclid(8) < 4) == (dy.rem_euclid(8) < 4))
                }
                _ => dx.abs() + dy.abs() <= r,
            };
            if inside {
                put_pixel(img, size, x as usize, y as usize, color);
            }
        }
    }
}

fn render_sample(rng: &mut ChaCha20Rng, spec: &DatasetSpec, class: usize) -> Vec<u8> {
    let size = spec.image_size;
    let bg: [u8; 3] = [
        rng.gen_range(0..50u8),
        rng.gen_range(0..50u8),
        rng.gen_range(0..50u8),
    ];
    let mut img = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            put_pixel(&mut img, size, x, y, bg);
        }
    }
    let jitter = spec.position_jitter as i64;
    let cx = size as i64 / 2 + rng.gen_range(-jitter..=jitter);
    let cy = size as i64 / 2 + rng.gen_range(-jitter..=jitter);
    let r = rng.gen_range((size as i64 / 4)..=(size as i64 / 3));
    let base = PALETTE[class % PALETTE.len()];
    let cj = spec.color_jitter as i64;
    let mut color = [0u8; 3];
    for (c, b) in color.iter_mut().zip(base) {
        let v = b as i64 + rng.gen_range(-cj..=cj);
        *c = v.clamp(0, 255) as u8;
    }
    draw_primitive(&mut img, size, class, cx, cy, r, color);
    if spec.noise_level > 0.0 {
        for px in img.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            let v = *px as f64 + z * spec.noise_level;
            *px = v.clamp(0.0, 255.0) as u8;
        }
    }
    img
}

fn normalize_pixels<F: Scalar>(
    pixels: &[u8],
    n: usize,
    size: usize,
    norm: &Normalization,
) -> ArrayD<F> {
    let mut out = Array4::<F>::zeros((n, 3, size, size));
    for i in 0..n {
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    let raw = pixels[((i * size + y) * size + x) * 3 + c] as f64 / 255.0;
                    out[[i, c, y, x]] = F::from_real((raw - norm.mean[c]) / norm.std[c]);
                }
            }
        }
    }
    out.into_dyn()
}

fn compute_norm(pixels: &[u8], n: usize, size: usize) -> Normalization {
    let count = (n * size * size) as f64;
    let mut mean = [0.0f64; 3];
    let mut var = [0.0f64; 3];
    for c in 0..3 {
        let mut acc = 0.0;
        for i in 0..n {
            for y in 0..size {
                for x in 0..size {
                    acc += pixels[((i * size + y) * size + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        mean[c] = acc / count;
        let mut vacc = 0.0;
        for i in 0..n {
            for y in 0..size {
                for x in 0..size {
                    let d = pixels[((i * size + y) * size + x) * 3 + c] as f64 / 255.0 - mean[c];
                    vacc += d * d;
                }
            }
        }
        var[c] = vacc / count;
    }
    Normalization {
        mean,
        std: [var[0].sqrt(), var[1].sqrt(), var[2].sqrt()],
    }
}

/// Deterministically generate the toy dataset and split it 80/20 per
/// class. Both splits are normalized with train-split constants.
pub fn make_toy_dataset<F: Scalar>(
    spec: &DatasetSpec,
) -> Result<(LabeledDataset<F>, LabeledDataset<F>)> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let n_train_per_class = spec.samples_per_class * 4 / 5;
    let mut train_pixels = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_pixels = Vec::new();
    let mut test_labels = Vec::new();
    for class in 0..spec.num_classes {
        for s in 0..spec.samples_per_class {
            let img = render_sample(&mut rng, spec, class);
            if s < n_train_per_class {
                train_pixels.extend_from_slice(&img);
                train_labels.push(class);
            } else {
                test_pixels.extend_from_slice(&img);
                test_labels.push(class);
            }
        }
    }
    let norm = compute_norm(&train_pixels, train_labels.len(), size);
    let train = LabeledDataset {
        images: normalize_pixels(&train_pixels, train_labels.len(), size, &norm),
        labels: train_labels,
        pixels: train_pixels,
        num_classes: spec.num_classes,
        image_size: size,
        norm,
        split: "train".into(),
    };
    let test = LabeledDataset {
        images: normalize_pixels(&test_pixels, test_labels.len(), size, &norm),
        labels: test_labels,
        pixels: test_pixels,
        num_classes: spec.num_classes,
        image_size: size,
        norm,
        split: "test".into(),
    };
    Ok((train, test))
}

/// Write the documented binary layout: header, raw pixels, labels.
pub fn save_dataset<F: Scalar>(ds: &LabeledDataset<F>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    f.write_u32::<LittleEndian>(ds.num_classes as u32)?;
    f.write_u32::<LittleEndian>(ds.len() as u32)?;
    f.write_u32::<LittleEndian>(ds.image_size as u32)?;
    f.write_u32::<LittleEndian>(ds.image_size as u32)?;
    f.write_u32::<LittleEndian>(3)?;
    for c in 0..3 {
        f.write_f64::<LittleEndian>(ds.norm.mean[c])?;
        f.write_f64::<LittleEndian>(ds.norm.std[c])?;
    }
    f.write_all(&ds.pixels)?;
    for &l in &ds.labels {
        f.write_all(&[l as u8])?;
    }
    Ok(())
}

/// Load a dataset container; images are normalized with the stored
/// constants unless `normalization` overrides them.
pub fn load_external<F: Scalar>(
    path: &Path,
    normalization: Option<Normalization>,
) -> Result<LabeledDataset<F>> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|_| DfqError::MissingArtifact(path.display().to_string()))?,
    );
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| DfqError::MalformedFile("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(DfqError::MalformedFile("bad magic".into()));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(DfqError::MalformedFile(format!(
            "unsupported version {version}"
        )));
    }
    let num_classes = f.read_u32::<LittleEndian>()? as usize;
    let count = f.read_u32::<LittleEndian>()? as usize;
    let h = f.read_u32::<LittleEndian>()? as usize;
    let w = f.read_u32::<LittleEndian>()? as usize;
    let c = f.read_u32::<LittleEndian>()? as usize;
    if h != w || c != 3 {
        return Err(DfqError::MalformedFile(format!(
            "expected square 3-channel images, got {h}x{w}x{c}"
        )));
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for ci in 0..3 {
        mean[ci] = f.read_f64::<LittleEndian>()?;
        std[ci] = f.read_f64::<LittleEndian>()?;
    }
    let mut pixels = vec![0u8; count * h * w * 3];
    f.read_exact(&mut pixels)
        .map_err(|_| DfqError::MalformedFile("truncated pixel data".into()))?;
    let mut label_bytes = vec![0u8; count];
    f.read_exact(&mut label_bytes)
        .map_err(|_| DfqError::MalformedFile("truncated label data".into()))?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    for &l in &labels {
        if l >= num_classes {
            return Err(DfqError::MalformedFile(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
    }
    let norm = normalization.unwrap_or(Normalization { mean, std });
    Ok(LabeledDataset {
        images: normalize_pixels(&pixels, count, h, &norm),
        labels,
        pixels,
        num_classes,
        image_size: h,
        norm,
        split: "external".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_classes: 4,
            samples_per_class: 50,
            image_size: 16,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (a, _) = make_toy_dataset::<f64>(&small_spec()).unwrap();
        let (b, _) = make_toy_dataset::<f64>(&small_spec()).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn exact_class_balance_in_both_splits() {
        let (train, test) = make_toy_dataset::<f64>(&small_spec()).unwrap();
        for class in 0..4 {
            assert_eq!(train.labels.iter().filter(|&&l| l == class).count(), 40);
            assert_eq!(test.labels.iter().filter(|&&l| l == class).count(), 10);
        }
    }

    #[test]
    fn train_split_is_normalized() {
        let (train, _) = make_toy_dataset::<f64>(&small_spec()).unwrap();
        let img = train
            .images
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let (n, _, h, w) = img.dim();
        let count = (n * h * w) as f64;
        for c in 0..3 {
            let mut mean = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        mean += img[[i, c, y, x]];
                    }
                }
            }
            mean /= count;
            let mut var = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        var += (img[[i, c, y, x]] - mean).powi(2);
                    }
                }
            }
            var /= count;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "channel {c} std");
        }
    }

    #[test]
    fn splits_share_no_identical_image() {
        let (train, test) = make_toy_dataset::<f64>(&small_spec()).unwrap();
        let sz = train.image_size * train.image_size * 3;
        let train_set: std::collections::HashSet<&[u8]> =
            train.pixels.chunks(sz).collect();
        for img in test.pixels.chunks(sz) {
            assert!(!train_set.contains(img));
        }
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let (train, _) = make_toy_dataset::<f64>(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.dfq");
        save_dataset(&train, &path).unwrap();
        let loaded = load_external::<f64>(&path, None).unwrap();
        assert_eq!(loaded.pixels, train.pixels);
        assert_eq!(loaded.labels, train.labels);
        assert_eq!(loaded.images, train.images);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (train, _) = make_toy_dataset::<f64>(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.dfq");
        save_dataset(&train, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_external::<f64>(&path, None),
            Err(DfqError::MalformedFile(_))
        ));
    }

    #[test]
    fn rejects_invalid_spec() {
        let spec = DatasetSpec {
            num_classes: 1,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }
}
