//! Datasets: the CIFAR-10 binary layout and a seeded synthetic generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NashError, Result};
use crate::tensor::Tensor;

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// N,C,H,W with values in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape.len() != 4 || images.shape[0] != labels.len() {
            return Err(NashError::invalid(format!(
                "{} labels for image tensor {:?}",
                labels.len(),
                images.shape
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(NashError::invalid(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Dataset { images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape[1]
    }

    pub fn hw(&self) -> usize {
        self.images.shape[2]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.gather_batch(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Seeded shuffle split into `(first, second)` with `round(frac * n)` in the first part.
    pub fn split(&self, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if self.len() < 2 {
            return Err(NashError::invalid("cannot split fewer than two samples"));
        }
        if !(frac > 0.0 && frac < 1.0) {
            return Err(NashError::invalid(format!("split fraction {frac} outside (0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (frac * self.len() as f64).round() as usize;
        if cut == 0 || cut == self.len() {
            return Err(NashError::invalid(format!("split {frac} of {} samples leaves an empty side", self.len())));
        }
        Ok((self.subset(&idx[..cut]), self.subset(&idx[cut..])))
    }
}

/// Parses concatenated CIFAR-10 binary records (label byte, then R, G and B
/// planes of 32x32 row-major pixels). Pixels are divided by 255.
pub fn parse_cifar10_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 || bytes.is_empty() {
        let offset = (bytes.len() - bytes.len() % CIFAR_RECORD) as u64;
        return Err(NashError::Format {
            offset,
            message: format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(NashError::Format {
                offset: (r * CIFAR_RECORD) as u64,
                message: format!("label {} > 9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10)
}

pub fn parse_cifar10_bin(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| NashError::io(path, e))?;
    parse_cifar10_bytes(&bytes)
}

/// Concatenates several datasets with identical image geometry.
pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| NashError::invalid("nothing to concatenate"))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.images.shape[1..] != first.images.shape[1..] {
            return Err(NashError::invalid("image geometry differs between parts"));
        }
        data.extend_from_slice(&p.images.data);
        labels.extend_from_slice(&p.labels);
    }
    let mut shape = first.images.shape.clone();
    shape[0] = labels.len();
    Dataset::new(Tensor::new(shape, data)?, labels, first.class_count)
}

/// Loads `data_batch_*.bin` as the training set and `test_batch.bin` as the test set.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            train.push(parse_cifar10_bin(&p)?);
        }
    }
    if train.is_empty() {
        return Err(NashError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no data_batch_*.bin files")));
    }
    let test = parse_cifar10_bin(&dir.join("test_batch.bin"))?;
    Ok((concat(&train)?, test))
}

/// Parameters of the oriented-bar generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub hw: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f32,
}

fn default_channels() -> usize {
    3
}

fn default_noise() -> f32 {
    0.1
}

/// Class `k` is a bright bar through the image centre at angle `pi * k / classes`,
/// plus Gaussian pixel noise, clamped to [0, 1] and rounded to 8-bit levels.
/// Samples are interleaved by class (label `i % classes`).
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.n_per_class == 0 || spec.hw < 4 || spec.channels == 0 {
        return Err(NashError::invalid(format!("degenerate synthetic spec {spec:?}")));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(NashError::invalid("noise must be a finite non-negative std"));
    }
    let hw = spec.hw;
    let centre = (hw as f32 - 1.0) / 2.0;
    let half_width = (hw as f32 / 16.0).max(0.75);
    let patterns: Vec<Vec<f32>> = (0..spec.classes)
        .map(|k| {
            let theta = std::f32::consts::PI * k as f32 / spec.classes as f32;
            let (s, c) = theta.sin_cos();
            (0..hw * hw)
                .map(|p| {
                    let (y, x) = ((p / hw) as f32 - centre, (p % hw) as f32 - centre);
                    // distance from the line through the centre with direction (c, s)
                    let d = (x * s - y * c).abs();
                    if d <= half_width {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("valid std");
    let n = spec.classes * spec.n_per_class;
    let mut data = Vec::with_capacity(n * spec.channels * hw * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.classes;
        labels.push(k);
        for _ in 0..spec.channels {
            for &v in &patterns[k] {
                let noisy = if spec.noise > 0.0 { v + normal.sample(&mut rng) } else { v };
                data.push((noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, spec.channels, hw, hw], data)?, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, pixel: u8) -> Vec<u8> {
        let mut r = vec![pixel; CIFAR_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn single_record() {
        let d = parse_cifar10_bytes(&record(5, 255)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels, vec![5]);
        assert!(d.images.data.iter().all(|&v| v == 1.0));
        assert_eq!(d.images.shape, vec![1, 3, 32, 32]);
    }

    #[test]
    fn plane_order_is_rgb() {
        let mut r = record(0, 0);
        r[1] = 255; // R plane, pixel (0,0)
        r[1 + 1024 + 33] = 51; // G plane, pixel (1,1)
        let d = parse_cifar10_bytes(&r).unwrap();
        assert_eq!(d.images.data[0], 1.0);
        assert_eq!(d.images.data[1024 + 33], 0.2);
    }

    #[test]
    fn two_records_keep_order() {
        let mut b = record(3, 0);
        b.extend(record(7, 0));
        assert_eq!(parse_cifar10_bytes(&b).unwrap().labels, vec![3, 7]);
    }

    #[test]
    fn truncated_and_bad_label() {
        let short = vec![0u8; CIFAR_RECORD - 1];
        assert!(matches!(parse_cifar10_bytes(&short), Err(NashError::Format { offset: 0, .. })));
        let mut b = record(1, 0);
        b.extend(record(10, 0));
        assert!(matches!(parse_cifar10_bytes(&b), Err(NashError::Format { offset, .. }) if offset == CIFAR_RECORD as u64));
    }

    #[test]
    fn synth_is_seeded_and_noise_free_is_constant_per_class() {
        let spec = SynthSpec { classes: 4, n_per_class: 5, hw: 16, channels: 1, noise: 0.1 };
        assert_eq!(synth_dataset(&spec, 7).unwrap(), synth_dataset(&spec, 7).unwrap());
        let clean = synth_dataset(&SynthSpec { noise: 0.0, ..spec }, 7).unwrap();
        let per = 16 * 16;
        for i in 4..clean.len() {
            assert_eq!(clean.images.data[i * per..(i + 1) * per], clean.images.data[(i - 4) * per..(i - 3) * per]);
        }
    }

    #[test]
    fn split_partitions() {
        let spec = SynthSpec { classes: 4, n_per_class: 25, hw: 4, channels: 1, noise: 0.0 };
        let mut d = synth_dataset(&spec, 1).unwrap();
        // make every sample distinguishable
        for (i, v) in d.images.data.chunks_mut(16).enumerate() {
            v[0] = i as f32;
        }
        let (a, b) = d.split(0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (50, 50));
        let mut ids: Vec<i64> = a.images.data.chunks(16).chain(b.images.data.chunks(16)).map(|c| c[0] as i64).collect();
        ids.sort();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
        assert_eq!(d.split(0.5, 3).unwrap().0, a);
        assert!(d.subset(&[0]).split(0.5, 1).is_err());
    }
}
