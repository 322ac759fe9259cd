//! Datasets: CIFAR binary ingestion, synthetic class-blob images, seeded
//! per-class splits and batching.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x C x H x W`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {l} out of {class_count} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.gather_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    /// Batches over `order`, each at most `batch_size` samples.
    pub fn batches<'a>(
        &'a self,
        order: &'a [usize],
        batch_size: usize,
    ) -> impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + 'a {
        order.chunks(batch_size.max(1)).map(move |idx| {
            let x = self.images.gather_batch(idx)?;
            let y = idx.iter().map(|&i| self.labels[i]).collect();
            Ok((x, y))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn from_classes(n: u32) -> Result<Self> {
        match n {
            10 => Ok(CifarVariant::Cifar10),
            100 => Ok(CifarVariant::Cifar100),
            _ => Err(Error::Data(format!("unknown CIFAR variant {n}"))),
        }
    }

    fn record_size(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    fn class_count(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

pub fn parse_cifar_binary(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_size();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Data(format!(
            "file length {} is not a multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let label_bytes = rec - CIFAR_PIXELS;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(rec) {
        // CIFAR-100 records are coarse label, fine label, pixels.
        labels.push(r[label_bytes - 1] as usize);
        data.extend(r[label_bytes..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, variant.class_count())
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar_binary(&bytes, variant)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub per_class: usize,
    pub seed: u64,
}

/// Draws `per_class` samples of every class into the second set. Both
/// sets keep the original sample order.
pub fn split_validation(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut held = vec![false; ds.len()];
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < spec.per_class {
            return Err(Error::Data(format!(
                "class {class} has {} samples, {} requested",
                idx.len(),
                spec.per_class
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..spec.per_class] {
            held[i] = true;
        }
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| held[i]);
    Ok((ds.subset(&train)?, ds.subset(&val)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    /// Per-pixel noise relative to the class pattern.
    pub noise: f64,
}

/// Each class gets a random Gaussian mean image; samples add isotropic
/// noise and are squashed into `[0, 1]` as `0.5 + 0.2 * value`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.class_count == 0 || spec.shape.contains(&0) {
        return Err(Error::Data("synthetic task needs classes and a non-empty shape".into()));
    }
    let [c, h, w] = spec.shape;
    let pixels = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| (0..pixels).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let n = spec.class_count * spec.per_class;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.class_count;
        labels.push(class);
        for &m in &means[class] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((0.5 + 0.2 * (m + spec.noise * z)).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, spec.class_count)
}

/// A seeded permutation of `0..n`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record100(coarse: u8, fine: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![coarse, fine];
        r.extend(std::iter::repeat_n(fill, CIFAR_PIXELS));
        r
    }

    #[test]
    fn two_records() {
        let mut bytes = record100(3, 42, 0);
        bytes.extend(record100(1, 7, 255));
        let ds = parse_cifar_binary(&bytes, CifarVariant::Cifar100).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![42, 7]);
        assert_eq!(ds.images.data()[0], 0.0);
        assert_eq!(ds.images.data()[CIFAR_PIXELS], 1.0);
    }

    #[test]
    fn cifar10_and_truncation() {
        let mut r = vec![9u8];
        r.extend((0..CIFAR_PIXELS).map(|i| if i % 2 == 0 { 0 } else { 255 }));
        let ds = parse_cifar_binary(&r, CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.labels, vec![9]);
        assert_eq!(&ds.images.data()[..2], &[0.0, 1.0]);
        assert!(parse_cifar_binary(&r[..r.len() - 1], CifarVariant::Cifar10).is_err());
        r[0] = 10;
        assert!(parse_cifar_binary(&r, CifarVariant::Cifar10).is_err());
    }

    fn toy(per_class: usize) -> Dataset {
        make_synthetic(&SyntheticSpec {
            class_count: 2,
            per_class,
            shape: [1, 2, 2],
            seed: 3,
            noise: 0.1,
        })
        .unwrap()
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = toy(100);
        let spec = SplitSpec { per_class: 50, seed: 11 };
        let (train, val) = split_validation(&ds, spec).unwrap();
        assert_eq!((train.len(), val.len()), (100, 100));
        for c in 0..2 {
            assert_eq!(val.labels.iter().filter(|&&l| l == c).count(), 50);
        }
        assert_eq!(split_validation(&ds, spec).unwrap(), (train, val));
        let (train, val) = split_validation(&ds, SplitSpec { per_class: 0, seed: 1 }).unwrap();
        assert_eq!((train.len(), val.len()), (200, 0));
        assert!(split_validation(&ds, SplitSpec { per_class: 101, seed: 1 }).is_err());
    }

    #[test]
    fn synthetic_is_reproducible() {
        assert_eq!(toy(5), toy(5));
        assert!(toy(0).is_empty());
    }
}
