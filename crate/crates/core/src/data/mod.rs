//! Datasets: a synthetic pattern generator, the CIFAR-10 binary format and a
//! deterministic mini-batch planner.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Labelled images `[M, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        let [m, _, h, w] = images.dims4("dataset")?;
        if m != labels.len() {
            return Err(Error::Data(format!("{m} images but {} labels", labels.len())));
        }
        if h != w {
            return Err(Error::Data(format!("images must be square, got {h}x{w}")));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The first `count` samples.
    pub fn take(&self, count: usize) -> Result<Self> {
        let count = count.min(self.len());
        Self::new(
            self.images.slice_batch(0, count)?,
            self.labels[..count].to_vec(),
            self.classes,
            self.name.clone(),
        )
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather<T: Float>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let [m, c, h, w] = self.images.dims4("gather")?;
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= m {
                return Err(Error::Data(format!("sample index {i} out of range for {m} samples")));
            }
            data.extend(self.images.data()[i * per..(i + 1) * per].iter().map(|&v| T::of(v as f64)));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }
}

/// Parameters of the synthetic pattern dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub resolution: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Selects a different pattern family (for transfer between datasets).
    pub variant: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 200,
            channels: 3,
            resolution: 16,
            noise_std: 0.05,
            seed: 0,
            variant: 0,
        }
    }
}

/// Noise-free image of class `class`: a plane wave whose orientation and
/// frequency depend on the class, phase-shifted per channel.
pub fn synth_pattern(spec: &SynthSpec, class: usize) -> Vec<f64> {
    let k = spec.classes as f64;
    let v = spec.variant as f64;
    let theta = PI * (class as f64 + 0.5 * v) / k;
    let freq = 1.0 + (class % 3) as f64 + v;
    let res = spec.resolution as f64;
    let mut out = Vec::with_capacity(spec.channels * spec.resolution * spec.resolution);
    for ch in 0..spec.channels {
        let phase = 2.0 * PI * ch as f64 / spec.channels as f64 + 0.7 * v;
        for y in 0..spec.resolution {
            for x in 0..spec.resolution {
                let t = (x as f64 * theta.cos() + y as f64 * theta.sin()) / res;
                out.push(0.5 + 0.35 * (2.0 * PI * freq * t + phase).sin());
            }
        }
    }
    out
}

/// Sample `i` has class `i % classes`; pixels are the class pattern plus
/// seeded Gaussian noise, clamped to `[0, 1]`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Data(format!("synthetic data needs at least 2 classes, got {}", spec.classes)));
    }
    if spec.per_class == 0 || spec.channels == 0 || spec.resolution == 0 {
        return Err(Error::Data("per_class, channels and resolution must be positive".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Data(format!("noise_std must be finite and non-negative, got {}", spec.noise_std)));
    }
    let patterns: Vec<Vec<f64>> = (0..spec.classes).map(|c| synth_pattern(spec, c)).collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Data(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(m * patterns[0].len());
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let class = i % spec.classes;
        labels.push(class);
        for &p in &patterns[class] {
            let v = if spec.noise_std > 0.0 { p + noise.sample(&mut rng) } else { p };
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let shape = [m, spec.channels, spec.resolution, spec.resolution];
    Dataset::new(
        Tensor::new(&shape, data)?,
        labels,
        spec.classes,
        format!("synthetic-v{}", spec.variant),
    )
}

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parses concatenated CIFAR-10 binary records.
pub fn cifar_parse(bytes: &[u8], name: &str) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "{name}: length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let m = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(m);
    let mut data = Vec::with_capacity(m * (CIFAR_RECORD - 1));
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!("{name}: record {r} has label {label} (expected < 10)")));
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(
        Tensor::new(&[m, 3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
        CIFAR_CLASSES,
        name,
    )
}

pub fn cifar_read(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    cifar_parse(&bytes, &path.display().to_string())
}

/// Concatenates several CIFAR-10 batch files in order.
pub fn cifar_read_all(paths: &[&Path]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(std::fs::read(p)?);
    }
    let name = paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("+");
    cifar_parse(&bytes, &name)
}

/// Encodes a 3x32x32 dataset with at most 10 classes as CIFAR-10 records,
/// quantizing pixels to 8 bits.
pub fn cifar_encode(dataset: &Dataset) -> Result<Vec<u8>> {
    let shape = dataset.images.shape();
    if shape[1..] != [3, CIFAR_SIDE, CIFAR_SIDE] || dataset.classes > CIFAR_CLASSES {
        return Err(Error::Data(format!(
            "CIFAR records need [M, 3, 32, 32] images and at most 10 classes, got {shape:?} / {}",
            dataset.classes
        )));
    }
    let per = CIFAR_RECORD - 1;
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (i, &label) in dataset.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            dataset.images.data()[i * per..(i + 1) * per]
                .iter()
                .map(|&v| (v * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn cifar_write(path: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, cifar_encode(dataset)?)?;
    Ok(())
}

/// Seeded per-epoch shuffling into mini-batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(Self { seed, batch_size })
    }

    fn rng(&self, epoch: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((epoch as u64) << 1) | stream);
        rng
    }

    /// Permutation of `0..len` for `epoch`.
    pub fn permutation(&self, len: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut self.rng(epoch, 0));
        order
    }

    /// Sample indices of each batch of `epoch`; the last batch may be smaller.
    pub fn batches(&self, len: usize, epoch: usize) -> Vec<Vec<usize>> {
        self.permutation(len, epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Random source for augmenting `epoch`, independent of the shuffle.
    pub fn augment_rng(&self, epoch: usize) -> ChaCha8Rng {
        self.rng(epoch, 1)
    }
}

/// Zero-pads each image by 4, crops back at a random offset and mirrors it
/// horizontally with probability 1/2.
pub fn augment<T: Float, R: Rng + ?Sized>(images: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    const PAD: usize = 4;
    let [n, c, h, w] = images.dims4("augment")?;
    let mut out = vec![T::zero(); images.len()];
    let src = images.data();
    for s in 0..n {
        let dy = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let dx = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let tx = if flip { w - 1 - x } else { x };
                    let sx = tx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(images.shape(), out)
}
