//! Deterministic synthetic image classification task.
//!
//! Each class is an oriented sinusoidal grating with a class-specific
//! orientation, spatial frequency and colour tint. Samples jitter orientation and
//! frequency, draw a random phase, and add Gaussian pixel noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 200,
            eval_per_class: 50,
            image_size: 16,
            channels: 3,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2
            || self.train_per_class == 0
            || self.eval_per_class == 0
            || self.image_size == 0
            || self.channels == 0
        {
            return Err(Error::Config(format!(
                "dataset needs >= 2 classes and positive sample counts, size and channels: {self:?}"
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }
}

/// Images stored as one flat `count × channels × size × size` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the listed samples into a `b × c × H × W` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let shape = [indices.len(), self.channels, self.image_size, self.image_size];
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&shape, data).unwrap(), labels)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
}

fn render(spec: &SyntheticDatasetSpec, class: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let k = spec.num_classes as f64;
    let c = class as f64;
    let theta = PI * c / k + rng.gen_range(-0.08..0.08);
    let cycles = (1.5 + 0.75 * (class % 3) as f64) * rng.gen_range(0.92..1.08);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let s = spec.image_size as f64;
    let (dx, dy) = (libm::cos(theta), libm::sin(theta));
    for ch in 0..spec.channels {
        let hue = 2.0 * PI * (c / k + ch as f64 / spec.channels as f64);
        let tint = 0.1 * libm::cos(hue);
        let amp = 0.75 + 0.25 * libm::sin(hue);
        for y in 0..spec.image_size {
            for x in 0..spec.image_size {
                let t = 2.0 * PI * cycles * (x as f64 * dx + y as f64 * dy) / s + phase;
                out.push(tint + amp * libm::sin(t) + spec.noise_std * gaussian(rng));
            }
        }
    }
}

fn generate(spec: &SyntheticDatasetSpec, per_class: usize, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let count = per_class * spec.num_classes;
    let mut images = Vec::with_capacity(count * spec.channels * spec.image_size * spec.image_size);
    let mut labels = Vec::with_capacity(count);
    // classes interleaved so any prefix is roughly balanced
    for i in 0..count {
        let class = i % spec.num_classes;
        render(spec, class, &mut rng, &mut images);
        labels.push(class);
    }
    Dataset {
        images,
        labels,
        channels: spec.channels,
        image_size: spec.image_size,
        num_classes: spec.num_classes,
    }
}

fn normalize(ds: &mut Dataset, mean: &[f64], std: &[f64]) {
    let plane = ds.image_size * ds.image_size;
    for (i, v) in ds.images.iter_mut().enumerate() {
        let ch = (i / plane) % ds.channels;
        *v = (*v - mean[ch]) / std[ch];
    }
}

/// Builds the train and eval splits. Eval samples come from an independent
/// random stream; both splits are normalized with the train split's
/// per-channel mean and standard deviation.
pub fn make_dataset(spec: &SyntheticDatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut train = generate(spec, spec.train_per_class, 0);
    let mut eval = generate(spec, spec.eval_per_class, 1);
    let plane = spec.image_size * spec.image_size;
    let mut mean = vec![0.0; spec.channels];
    let mut sq = vec![0.0; spec.channels];
    for (i, v) in train.images.iter().enumerate() {
        let ch = (i / plane) % spec.channels;
        mean[ch] += v;
        sq[ch] += v * v;
    }
    let per_channel = (train.len() * plane) as f64;
    let std: Vec<f64> = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            *m /= per_channel;
            libm::sqrt((s / per_channel - *m * *m).max(1e-12))
        })
        .collect();
    normalize(&mut train, &mean, &std);
    normalize(&mut eval, &mean, &std);
    Ok((train, eval))
}
