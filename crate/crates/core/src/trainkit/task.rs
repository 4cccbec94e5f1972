//! Seeded synthetic image classification: oriented stripes and Gaussian blobs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{BitflowError, Result};
use crate::tensor::{Nhwc, Tensor};

pub const IMAGE_SIZE: usize = 16;
pub const IMAGE_CHANNELS: usize = 8;
pub const CLASSES: usize = 10;

const SHAPES: usize = 5;
const LOW_CONTRAST: std::ops::Range<f32> = 0.3..0.5;
const HIGH_CONTRAST: std::ops::Range<f32> = 0.9..1.3;
const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
const IMAGE_LEN: usize = PIXELS * IMAGE_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTaskConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    /// Standard deviation of the per-value Gaussian noise.
    pub noise: f32,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            seed: 0xB17F10,
            train: 1000,
            val: 1000,
            noise: 0.9,
        }
    }
}

/// Images in NHWC order with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// Gather the listed samples into one batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
        if idx.is_empty() {
            return Err(BitflowError::EmptyInput);
        }
        let mut data = Vec::with_capacity(idx.len() * IMAGE_LEN);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(
            Nhwc::new(idx.len(), IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS),
            data,
        )?;
        Ok((t, labels))
    }

    /// The whole set as one tensor.
    pub fn all(&self) -> Result<(Tensor<f32>, Vec<u8>)> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Ten classes: five shapes (stripes at four orientations, a Gaussian blob)
/// at two contrast levels. Stripe period, phase, blob position and polarity
/// are drawn per sample. Every channel carries the same spatial pattern
/// scaled by a fixed per-channel gain, plus independent noise.
///
/// Once binarized, contrast only survives as spatial coherence, i.e. as the
/// magnitude of conv sums. Telling the contrast levels apart therefore
/// depends on sums that can exceed the 8-bit range.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub config: ToyTaskConfig,
    pub train: Dataset,
    pub val: Dataset,
}

impl ToyTask {
    pub fn generate(config: ToyTaskConfig) -> Result<Self> {
        if config.train == 0 || config.val == 0 {
            return Err(BitflowError::EmptyInput);
        }
        if !(config.noise.is_finite() && config.noise >= 0.0) {
            return Err(BitflowError::InvalidParameter(format!(
                "noise {}",
                config.noise
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gains: Vec<f32> = (0..IMAGE_CHANNELS)
            .map(|_| {
                let g = rng.gen_range(0.5f32..1.0);
                if rng.gen() {
                    g
                } else {
                    -g
                }
            })
            .collect();
        let noise = Normal::new(0.0f32, config.noise).expect("finite non-negative sigma");
        let mut make = |n: usize| {
            let mut labels: Vec<u8> = (0..n).map(|i| (i % CLASSES) as u8).collect();
            labels.shuffle(&mut rng);
            let mut images = Vec::with_capacity(n * IMAGE_LEN);
            for &label in &labels {
                let pattern = pattern(&mut rng, label % SHAPES as u8);
                let amp = if (label as usize) < SHAPES {
                    rng.gen_range(LOW_CONTRAST)
                } else {
                    rng.gen_range(HIGH_CONTRAST)
                };
                for p in pattern {
                    for g in &gains {
                        images.push(amp * g * p + noise.sample(&mut rng));
                    }
                }
            }
            Dataset { images, labels }
        };
        let train = make(config.train);
        let val = make(config.val);
        Ok(Self { config, train, val })
    }
}

/// One `IMAGE_SIZE²` spatial pattern in `[-1, 1]`.
fn pattern(rng: &mut impl Rng, shape: u8) -> Vec<f32> {
    let phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let period = if rng.gen() { 4.0 } else { 8.0 };
    let polarity = if rng.gen() { 1.0 } else { -1.0 };
    let (cy, cx) = (rng.gen_range(4.0f32..12.0), rng.gen_range(4.0f32..12.0));
    (0..PIXELS)
        .map(|i| {
            let (y, x) = ((i / IMAGE_SIZE) as f32, (i % IMAGE_SIZE) as f32);
            match shape {
                0..=3 => {
                    let u = match shape {
                        0 => x,
                        1 => (x + y) * std::f32::consts::FRAC_1_SQRT_2,
                        2 => y,
                        _ => (x - y) * std::f32::consts::FRAC_1_SQRT_2,
                    };
                    (std::f32::consts::TAU * u / period + phase).sin()
                }
                _ => {
                    let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                    polarity * (2.0 * (-r2 / 18.0).exp() - 1.0)
                }
            }
        })
        .collect()
}
