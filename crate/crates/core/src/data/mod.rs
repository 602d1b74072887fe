//! Samples, datasets, synthetic generation, augmentation and batching.

mod augment;
mod batches;
mod io;
mod synth;

pub use augment::{cutout, flip_rotate, rotate, AugmentConfig, Interpolation};
pub use batches::balanced_batches;
pub use io::{dataset_bytes, dataset_from_bytes, load_dataset, read_pgm, save_dataset, write_pgm};
pub use synth::{synth_generate, synth_generate_without_distractors, SplitDataset, SynthConfig};

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::AttackLabel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One image `[C, H, W]` with values in `[0, 1]` and its attack label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub attack: AttackLabel,
    pub image: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.image.shape() != [channels, height, width] {
                return Err(Error::Invalid(format!(
                    "sample {} has shape {:?}, dataset is [{channels}, {height}, {width}]",
                    s.id,
                    s.image.shape()
                )));
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<AttackLabel> {
        self.samples.iter().map(|s| s.attack).collect()
    }

    /// Sorted distinct spoof material ids.
    pub fn materials(&self) -> Vec<u32> {
        let mut m: Vec<u32> = self
            .samples
            .iter()
            .filter(|s| s.attack.is_spoof())
            .map(|s| s.attack.0)
            .collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// Stacks the selected images into `[N, C, H, W]`, optionally augmenting
    /// each one with `aug`.
    pub fn batch<S: Scalar, R: Rng + ?Sized>(
        &self,
        indices: &[usize],
        mut aug: Option<(&AugmentConfig, &mut R)>,
    ) -> Result<(Tensor<S>, Vec<AttackLabel>)> {
        if indices.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("sample index {i} out of range")))?;
            let img = match aug.as_mut() {
                Some((cfg, rng)) => {
                    let flipped = flip_rotate(&s.image, cfg, &mut **rng);
                    cutout(&flipped, cfg, &mut **rng)
                }
                None => s.image.clone(),
            };
            data.extend(img.data().iter().map(|&v| S::of(v)));
            labels.push(s.attack);
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, labels))
    }
}
