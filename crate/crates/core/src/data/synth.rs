//! Synthetic fingerprint-like images with material-specific spoof artefacts.
//!
//! Every image is a curved sinusoidal ridge grating plus Gaussian noise. Spoof
//! images additionally carry a grating texture whose frequency is fixed per
//! material (orientation varies per image), and slightly flattened ridge
//! contrast.
//! All images, live or spoof, also receive randomly placed distractor patches
//! drawn from one shared distribution, so some feature channels respond to
//! content that carries no class information.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::AttackLabel;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Number of spoof materials; the highest `held_out_materials` ids only
    /// appear in the test split.
    pub n_materials: u32,
    pub held_out_materials: u32,
    pub image_size: usize,
    pub train_live: usize,
    pub train_per_material: usize,
    pub test_live: usize,
    pub test_per_material: usize,
    /// Ridge frequency range in cycles per pixel.
    pub ridge_freq_min: f64,
    pub ridge_freq_max: f64,
    /// Ridge amplitude of spoofs relative to live images.
    pub spoof_contrast: f64,
    /// Amplitude of the material texture.
    pub material_strength: f64,
    /// Amplitude of the class-independent distractor patches.
    pub distractor_strength: f64,
    /// Maximum number of distractor patches per image.
    pub distractor_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_materials: 4,
            held_out_materials: 1,
            image_size: 32,
            train_live: 240,
            train_per_material: 80,
            test_live: 120,
            test_per_material: 120,
            ridge_freq_min: 0.10,
            ridge_freq_max: 0.16,
            spoof_contrast: 0.7,
            material_strength: 0.12,
            distractor_strength: 0.35,
            distractor_count: 3,
            noise_sigma: 0.06,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_materials < 2 {
            return Err(Error::Config("n_materials must be at least 2".into()));
        }
        if self.held_out_materials == 0 || self.held_out_materials >= self.n_materials {
            return Err(Error::Config(
                "held_out_materials must be in 1..n_materials".into(),
            ));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        if !(self.ridge_freq_min > 0.0 && self.ridge_freq_min <= self.ridge_freq_max) {
            return Err(Error::Config("ridge frequency range is empty".into()));
        }
        if self.train_live < 2 || self.train_per_material < 2 {
            return Err(Error::Config("each training class needs at least 2 samples".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn train_materials(&self) -> Vec<u32> {
        (1..=self.n_materials - self.held_out_materials).collect()
    }

    pub fn test_materials(&self) -> Vec<u32> {
        (self.n_materials - self.held_out_materials + 1..=self.n_materials).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// Texture frequency of material `m`. Training materials are spread evenly
/// over `[0.26, 0.40]` cycles per pixel; each held-out material sits halfway
/// between two neighbouring training frequencies, so it is unseen but not
/// outside the training range.
fn material_frequency(cfg: &SynthConfig, m: u32) -> f64 {
    let (lo, hi) = (0.26, 0.40);
    let nt = cfg.n_materials - cfg.held_out_materials;
    let step = if nt > 1 { (hi - lo) / f64::from(nt - 1) } else { hi - lo };
    if m <= nt {
        lo + step * f64::from(m - 1)
    } else {
        let gap = (m - nt - 1) % (nt - 1).max(1);
        lo + step * (f64::from(gap) + 0.5)
    }
}

struct Painter<'a, R: Rng> {
    cfg: &'a SynthConfig,
    rng: R,
    noise: Normal<f64>,
}

impl<R: Rng> Painter<'_, R> {
    fn paint(&mut self, attack: AttackLabel, with_distractors: bool) -> Vec<f64> {
        let n = self.cfg.image_size;
        let c = (n as f64 - 1.0) / 2.0;
        let rng = &mut self.rng;

        let freq = rng.random_range(self.cfg.ridge_freq_min..=self.cfg.ridge_freq_max);
        let theta = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        let curve = rng.random_range(-1.0..1.0) / n as f64;
        let amp = 0.3 * if attack.is_spoof() { self.cfg.spoof_contrast } else { 1.0 };
        let (st, ct) = theta.sin_cos();

        let texture = attack.is_spoof().then(|| {
            let f = material_frequency(self.cfg, attack.0);
            let th: f64 = rng.random_range(0.0..PI);
            (f, th.sin_cos(), rng.random_range(0.0..2.0 * PI))
        });

        let mut img = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                let u = dx * ct + dy * st;
                let r2 = dx * dx + dy * dy;
                let mut v = 0.5 + amp * (2.0 * PI * freq * u + phase + curve * r2).sin();
                if let Some((f, (s, co), ph)) = texture {
                    v += self.cfg.material_strength * (2.0 * PI * f * (dx * co + dy * s) + ph).sin();
                }
                img[y * n + x] = v;
            }
        }

        // Distractors are drawn unconditionally so the random stream stays
        // aligned whether or not they are painted.
        let count = rng.random_range(0..=self.cfg.distractor_count);
        for _ in 0..count {
            let side = rng.random_range(n / 6..=n / 3).max(2);
            let y0 = rng.random_range(0..=n - side);
            let x0 = rng.random_range(0..=n - side);
            let f = rng.random_range(0.2..0.45);
            let (s, co) = rng.random_range(0.0..PI).sin_cos();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            if !with_distractors {
                continue;
            }
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    let w = (x as f64) * co + (y as f64) * s;
                    img[y * n + x] += self.cfg.distractor_strength
                        * (sign * 0.5 + 0.5 * (2.0 * PI * f * w).sin());
                }
            }
        }

        for v in &mut img {
            *v = (*v + self.noise.sample(rng)).clamp(0.0, 1.0);
        }
        img
    }
}

fn build_split<R: Rng>(
    painter: &mut Painter<'_, R>,
    live: usize,
    per_material: usize,
    materials: &[u32],
    first_id: u64,
    with_distractors: bool,
) -> Result<Dataset> {
    let n = painter.cfg.image_size;
    let mut labels = vec![AttackLabel::LIVE; live];
    for &m in materials {
        labels.extend(std::iter::repeat_n(AttackLabel(m), per_material));
    }
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, attack)| {
            let img = painter.paint(attack, with_distractors);
            Ok(Sample {
                id: first_id + i as u64,
                attack,
                image: Tensor::new(vec![1, n, n], img)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(1, n, n, samples)
}

fn generate(cfg: &SynthConfig, with_distractors: bool) -> Result<SplitDataset> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut painter = Painter {
        cfg,
        rng: stream_rng(cfg.seed, Stream::Data, 0),
        noise,
    };
    let train = build_split(
        &mut painter,
        cfg.train_live,
        cfg.train_per_material,
        &cfg.train_materials(),
        0,
        with_distractors,
    )?;
    let test = build_split(
        &mut painter,
        cfg.test_live,
        cfg.test_per_material,
        &cfg.test_materials(),
        train.len() as u64,
        with_distractors,
    )?;
    Ok(SplitDataset { train, test })
}

/// Deterministic train/test split; test spoofs use only held-out materials.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SplitDataset> {
    generate(cfg, true)
}

/// Same draws as [`synth_generate`] with the distractor patches left out.
pub fn synth_generate_without_distractors(cfg: &SynthConfig) -> Result<SplitDataset> {
    generate(cfg, false)
}
