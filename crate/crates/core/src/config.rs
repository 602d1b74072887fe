//! Run configuration: flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{ModelConfig, Stage};
use crate::data::{AugmentConfig, Interpolation, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Which parts of the method a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Cross-entropy only; no importance scoring, no suppression.
    Baseline,
    /// Cross-entropy plus the triplet loss on the clean embedding.
    PaOnly,
    /// Suppression with the denoised cross-entropy, no triplet loss.
    CfdOnly,
    /// Everything, but the mask keeps the `k` least important channels.
    CfdRegularize,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::PaOnly,
        Variant::CfdOnly,
        Variant::CfdRegularize,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PaOnly => "pa_only",
            Variant::CfdOnly => "cfd_only",
            Variant::CfdRegularize => "cfd_regularize",
            Variant::Full => "full",
        }
    }

    /// Whether channel importance is scored and a mask applied during training.
    pub fn uses_suppression(self) -> bool {
        matches!(self, Variant::CfdOnly | Variant::CfdRegularize | Variant::Full)
    }

    /// Loss weights after switching off the terms this variant lacks.
    pub fn effective_weights(self, w: &LossWeights) -> LossWeights {
        match self {
            Variant::Baseline => LossWeights { lambda2: 0.0, lambda3: 0.0, ..*w },
            Variant::PaOnly => LossWeights { lambda3: 0.0, ..*w },
            Variant::CfdOnly => LossWeights { lambda2: 0.0, ..*w },
            Variant::CfdRegularize | Variant::Full => *w,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    /// Number of channels kept by the mask.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional multiplicative decay of the running channel scores.
    pub dis_decay: Option<f64>,
    /// Whether evaluation applies the trained mask to the feature map.
    pub apply_mask: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
            k: 4,
            epochs: 12,
            batch_size: 16,
            seed: 0,
            variant: Variant::Full,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dis_decay: None,
            apply_mask: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// `8:2,16:2,16:1` = (out_channels:stride) per stage.
fn parse_stages(value: &str) -> Result<Vec<Stage>> {
    value
        .split(',')
        .map(|s| {
            let (c, st) = s
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("generator_stages: expected channels:stride, got {s:?}")))?;
            Ok(Stage {
                out_channels: parse("generator_stages", c.trim())?,
                stride: parse("generator_stages", st.trim())?,
            })
        })
        .collect()
}

fn format_stages(stages: &[Stage]) -> String {
    stages
        .iter()
        .map(|s| format!("{}:{}", s.out_channels, s.stride))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn feature_channels(&self) -> usize {
        self.model.feature_channels()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.synth;
        let a = &mut self.augment;
        let l = &mut self.loss;
        match key {
            "input_h" => m.input_h = parse(key, v)?,
            "input_w" => m.input_w = parse(key, v)?,
            "input_ch" => m.input_ch = parse(key, v)?,
            "embed_hidden" => m.embed_hidden = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "generator_stages" => m.generator_stages = parse_stages(v)?,
            "feature_channels" => {
                let c: usize = parse(key, v)?;
                *m = m.clone().with_feature_channels(c);
            }
            "n_materials" => s.n_materials = parse(key, v)?,
            "held_out_materials" => s.held_out_materials = parse(key, v)?,
            "image_size" => s.image_size = parse(key, v)?,
            "train_live" => s.train_live = parse(key, v)?,
            "train_per_material" => s.train_per_material = parse(key, v)?,
            "test_live" => s.test_live = parse(key, v)?,
            "test_per_material" => s.test_per_material = parse(key, v)?,
            "ridge_freq_min" => s.ridge_freq_min = parse(key, v)?,
            "ridge_freq_max" => s.ridge_freq_max = parse(key, v)?,
            "spoof_contrast" => s.spoof_contrast = parse(key, v)?,
            "material_strength" => s.material_strength = parse(key, v)?,
            "distractor_strength" => s.distractor_strength = parse(key, v)?,
            "distractor_count" => s.distractor_count = parse(key, v)?,
            "noise_sigma" => s.noise_sigma = parse(key, v)?,
            "data_seed" => s.seed = parse(key, v)?,
            "cutout_count" => a.cutout_count = parse(key, v)?,
            "cutout_side_ratio" => a.cutout_side_ratio = parse(key, v)?,
            "hflip_prob" => a.hflip_prob = parse(key, v)?,
            "vflip_prob" => a.vflip_prob = parse(key, v)?,
            "rotation_degrees" => a.rotation_degrees = parse(key, v)?,
            "interpolation" => {
                a.interpolation = match v {
                    "bilinear" => Interpolation::Bilinear,
                    "nearest" => Interpolation::Nearest,
                    _ => return Err(Error::Config(format!("interpolation: unknown mode {v:?}"))),
                }
            }
            "lambda1" => l.lambda1 = parse(key, v)?,
            "lambda2" => l.lambda2 = parse(key, v)?,
            "lambda3" => l.lambda3 = parse(key, v)?,
            "margin" => l.margin = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "dis_decay" => {
                self.dis_decay = if v == "none" { None } else { Some(parse(key, v)?) };
            }
            "apply_mask" => self.apply_mask = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            cfg.set(key, value.trim()).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every key in canonical order; parsing the result gives `self` back.
    pub fn to_text(&self) -> String {
        let (m, s, a, l) = (&self.model, &self.synth, &self.augment, &self.loss);
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("input_h", m.input_h.to_string());
        kv("input_w", m.input_w.to_string());
        kv("input_ch", m.input_ch.to_string());
        kv("embed_hidden", m.embed_hidden.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("generator_stages", format_stages(&m.generator_stages));
        kv("n_materials", s.n_materials.to_string());
        kv("held_out_materials", s.held_out_materials.to_string());
        kv("image_size", s.image_size.to_string());
        kv("train_live", s.train_live.to_string());
        kv("train_per_material", s.train_per_material.to_string());
        kv("test_live", s.test_live.to_string());
        kv("test_per_material", s.test_per_material.to_string());
        kv("ridge_freq_min", s.ridge_freq_min.to_string());
        kv("ridge_freq_max", s.ridge_freq_max.to_string());
        kv("spoof_contrast", s.spoof_contrast.to_string());
        kv("material_strength", s.material_strength.to_string());
        kv("distractor_strength", s.distractor_strength.to_string());
        kv("distractor_count", s.distractor_count.to_string());
        kv("noise_sigma", s.noise_sigma.to_string());
        kv("data_seed", s.seed.to_string());
        kv("cutout_count", a.cutout_count.to_string());
        kv("cutout_side_ratio", a.cutout_side_ratio.to_string());
        kv("hflip_prob", a.hflip_prob.to_string());
        kv("vflip_prob", a.vflip_prob.to_string());
        kv("rotation_degrees", a.rotation_degrees.to_string());
        kv(
            "interpolation",
            match a.interpolation {
                Interpolation::Bilinear => "bilinear",
                Interpolation::Nearest => "nearest",
            }
            .into(),
        );
        kv("lambda1", l.lambda1.to_string());
        kv("lambda2", l.lambda2.to_string());
        kv("lambda3", l.lambda3.to_string());
        kv("margin", l.margin.to_string());
        kv("k", self.k.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("variant", self.variant.name().into());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("dis_decay", self.dis_decay.map_or("none".into(), |d| d.to_string()));
        kv("apply_mask", self.apply_mask.to_string());
        o
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        let c = self.feature_channels();
        if self.k == 0 || self.k > c {
            return Err(Error::Config(format!("k must be in 1..={c}, got {}", self.k)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        let classes = self.synth.train_materials().len() + 1;
        if self.batch_size < 2 * classes {
            return Err(Error::Config(format!(
                "batch_size {} cannot hold two samples from each of {classes} training classes",
                self.batch_size
            )));
        }
        if self.model.input_h != self.synth.image_size
            || self.model.input_w != self.synth.image_size
            || self.model.input_ch != 1
        {
            return Err(Error::Config(format!(
                "model input {}x{}x{} does not match the synthetic {}x{} grayscale images",
                self.model.input_ch, self.model.input_h, self.model.input_w, self.synth.image_size, self.synth.image_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if let Some(d) = self.dis_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("dis_decay must be in (0, 1], got {d}")));
            }
        }
        Ok(())
    }
}
