//! The training loop, evaluation, checkpoints and run reports.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Model, ModelConfig, Stage};
use crate::config::{RunConfig, Variant};
use crate::data::{balanced_batches, Dataset};
use crate::denoise::{
    importance_update, select_bottomk, select_topk, suppress_channels, ChannelDistance, DenoiseMask,
};
use crate::error::{Error, Result};
use crate::losses::combined_loss;
use crate::metrics::{MetricsReport, ScoreEntry, ScoreSet};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{read_checkpoint, write_checkpoint, Adam, AdamConfig, NamedArray, Tape, Tensor};

/// Mean of each loss term over the batches of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub clean_ce: f64,
    pub pa: f64,
    pub denoised_ce: f64,
}

/// Wall-clock time per phase. Not part of the deterministic report.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTiming {
    /// Ablating every channel and re-running the heads.
    pub importance: Duration,
    /// Forward, backward and optimizer update.
    pub step: Duration,
    pub evaluate: Duration,
}

/// Model parameters together with the channel scores and the frozen mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub model: Model<f64>,
    pub dis: ChannelDistance<f64>,
    pub mask: DenoiseMask,
}

impl Trained {
    pub fn keep(&self, apply_mask: bool) -> Option<&[bool]> {
        apply_mask.then(|| self.mask.keep())
    }
}

/// Mask applied during training for the current scores.
fn training_mask(variant: Variant, dis: &ChannelDistance<f64>, k: usize) -> Result<DenoiseMask> {
    match variant {
        Variant::CfdRegularize => select_bottomk(dis, k),
        Variant::CfdOnly | Variant::Full => select_topk(dis, k),
        Variant::Baseline | Variant::PaOnly => Ok(DenoiseMask::all(dis.channels())),
    }
}

/// Runs the full training schedule on `train`.
pub fn train(cfg: &RunConfig, train: &Dataset) -> Result<(Trained, Vec<EpochLoss>, PhaseTiming)> {
    cfg.validate()?;
    let mc = &cfg.model;
    if [train.channels, train.height, train.width] != [mc.input_ch, mc.input_h, mc.input_w] {
        return Err(Error::Config(format!(
            "training images are {}x{}x{}, model expects {}x{}x{}",
            train.channels, train.height, train.width, mc.input_ch, mc.input_h, mc.input_w
        )));
    }
    let mut model = Model::<f64>::init(cfg.model.clone(), &mut stream_rng(cfg.seed, Stream::Init, 0))?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    });
    let c = model.feature_channels();
    let mut dis = ChannelDistance::new(c).with_decay(cfg.dis_decay);
    let weights = cfg.variant.effective_weights(&cfg.loss);
    let suppress = cfg.variant.uses_suppression();
    let labels = train.labels();
    let mut timing = PhaseTiming::default();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let batches = balanced_batches(&labels, cfg.batch_size, &mut stream_rng(cfg.seed, Stream::Batches, epoch as u64))?;
        let mut sums = [0.0; 4];
        for idx in &batches {
            let mut aug_rng = stream_rng(cfg.seed, Stream::Augment, step);
            step += 1;
            let (x, attack) = train.batch::<f64, _>(idx, Some((&cfg.augment, &mut aug_rng)))?;

            let t0 = Instant::now();
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let f = bound.generator(tape.constant(x))?;
            let e = bound.embedding(f)?;
            let o = bound.classifier(e)?;
            let (e_dn, o_dn) = if suppress {
                let t_imp = Instant::now();
                importance_update(&model, &f.value(), &mut dis)?;
                timing.importance += t_imp.elapsed();
                let mask = training_mask(cfg.variant, &dis, cfg.k)?;
                let e_dn = bound.embedding(suppress_channels(f, &mask)?)?;
                (e_dn, bound.classifier(e_dn)?)
            } else {
                (e, o)
            };
            let loss = combined_loss(o, o_dn, e_dn, &attack, &weights)?;
            let total = loss.total.value().item();
            if !total.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            let grads = bound.grads(&tape.backward(loss.total)?);
            drop(bound);
            let refs: Vec<&Tensor<f64>> = grads.iter().collect();
            adam.step(&mut model.values_mut(), &refs)?;
            timing.step += t0.elapsed();

            for (s, v) in sums.iter_mut().zip([total, loss.clean_ce, loss.pa, loss.denoised_ce]) {
                *s += v;
            }
        }
        let n = batches.len() as f64;
        losses.push(EpochLoss {
            epoch: epoch + 1,
            total: sums[0] / n,
            clean_ce: sums[1] / n,
            pa: sums[2] / n,
            denoised_ce: sums[3] / n,
        });
    }
    timing.step = timing.step.saturating_sub(timing.importance);
    let mask = training_mask(cfg.variant, &dis, cfg.k)?;
    Ok((Trained { model, dis, mask }, losses, timing))
}

const EVAL_CHUNK: usize = 64;

/// Spoof score of every sample, optionally with the channel mask applied.
pub fn score_dataset(model: &Model<f64>, keep: Option<&[bool]>, data: &Dataset) -> Result<ScoreSet> {
    let mc = &model.config;
    if [data.channels, data.height, data.width] != [mc.input_ch, mc.input_h, mc.input_w] {
        return Err(Error::Invalid(format!(
            "data images are {}x{}x{}, model expects {}x{}x{}",
            data.channels, data.height, data.width, mc.input_ch, mc.input_h, mc.input_w
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut entries = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch::<f64, ChaCha8Rng>(chunk, None)?;
        let scores = model.spoof_scores(&x, keep)?;
        for (&i, score) in chunk.iter().zip(scores) {
            let s = &data.samples[i];
            entries.push(ScoreEntry { id: s.id, score, is_spoof: s.attack.is_spoof() });
        }
    }
    ScoreSet::new(entries)
}

fn arch_array(cfg: &ModelConfig) -> Vec<f64> {
    let mut v = vec![
        cfg.input_ch as f64,
        cfg.input_h as f64,
        cfg.input_w as f64,
        cfg.embed_hidden as f64,
        cfg.embed_dim as f64,
        cfg.generator_stages.len() as f64,
    ];
    for s in &cfg.generator_stages {
        v.push(s.out_channels as f64);
        v.push(s.stride as f64);
    }
    v
}

fn arch_from_array(v: &[f64]) -> Result<ModelConfig> {
    let bad = || Error::Format { what: "checkpoint", pos: 0, detail: "malformed architecture array".into() };
    if v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) || v.len() < 6 {
        return Err(bad());
    }
    let u: Vec<usize> = v.iter().map(|&x| x as usize).collect();
    if u.len() != 6 + 2 * u[5] {
        return Err(bad());
    }
    Ok(ModelConfig {
        input_ch: u[0],
        input_h: u[1],
        input_w: u[2],
        embed_hidden: u[3],
        embed_dim: u[4],
        generator_stages: u[6..].chunks(2).map(|p| Stage { out_channels: p[0], stride: p[1] }).collect(),
    })
}

/// Architecture, parameters by name, channel scores and the mask.
pub fn checkpoint_bytes(t: &Trained) -> Vec<u8> {
    let mut arrays = vec![NamedArray::vector("arch", arch_array(&t.model.config))];
    for p in t.model.params() {
        arrays.push(NamedArray::new(p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
    }
    arrays.push(NamedArray::vector("dis", t.dis.values().to_vec()));
    arrays.push(NamedArray::vector("dis_batches", vec![t.dis.batches_seen() as f64]));
    arrays.push(NamedArray::vector(
        "mask_keep",
        t.mask.keep().iter().map(|&b| f64::from(u8::from(b))).collect(),
    ));
    write_checkpoint(&arrays)
}

pub fn trained_from_checkpoint(bytes: &[u8]) -> Result<Trained> {
    let arrays = read_checkpoint(bytes)?;
    let find = |name: &str| {
        arrays.iter().find(|a| a.name == name).ok_or_else(|| Error::Format {
            what: "checkpoint",
            pos: 0,
            detail: format!("missing array {name:?}"),
        })
    };
    let config = arch_from_array(&find("arch")?.values)?;
    let values = config
        .parameter_layout()
        .iter()
        .map(|(_, name, _)| {
            let a = find(name)?;
            Tensor::new(a.shape.clone(), a.values.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model::from_params(config, values)?;
    let batches = find("dis_batches")?.values.first().copied().unwrap_or(0.0) as u64;
    let dis = ChannelDistance::from_parts(find("dis")?.values.clone(), batches)?;
    let keep: Vec<bool> = find("mask_keep")?.values.iter().map(|&v| v != 0.0).collect();
    let c = model.feature_channels();
    if dis.channels() != c || keep.len() != c {
        return Err(Error::Format {
            what: "checkpoint",
            pos: 0,
            detail: format!("channel arrays do not match the {c} feature channels"),
        });
    }
    let mask = DenoiseMask::from_keep(keep)?;
    Ok(Trained { model, dis, mask })
}

/// Everything a run produces that is a pure function of its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config_text: String,
    pub losses: Vec<EpochLoss>,
    pub metrics: MetricsReport,
    pub dis: Vec<f64>,
    pub mask: Vec<bool>,
}

impl RunReport {
    pub fn losses_csv(&self) -> String {
        let mut o = String::from("epoch,total,clean_ce,pa,denoised_ce\n");
        for l in &self.losses {
            let _ = writeln!(o, "{},{},{},{},{}", l.epoch, l.total, l.clean_ce, l.pa, l.denoised_ce);
        }
        o
    }

    pub fn dis_csv(&self) -> String {
        let mut o = String::from("channel,dis,kept\n");
        for (i, (d, k)) in self.dis.iter().zip(&self.mask).enumerate() {
            let _ = writeln!(o, "{i},{d},{}", u8::from(*k));
        }
        o
    }

    /// One text file with the config echo, losses, test metrics and channel scores.
    pub fn to_text(&self) -> String {
        format!(
            "[config]\n{}\n[losses]\n{}\n[metrics]\n{}\n[dis]\n{}",
            self.config_text,
            self.losses_csv(),
            self.metrics.to_csv(),
            self.dis_csv()
        )
    }
}

pub fn timing_csv(t: &PhaseTiming) -> String {
    format!(
        "phase,seconds\nimportance,{}\nstep,{}\nevaluate,{}\n",
        t.importance.as_secs_f64(),
        t.step.as_secs_f64(),
        t.evaluate.as_secs_f64()
    )
}

/// Result of training one configuration and scoring its test split.
pub struct Run {
    pub trained: Trained,
    pub report: RunReport,
    pub scores: ScoreSet,
    pub timing: PhaseTiming,
}

/// Trains on `train`, then scores `test` (with the mask when `cfg.apply_mask`).
pub fn run(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset) -> Result<Run> {
    let (trained, losses, mut timing) = train(cfg, train_set)?;
    let t0 = Instant::now();
    let scores = score_dataset(&trained.model, trained.keep(cfg.apply_mask), test_set)?;
    let metrics = MetricsReport::compute(&scores);
    timing.evaluate = t0.elapsed();
    let report = RunReport {
        config_text: cfg.to_text(),
        losses,
        metrics,
        dis: trained.dis.values().to_vec(),
        mask: trained.mask.keep().to_vec(),
    };
    Ok(Run { trained, report, scores, timing })
}
