//! Command implementations behind the `cfd` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, Variant};
use crate::data::{load_dataset, save_dataset, synth_generate};
use crate::error::{Error, Result};
use crate::explain::{channel_removal_curve, curve_csv, grad_cam, RemovalOrder};
use crate::metrics::{roc, roc_csv, score_csv, MetricsReport};
use crate::backbone::{LIVE, SPOOF};
use crate::train::{checkpoint_bytes, run, score_dataset, timing_csv, trained_from_checkpoint, Run};
use crate::util::atomic_write;

#[derive(Debug, Parser)]
#[command(name = "cfd", about = "Channel-wise feature denoising for fingerprint liveness detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration on its synthetic split and score the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the `seed` key of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a dataset with a checkpoint and report the metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset container file or a directory with labels.csv and PGM images.
        #[arg(long)]
        data: PathBuf,
        /// Score without the trained channel mask.
        #[arg(long)]
        no_mask: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all five variants for each seed and tabulate mean and s.d.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM maps for chosen samples plus channel-removal curves.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_train(&cfg, &out).map(|_| ())
        }
        Command::Eval { ckpt, data, no_mask, out } => cmd_evaluate(&ckpt, &data, !no_mask, &out).map(|_| ()),
        Command::Ablate { config, seeds, out } => cmd_ablate(&RunConfig::load(&config)?, &seeds, &out).map(|_| ()),
        Command::Explain { ckpt, data, ids, out } => cmd_explain(&ckpt, &data, &ids, &out),
    }
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    atomic_write(&dir.join(name), bytes)
}

/// Writes `model.ckpt`, `report.txt`, `losses.csv`, `metrics.csv`,
/// `scores.csv`, `dis.csv`, `config.cfg`, the two data splits and `timing.csv`
/// (the only file that varies between identical runs).
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Run> {
    cfg.validate()?;
    let split = synth_generate(&cfg.synth)?;
    let r = run(cfg, &split.train, &split.test)?;
    fs::create_dir_all(out)?;
    write(out, "model.ckpt", &checkpoint_bytes(&r.trained))?;
    write(out, "report.txt", r.report.to_text().as_bytes())?;
    write(out, "losses.csv", r.report.losses_csv().as_bytes())?;
    write(out, "metrics.csv", r.report.metrics.to_csv().as_bytes())?;
    write(out, "dis.csv", r.report.dis_csv().as_bytes())?;
    write(out, "scores.csv", score_csv(&r.scores).as_bytes())?;
    write(out, "config.cfg", cfg.to_text().as_bytes())?;
    save_dataset(&split.train, &out.join("train.data"))?;
    save_dataset(&split.test, &out.join("test.data"))?;
    write(out, "timing.csv", timing_csv(&r.timing).as_bytes())?;
    Ok(r)
}

/// Writes `scores.csv`, `metrics.csv` and `roc.csv`.
pub fn cmd_evaluate(ckpt: &Path, data: &Path, apply_mask: bool, out: &Path) -> Result<MetricsReport> {
    let trained = trained_from_checkpoint(&fs::read(ckpt)?)?;
    let dataset = load_dataset(data)?;
    let scores = score_dataset(&trained.model, trained.keep(apply_mask), &dataset)?;
    let metrics = MetricsReport::compute(&scores);
    fs::create_dir_all(out)?;
    write(out, "scores.csv", score_csv(&scores).as_bytes())?;
    write(out, "metrics.csv", metrics.to_csv().as_bytes())?;
    write(out, "roc.csv", roc_csv(&roc(&scores)).as_bytes())?;
    Ok(metrics)
}

/// One trained run inside an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub dis_all_zero: bool,
}

/// Sample mean and standard deviation (n - 1 denominator).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn ablation_runs_csv(cells: &[AblationCell]) -> String {
    let mut o = format!("variant,seed,{},dis_all_zero\n", MetricsReport::CSV_HEADER);
    for c in cells {
        let _ = writeln!(o, "{},{},{},{}", c.variant.name(), c.seed, c.metrics.csv_row(), u8::from(c.dis_all_zero));
    }
    o
}

/// Five rows, one per variant, with mean and s.d. of ACE and TDR@FDR=1%.
pub fn ablation_table_csv(cells: &[AblationCell]) -> String {
    let mut o = String::from("variant,runs,ace_mean,ace_sd,tdr_at_fdr_1pct_mean,tdr_at_fdr_1pct_sd,dis_all_zero\n");
    for v in Variant::ALL {
        let rows: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == v).collect();
        let ace: Vec<f64> = rows.iter().map(|c| c.metrics.ace).collect();
        let tdr: Vec<f64> = rows.iter().map(|c| c.metrics.tdr_at_fdr).collect();
        let (am, asd) = mean_sd(&ace);
        let (tm, tsd) = mean_sd(&tdr);
        let zero = rows.iter().all(|c| c.dis_all_zero);
        let _ = writeln!(o, "{},{},{am},{asd},{tm},{tsd},{}", v.name(), rows.len(), u8::from(zero));
    }
    o
}

/// Trains every variant for every seed on one shared synthetic split; writes
/// `ablation.csv` (summary) and `runs.csv` (one row per run).
pub fn cmd_ablate(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<AblationCell>> {
    cfg.validate()?;
    if seeds.len() < 3 {
        return Err(Error::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let split = synth_generate(&cfg.synth)?;
    let mut cells = Vec::with_capacity(seeds.len() * Variant::ALL.len());
    for &seed in seeds {
        for variant in Variant::ALL {
            let c = RunConfig { seed, variant, ..cfg.clone() };
            let r = run(&c, &split.train, &split.test)?;
            cells.push(AblationCell {
                variant,
                seed,
                metrics: r.report.metrics,
                dis_all_zero: r.trained.dis.is_all_zero(),
            });
        }
    }
    fs::create_dir_all(out)?;
    write(out, "runs.csv", ablation_runs_csv(&cells).as_bytes())?;
    write(out, "ablation.csv", ablation_table_csv(&cells).as_bytes())?;
    Ok(cells)
}

/// Writes `<id>_live.pgm` and `<id>_spoof.pgm` per id and `curve.csv` with
/// both removal orders over the whole dataset.
pub fn cmd_explain(ckpt: &Path, data: &Path, ids: &[u64], out: &Path) -> Result<()> {
    let trained = trained_from_checkpoint(&fs::read(ckpt)?)?;
    let dataset = load_dataset(data)?;
    let positions = ids
        .iter()
        .map(|&id| {
            dataset
                .position_of(id)
                .ok_or_else(|| Error::Invalid(format!("sample id {id} not in the dataset")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut files = Vec::new();
    for (&id, &pos) in ids.iter().zip(&positions) {
        let image = &dataset.samples[pos].image;
        for (class, name) in [(LIVE, "live"), (SPOOF, "spoof")] {
            let cam = grad_cam(&trained.model, image, class)?;
            files.push((format!("{id}_{name}.pgm"), cam.to_pgm()));
        }
    }
    let curves = [RemovalOrder::Descending, RemovalOrder::Ascending]
        .into_iter()
        .map(|o| Ok((o, channel_removal_curve(&trained.model, &dataset, &trained.dis, o)?)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    for (name, bytes) in files {
        write(out, &name, &bytes)?;
    }
    write(out, "curve.csv", curve_csv(&curves).as_bytes())
}
