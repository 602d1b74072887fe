//! Biometric error rates computed from per-sample spoof scores.
//!
//! A sample is called spoof iff its score is `>=` the threshold. FDR is the
//! fraction of live samples called spoof, TDR the fraction of spoofs called
//! spoof; APCER = 1 - TDR and BPCER = FDR at a given threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::atomic_write;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreEntry {
    pub id: u64,
    pub score: f64,
    pub is_spoof: bool,
}

/// Scores in `[0, 1]` with at least one live and one spoof entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    entries: Vec<ScoreEntry>,
    /// Sorted ascending, per class.
    live: Vec<f64>,
    spoof: Vec<f64>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !(0.0..=1.0).contains(&e.score)) {
            return Err(Error::Invalid(format!("score {} of sample {} is outside [0, 1]", e.score, e.id)));
        }
        let sorted = |spoof: bool| {
            let mut v: Vec<f64> = entries.iter().filter(|e| e.is_spoof == spoof).map(|e| e.score).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (live, spoof) = (sorted(false), sorted(true));
        if live.is_empty() || spoof.is_empty() {
            return Err(Error::Invalid(format!(
                "score set needs both classes, got {} live and {} spoof",
                live.len(),
                spoof.len()
            )));
        }
        Ok(Self { entries, live, spoof })
    }

    /// Entries with ids `0..n` in order.
    pub fn from_pairs(pairs: &[(f64, bool)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .enumerate()
                .map(|(i, &(score, is_spoof))| ScoreEntry { id: i as u64, score, is_spoof })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn at_or_above(sorted: &[f64], t: f64) -> usize {
        sorted.len() - sorted.partition_point(|&s| s < t)
    }

    /// `(FDR, TDR)` at threshold `t`.
    pub fn rates_at(&self, t: f64) -> (f64, f64) {
        let fdr = Self::at_or_above(&self.live, t) as f64 / self.live.len() as f64;
        let tdr = Self::at_or_above(&self.spoof, t) as f64 / self.spoof.len() as f64;
        (fdr, tdr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fdr: f64,
    pub tdr: f64,
}

/// One point per unique score plus a sentinel below the minimum and one above
/// the maximum, in ascending threshold order.
pub fn roc(scores: &ScoreSet) -> Vec<RocPoint> {
    let mut thresholds: Vec<f64> = scores.entries.iter().map(|e| e.score).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let lo = thresholds[0] - 1.0;
    let hi = thresholds[thresholds.len() - 1] + 1.0;
    std::iter::once(lo)
        .chain(thresholds)
        .chain(std::iter::once(hi))
        .map(|threshold| {
            let (fdr, tdr) = scores.rates_at(threshold);
            RocPoint { threshold, fdr, tdr }
        })
        .collect()
}

/// Highest TDR among ROC points whose FDR is at most `q`.
pub fn tdr_at_fdr(scores: &ScoreSet, q: f64) -> f64 {
    roc(scores)
        .iter()
        .filter(|p| p.fdr <= q)
        .map(|p| p.tdr)
        .fold(0.0, f64::max)
}

/// Equal error rate of APCER(t) = 1 - TDR(t) and BPCER(t) = FDR(t).
///
/// APCER - BPCER is nondecreasing along the threshold sweep, from -1 at the low
/// sentinel to +1 at the high one. At the first point where it is `>= 0`: an
/// exact tie returns the common rate; otherwise both curves are interpolated
/// linearly from the previous point to their crossing.
pub fn eer(scores: &ScoreSet) -> f64 {
    let pts = roc(scores);
    let rates = |p: &RocPoint| (1.0 - p.tdr, p.fdr);
    let j = pts
        .iter()
        .position(|p| {
            let (a, b) = rates(p);
            a - b >= 0.0
        })
        .expect("high sentinel has APCER 1 and BPCER 0");
    let (a1, b1) = rates(&pts[j]);
    if a1 == b1 {
        return a1;
    }
    let (a0, b0) = rates(&pts[j - 1]);
    let (d0, d1) = (a0 - b0, a1 - b1);
    let s = d0 / (d0 - d1);
    a0 + s * (a1 - a0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdErrors {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub ace: f64,
}

/// Error rates at a fixed decision threshold.
pub fn fixed_threshold_errors(scores: &ScoreSet, t: f64) -> ThresholdErrors {
    let (fdr, tdr) = scores.rates_at(t);
    let apcer = 1.0 - tdr;
    let acer = acer(apcer, fdr);
    ThresholdErrors { apcer, bpcer: fdr, acer, ace: acer }
}

pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

pub const DECISION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FDR: f64 = 0.01;

/// The six reported numbers; ACE, APCER, BPCER and ACER are taken at 0.5.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub ace: f64,
    pub tdr_at_fdr: f64,
    pub eer: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

impl MetricsReport {
    pub fn compute(scores: &ScoreSet) -> Self {
        let fixed = fixed_threshold_errors(scores, DECISION_THRESHOLD);
        Self {
            ace: fixed.ace,
            tdr_at_fdr: tdr_at_fdr(scores, DEFAULT_FDR),
            eer: eer(scores),
            apcer: fixed.apcer,
            bpcer: fixed.bpcer,
            acer: fixed.acer,
        }
    }

    pub const CSV_HEADER: &'static str = "ace,tdr_at_fdr_1pct,eer,apcer,bpcer,acer";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.ace, self.tdr_at_fdr, self.eer, self.apcer, self.bpcer, self.acer
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// `id,score,is_spoof` with `is_spoof` as 0/1. Floats print in shortest
/// round-trip form, so reading the file back gives identical values.
pub fn score_csv(scores: &ScoreSet) -> String {
    let mut out = String::from("id,score,is_spoof\n");
    for e in &scores.entries {
        let _ = writeln!(out, "{},{},{}", e.id, e.score, u8::from(e.is_spoof));
    }
    out
}

pub fn parse_score_csv(text: &str) -> Result<ScoreSet> {
    let fail = |line: usize, detail: String| Error::Format { what: "score CSV", pos: line as u64, detail };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "id,score,is_spoof")) => {}
        _ => return Err(fail(1, "expected header id,score,is_spoof".into())),
    }
    let mut entries = Vec::new();
    for (no, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(fail(no, format!("expected 3 fields, got {}", f.len())));
        }
        let id = f[0].parse().map_err(|e| fail(no, format!("bad id: {e}")))?;
        let score = f[1].parse().map_err(|e| fail(no, format!("bad score: {e}")))?;
        let is_spoof = match f[2] {
            "0" => false,
            "1" => true,
            other => return Err(fail(no, format!("is_spoof must be 0 or 1, got {other:?}"))),
        };
        entries.push(ScoreEntry { id, score, is_spoof });
    }
    ScoreSet::new(entries)
}

pub fn read_score_csv(path: &Path) -> Result<ScoreSet> {
    parse_score_csv(&fs::read_to_string(path)?)
}

pub fn write_score_csv(scores: &ScoreSet, path: &Path) -> Result<()> {
    atomic_write(path, score_csv(scores).as_bytes())
}

/// Plot-ready `threshold,fdr,tdr`.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fdr,tdr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fdr, p.tdr);
    }
    out
}
