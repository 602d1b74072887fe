//! Cross-entropy, the attack-type triplet loss, and their weighted combination.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Fine-grained label: 0 is live, `1..=n` are spoof material ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttackLabel(pub u32);

impl AttackLabel {
    pub const LIVE: AttackLabel = AttackLabel(0);

    pub fn is_live(self) -> bool {
        self.0 == 0
    }

    pub fn is_spoof(self) -> bool {
        !self.is_live()
    }

    /// Binary class index: 0 live, 1 spoof.
    pub fn liveness(self) -> usize {
        usize::from(self.is_spoof())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3];
        if l.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if l.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config("margin must be positive".into()));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the labelled class, `y` in `{0, 1}`.
pub fn cross_entropy<'t, S: Scalar>(o: Var<'t, S>, y: &[usize]) -> Result<Var<'t, S>> {
    let k = o.shape().get(1).copied().unwrap_or(0);
    if let Some(bad) = y.iter().find(|&&c| c >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok(o.log_softmax()?.select_per_row(y)?.mean().scale(-S::one()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn squared_distances<S: Scalar>(e: &Tensor<S>) -> Vec<Vec<S>> {
    let (n, d) = (e.shape()[0], e.shape()[1]);
    let rows: Vec<&[S]> = e.data().chunks_exact(d).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| rows[i].iter().zip(rows[j]).map(|(&a, &b)| (a - b) * (a - b)).sum())
                .collect()
        })
        .collect()
}

/// Batch-hard mining: for every anchor with a same-class partner and an
/// other-class sample, the farthest positive and the nearest negative.
/// Ties resolve to the lower index.
pub fn mine_triplets<S: Scalar>(e: &Tensor<S>, labels: &[AttackLabel]) -> Result<Vec<Triplet>> {
    if e.rank() != 2 || e.shape()[0] != labels.len() {
        return Err(Error::Invalid(format!(
            "embeddings {:?} vs {} labels",
            e.shape(),
            labels.len()
        )));
    }
    let dist = squared_distances(e);
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| dist[a][j] > dist[a][p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| dist[a][j] < dist[a][q]) {
                neg = Some(j);
            }
        }
        if let (Some(positive), Some(negative)) = (pos, neg) {
            out.push(Triplet {
                anchor: a,
                positive,
                negative,
            });
        }
    }
    Ok(out)
}

/// Mean over mined triplets of `max(|e_a - e_p|^2 - |e_a - e_n|^2 + margin, 0)`;
/// zero when nothing can be mined.
pub fn pa_adaptation<'t, S: Scalar>(
    e: Var<'t, S>,
    labels: &[AttackLabel],
    margin: f64,
) -> Result<Var<'t, S>> {
    let triplets = mine_triplets(&e.value(), labels)?;
    triplet_loss(e, &triplets, margin)
}

/// Hinge triplet loss over an explicit triplet list.
pub fn triplet_loss<'t, S: Scalar>(e: Var<'t, S>, triplets: &[Triplet], margin: f64) -> Result<Var<'t, S>> {
    if triplets.is_empty() {
        return Ok(e.tape().constant(Tensor::scalar(S::zero())));
    }
    let idx = |f: fn(&Triplet) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
    let ea = e.gather_rows(&idx(|t| t.anchor))?;
    let ep = e.gather_rows(&idx(|t| t.positive))?;
    let en = e.gather_rows(&idx(|t| t.negative))?;
    let dp = ea - ep;
    let dn = ea - en;
    let d_pos = (dp * dp).sum_rows()?;
    let d_neg = (dn * dn).sum_rows()?;
    Ok((d_pos - d_neg).add_scalar(S::of(margin)).relu().mean())
}

/// The three weighted terms and their sum.
pub struct CombinedLoss<'t, S> {
    pub total: Var<'t, S>,
    pub clean_ce: f64,
    pub pa: f64,
    pub denoised_ce: f64,
}

/// `lambda1 * CE(o, y) + lambda2 * PA(e'', a) + lambda3 * CE(o'', y)`.
/// Terms with zero weight are skipped entirely.
pub fn combined_loss<'t, S: Scalar>(
    o: Var<'t, S>,
    o_denoised: Var<'t, S>,
    e_denoised: Var<'t, S>,
    labels: &[AttackLabel],
    w: &LossWeights,
) -> Result<CombinedLoss<'t, S>> {
    let y: Vec<usize> = labels.iter().map(|a| a.liveness()).collect();
    let tape = o.tape();
    let mut total: Option<Var<'t, S>> = None;
    let mut add = |term: Var<'t, S>, lambda: f64| {
        let t = term.scale(S::of(lambda));
        total = Some(match total {
            Some(acc) => acc + t,
            None => t,
        });
    };
    let (mut clean_ce, mut pa, mut denoised_ce) = (0.0, 0.0, 0.0);
    if w.lambda1 != 0.0 {
        let t = cross_entropy(o, &y)?;
        clean_ce = t.value().item().as_f64();
        add(t, w.lambda1);
    }
    if w.lambda2 != 0.0 {
        let t = pa_adaptation(e_denoised, labels, w.margin)?;
        pa = t.value().item().as_f64();
        add(t, w.lambda2);
    }
    if w.lambda3 != 0.0 {
        let t = cross_entropy(o_denoised, &y)?;
        denoised_ce = t.value().item().as_f64();
        add(t, w.lambda3);
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(S::zero())));
    Ok(CombinedLoss {
        total,
        clean_ce,
        pa,
        denoised_ce,
    })
}
