//! Channel importance scoring and suppression of "noise" channels.
//!
//! Each training batch, every channel of the generator output is zeroed in turn
//! and pushed through the embedding and classifier heads; the mean absolute
//! change of the live probability is added to a cumulative per-channel score.
//! The `k` highest-scoring channels are kept and the rest are zeroed on the
//! differentiable path, which also cuts their gradient.

use crate::backbone::{Bound, Model, LIVE, N_CLASSES};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor, Var};

/// Cumulative per-channel importance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDistance<S> {
    dis: Vec<S>,
    batches_seen: u64,
    decay: Option<f64>,
}

impl<S: Scalar> ChannelDistance<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            dis: vec![S::zero(); channels],
            batches_seen: 0,
            decay: None,
        }
    }

    /// Multiplies the running scores by `decay` before each update. Off by
    /// default; with it on, scores are no longer monotone.
    pub fn with_decay(mut self, decay: Option<f64>) -> Self {
        self.decay = decay;
        self
    }

    pub fn from_parts(dis: Vec<S>, batches_seen: u64) -> Result<Self> {
        if dis.iter().any(|v| *v < S::zero() || !v.is_finite()) {
            return Err(Error::Invalid("channel distances must be finite and nonnegative".into()));
        }
        Ok(Self {
            dis,
            batches_seen,
            decay: None,
        })
    }

    pub fn values(&self) -> &[S] {
        &self.dis
    }

    pub fn channels(&self) -> usize {
        self.dis.len()
    }

    pub fn batches_seen(&self) -> u64 {
        self.batches_seen
    }

    pub fn is_all_zero(&self) -> bool {
        self.dis.iter().all(|v| v.is_zero())
    }

    /// Adds one batch worth of increments, in channel order.
    pub fn accumulate(&mut self, increments: &[S]) -> Result<()> {
        if increments.len() != self.dis.len() {
            return Err(shape_err(
                "channel distance",
                format!("{} increments for {} channels", increments.len(), self.dis.len()),
            ));
        }
        let decay = self.decay.map(S::of);
        for (d, &inc) in self.dis.iter_mut().zip(increments) {
            if let Some(r) = decay {
                *d *= r;
            }
            *d += inc;
        }
        self.batches_seen += 1;
        Ok(())
    }
}

/// Which channels survive suppression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiseMask {
    keep: Vec<bool>,
    k: usize,
}

impl DenoiseMask {
    /// Keeps every channel.
    pub fn all(channels: usize) -> Self {
        Self {
            keep: vec![true; channels],
            k: channels,
        }
    }

    pub fn from_keep(keep: Vec<bool>) -> Result<Self> {
        let k = keep.iter().filter(|&&b| b).count();
        if k == 0 {
            return Err(Error::Invalid("mask keeps no channel".into()));
        }
        Ok(Self { keep, k })
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }
}

/// Copy of `f` with channel `i` zeroed across the batch.
pub fn ablate_channel<S: Scalar>(f: &Tensor<S>, i: usize) -> Result<Tensor<S>> {
    let c = feature_channels(f)?;
    if i >= c {
        return Err(Error::Invalid(format!("channel {i} out of range for {c} channels")));
    }
    let mut keep = vec![true; c];
    keep[i] = false;
    kernels::mask_channels(f, &keep)
}

fn feature_channels<S: Scalar>(f: &Tensor<S>) -> Result<usize> {
    if f.rank() != 4 {
        return Err(shape_err("denoise", format!("expected [N, C, H, W], got {:?}", f.shape())));
    }
    Ok(f.shape()[1])
}

/// Per-channel `mean_n |a_n - a_{n,i}|`, where `a` is the live probability of
/// the clean head and `a_i` the one with channel `i` ablated. Gradient-free.
pub fn importance_increments<S: Scalar>(model: &Model<S>, f: &Tensor<S>) -> Result<Vec<S>> {
    let c = feature_channels(f)?;
    if c != model.feature_channels() {
        return Err(shape_err(
            "importance",
            format!("feature map has {c} channels, model expects {}", model.feature_channels()),
        ));
    }
    let n = f.shape()[0];
    let live = |probs: &Tensor<S>| -> Vec<S> {
        probs.data().chunks_exact(N_CLASSES).map(|r| r[LIVE]).collect()
    };
    let base = live(&model.head_probs(f)?);
    let inv_n = S::one() / S::of_usize(n);
    (0..c)
        .map(|i| {
            let ablated = live(&model.head_probs(&ablate_channel(f, i)?)?);
            let total: S = base.iter().zip(&ablated).map(|(&a, &ai)| (a - ai).abs()).sum();
            Ok(total * inv_n)
        })
        .collect()
}

/// Scores every channel of `f` and adds the result to `dis`.
pub fn importance_update<S: Scalar>(
    model: &Model<S>,
    f: &Tensor<S>,
    dis: &mut ChannelDistance<S>,
) -> Result<()> {
    if dis.channels() != model.feature_channels() {
        return Err(shape_err(
            "importance",
            format!("distance array has {} channels, model {}", dis.channels(), model.feature_channels()),
        ));
    }
    let inc = importance_increments(model, f)?;
    dis.accumulate(&inc)
}

fn check_k(k: usize, c: usize) -> Result<()> {
    if k == 0 || k > c {
        return Err(Error::Invalid(format!("k must be in 1..={c}, got {k}")));
    }
    Ok(())
}

/// Keeps the `k` channels with the largest scores; ties go to the lower index.
pub fn select_topk<S: Scalar>(dis: &ChannelDistance<S>, k: usize) -> Result<DenoiseMask> {
    let c = dis.channels();
    check_k(k, c)?;
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        dis.dis[b]
            .partial_cmp(&dis.dis[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; c];
    order[..k].iter().for_each(|&i| keep[i] = true);
    Ok(DenoiseMask { keep, k })
}

/// Keeps the `k` channels with the smallest scores; ties go to the lower index.
pub fn select_bottomk<S: Scalar>(dis: &ChannelDistance<S>, k: usize) -> Result<DenoiseMask> {
    let c = dis.channels();
    check_k(k, c)?;
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        dis.dis[a]
            .partial_cmp(&dis.dis[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; c];
    order[..k].iter().for_each(|&i| keep[i] = true);
    Ok(DenoiseMask { keep, k })
}

/// Channel indices sorted by descending importance (ties by lower index).
pub fn importance_order<S: Scalar>(dis: &ChannelDistance<S>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dis.channels()).collect();
    order.sort_by(|&a, &b| {
        dis.dis[b]
            .partial_cmp(&dis.dis[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Zeroes suppressed channels on the tape.
pub fn suppress_channels<'t, S: Scalar>(f: Var<'t, S>, mask: &DenoiseMask) -> Result<Var<'t, S>> {
    f.mask_channels(mask.keep())
}

/// Clean and suppressed passes that share one generator forward.
pub struct DenoisedForward<'t, S> {
    pub f: Var<'t, S>,
    pub e: Var<'t, S>,
    pub o: Var<'t, S>,
    pub e_denoised: Var<'t, S>,
    pub o_denoised: Var<'t, S>,
}

pub fn denoised_logits<'t, S: Scalar>(
    bound: &Bound<'t, '_, S>,
    x: Var<'t, S>,
    mask: &DenoiseMask,
) -> Result<DenoisedForward<'t, S>> {
    let f = bound.generator(x)?;
    let e = bound.embedding(f)?;
    let o = bound.classifier(e)?;
    let f_dn = suppress_channels(f, mask)?;
    let e_denoised = bound.embedding(f_dn)?;
    let o_denoised = bound.classifier(e_denoised)?;
    Ok(DenoisedForward {
        f,
        e,
        o,
        e_denoised,
        o_denoised,
    })
}
