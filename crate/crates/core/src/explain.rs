//! Grad-CAM over the generator feature map, and accuracy under channel removal.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Model, N_CLASSES, SPOOF};
use crate::data::{write_pgm, Dataset};
use crate::denoise::{importance_order, ChannelDistance};
use crate::error::{shape_err, Error, Result};
use crate::metrics::DECISION_THRESHOLD;
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tape, Tensor};

/// A class activation map on the `h x w` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CAMap {
    pub h: usize,
    pub w: usize,
    /// Row-major, all `>= 0`.
    pub values: Vec<f64>,
    pub target_class: usize,
    /// Number of spatial positions averaged over when forming `alpha`.
    pub z: usize,
    /// Per-channel weights `alpha_k`.
    pub alpha: Vec<f64>,
}

impl CAMap {
    /// Scales by the maximum so values lie in `[0, 1]`; an all-zero map stays zero.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            self.values.iter().map(|v| v / max).collect()
        } else {
            self.values.clone()
        }
    }

    /// Bilinear resize of the map (align-corners) to `out_h x out_w`.
    pub fn upsample(&self, out_h: usize, out_w: usize) -> Vec<f64> {
        let coord = |i: usize, n_out: usize, n_in: usize| {
            if n_out <= 1 || n_in <= 1 {
                0.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = coord(y, out_h, self.h);
            let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
            let y1 = (y0 + 1).min(self.h - 1);
            for x in 0..out_w {
                let sx = coord(x, out_w, self.w);
                let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
                let x1 = (x0 + 1).min(self.w - 1);
                let v = |yy: usize, xx: usize| self.values[yy * self.w + xx];
                out.push(
                    v(y0, x0) * (1.0 - fx) * (1.0 - fy)
                        + v(y0, x1) * fx * (1.0 - fy)
                        + v(y1, x0) * (1.0 - fx) * fy
                        + v(y1, x1) * fx * fy,
                );
            }
        }
        out
    }

    /// Max-normalized 8-bit PGM at feature-map resolution.
    pub fn to_pgm(&self) -> Vec<u8> {
        write_pgm(self.w, self.h, &self.normalized())
    }
}

fn check_class(class: usize) -> Result<()> {
    if class >= N_CLASSES {
        return Err(Error::Invalid(format!("target class {class} out of range for {N_CLASSES} classes")));
    }
    Ok(())
}

/// Grad-CAM for one feature map `f` of shape `[1, C, h, w]`: `alpha_k` is the
/// spatial mean of the gradient of the pre-softmax logit of `class` with
/// respect to channel `k`, and the map is `ReLU(sum_k alpha_k f_k)`.
pub fn grad_cam_from_features<S: Scalar>(model: &Model<S>, f: &Tensor<S>, class: usize) -> Result<CAMap> {
    check_class(class)?;
    if f.rank() != 4 || f.shape()[0] != 1 {
        return Err(shape_err("grad_cam", format!("expected one feature map [1, C, h, w], got {:?}", f.shape())));
    }
    let (c, h, w) = (f.shape()[1], f.shape()[2], f.shape()[3]);
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let a = tape.param(f.clone());
    let logit = bound.classifier(bound.embedding(a)?)?.select_per_row(&[class])?.sum();
    let grads = tape.backward(logit)?;
    let g = grads.get_or_zeros(a);
    let z = h * w;
    let inv_z = 1.0 / z as f64;
    let g = g.to_f64_vec();
    let fv = f.to_f64_vec();
    let alpha: Vec<f64> = g.chunks_exact(z).map(|ch| ch.iter().sum::<f64>() * inv_z).collect();
    let mut values = vec![0.0; z];
    for (k, &ak) in alpha.iter().enumerate().take(c) {
        for (v, &fk) in values.iter_mut().zip(&fv[k * z..(k + 1) * z]) {
            *v += ak * fk;
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(CAMap { h, w, values, target_class: class, z, alpha })
}

/// Grad-CAM for a single image `[C, H, W]` (or `[1, C, H, W]`).
pub fn grad_cam<S: Scalar>(model: &Model<S>, image: &Tensor<S>, class: usize) -> Result<CAMap> {
    check_class(class)?;
    let x = match image.rank() {
        3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => return Err(shape_err("grad_cam", format!("expected a single image, got {:?}", image.shape()))),
    };
    let f = model.generator_values(&x)?;
    grad_cam_from_features(model, &f, class)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RemovalOrder {
    /// Most important channels removed first.
    Descending,
    /// Least important channels removed first.
    Ascending,
}

impl RemovalOrder {
    pub fn name(self) -> &'static str {
        match self {
            RemovalOrder::Descending => "descending",
            RemovalOrder::Ascending => "ascending",
        }
    }

    /// Channel removal sequence for this order.
    pub fn sequence<S: Scalar>(self, dis: &ChannelDistance<S>) -> Vec<usize> {
        match self {
            RemovalOrder::Descending => importance_order(dis),
            RemovalOrder::Ascending => {
                let v = dis.values();
                let mut order: Vec<usize> = (0..v.len()).collect();
                order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
                order
            }
        }
    }
}

const EVAL_CHUNK: usize = 64;

/// Generator feature maps for every sample, in chunks.
pub fn dataset_features<S: Scalar>(model: &Model<S>, data: &Dataset) -> Result<Vec<Tensor<S>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (x, _) = data.batch::<S, ChaCha8Rng>(chunk, None)?;
            model.generator_values(&x)
        })
        .collect()
}

/// Fraction of samples classified correctly at the 0.5 decision threshold.
pub fn accuracy<S: Scalar>(model: &Model<S>, features: &[Tensor<S>], data: &Dataset, keep: &[bool]) -> Result<f64> {
    let mut correct = 0usize;
    let mut i = 0usize;
    for f in features {
        let r = model.head_probs(&kernels::mask_channels(f, keep)?)?;
        for row in r.data().chunks_exact(N_CLASSES) {
            let said_spoof = row[SPOOF].as_f64() >= DECISION_THRESHOLD;
            correct += usize::from(said_spoof == data.samples[i].attack.is_spoof());
            i += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy after zeroing the first `r` channels of `order`, for `r = 0..=C`.
pub fn channel_removal_curve<S: Scalar>(
    model: &Model<S>,
    data: &Dataset,
    dis: &ChannelDistance<S>,
    order: RemovalOrder,
) -> Result<Vec<(usize, f64)>> {
    let c = model.feature_channels();
    if dis.channels() != c {
        return Err(shape_err("removal curve", format!("{} scores for {c} channels", dis.channels())));
    }
    let features = dataset_features(model, data)?;
    let seq = order.sequence(dis);
    let mut keep = vec![true; c];
    let mut curve = Vec::with_capacity(c + 1);
    curve.push((0, accuracy(model, &features, data, &keep)?));
    for (r, &ch) in seq.iter().enumerate() {
        keep[ch] = false;
        curve.push((r + 1, accuracy(model, &features, data, &keep)?));
    }
    Ok(curve)
}

/// `removed,accuracy,order` rows for any number of curves.
pub fn curve_csv(curves: &[(RemovalOrder, Vec<(usize, f64)>)]) -> String {
    let mut out = String::from("removed,accuracy,order\n");
    for (order, curve) in curves {
        for (r, acc) in curve {
            let _ = writeln!(out, "{r},{acc},{}", order.name());
        }
    }
    out
}
