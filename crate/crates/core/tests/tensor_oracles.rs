//! Kernels against naive loop implementations, and tape gradients against
//! central finite differences.

use cfd_core::backbone::{Model, ModelConfig, Stage};
use cfd_core::losses::{combined_loss, AttackLabel, LossWeights};
use cfd_core::tensor::{finite_diff_check, kernels, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay out of reach of the step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let [n, ci, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for a in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.data()[((a * ci + c) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * ci + c) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((a * co + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for &(n, ci, h, w, co, kh, kw, stride, pad) in &[
        (2, 3, 7, 6, 4, 3, 3, 1, 1),
        (1, 1, 8, 8, 2, 3, 3, 2, 1),
        (2, 2, 5, 9, 3, 1, 1, 1, 0),
        (1, 2, 6, 6, 2, 3, 2, 2, 0),
        (3, 4, 4, 4, 5, 3, 3, 1, 2),
    ] {
        let x = rand_tensor(&[n, ci, h, w], &mut rng, -1.0, 1.0);
        let k = rand_tensor(&[co, ci, kh, kw], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[co], &mut rng, -1.0, 1.0);
        let got = kernels::conv2d(&x, &k, &b, stride, pad).unwrap();
        close(got.data(), &conv_oracle(&x, &k, &b, stride, pad), 1e-12);
    }
}

#[test]
fn dense_avgpool_softmax_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[4, 5], &mut rng, -2.0, 2.0);
    let w = rand_tensor(&[3, 5], &mut rng, -2.0, 2.0);
    let b = rand_tensor(&[3], &mut rng, -2.0, 2.0);
    let got = kernels::dense(&x, &w, &b).unwrap();
    let mut want = vec![0.0; 12];
    for i in 0..4 {
        for j in 0..3 {
            want[i * 3 + j] = b.data()[j];
            for k in 0..5 {
                want[i * 3 + j] += x.data()[i * 5 + k] * w.data()[j * 5 + k];
            }
        }
    }
    close(got.data(), &want, 1e-12);

    let f = rand_tensor(&[2, 3, 4, 5], &mut rng, -1.0, 1.0);
    let pooled = kernels::global_avgpool(&f).unwrap();
    for nc in 0..6 {
        let mut s = 0.0;
        for p in 0..20 {
            s += f.data()[nc * 20 + p];
        }
        assert!((pooled.data()[nc] - s / 20.0).abs() < 1e-14);
    }

    let z = rand_tensor(&[3, 4], &mut rng, -30.0, 30.0);
    let sm = kernels::softmax(&z).unwrap();
    let lsm = kernels::log_softmax(&z).unwrap();
    for r in 0..3 {
        let row = &z.data()[r * 4..(r + 1) * 4];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..4 {
            let p = row[c].exp() / denom;
            assert!((sm.data()[r * 4 + c] - p).abs() < 1e-12);
            assert!((lsm.data()[r * 4 + c] - p.ln()).abs() < 1e-9);
        }
    }
}

const POINTS: u64 = 10;
const TOL: f64 = 1e-4;

fn check_points(name: &str, shape: &[usize], f: impl for<'t> Fn(cfd_core::tensor::Var<'t, f64>) -> cfd_core::Result<cfd_core::tensor::Var<'t, f64>>) {
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let p = away_from_zero(shape, &mut rng);
        let err = finite_diff_check(&f, &p).unwrap();
        assert!(err < TOL, "{name} at point {seed}: relative error {err}");
    }
}

#[test]
fn elementwise_ops_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    check_points("add", &[3, 4], |x| Ok((x + x.tape().constant(c.clone())).sum()));
    check_points("sub", &[3, 4], |x| Ok(((x.tape().constant(c.clone()) - x) * x).sum()));
    check_points("mul", &[3, 4], |x| Ok((x * x * x.tape().constant(c.clone())).sum()));
    check_points("scale", &[3, 4], |x| Ok((x.scale(-2.5) * x).sum()));
    check_points("add_scalar", &[3, 4], |x| Ok((x.add_scalar(0.7) * x).sum()));
    check_points("relu", &[3, 4], |x| Ok((x.relu() * x).sum()));
    check_points("mean", &[3, 4], |x| Ok((x * x).mean()));
}

#[test]
fn structured_ops_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = rand_tensor(&[3, 5], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[3], &mut rng, -1.0, 1.0);
    let q = rand_tensor(&[4, 3], &mut rng, -1.0, 1.0);
    check_points("dense input", &[4, 5], |x| {
        let t = x.tape();
        Ok((x.dense(t.constant(w.clone()), t.constant(b.clone()))? * t.constant(q.clone())).sum())
    });
    let xd = rand_tensor(&[4, 5], &mut rng, -1.0, 1.0);
    check_points("dense weight", &[3, 5], |wv| {
        let t = wv.tape();
        Ok((t.constant(xd.clone()).dense(wv, t.constant(b.clone()))? * t.constant(q.clone())).sum())
    });
    check_points("dense bias", &[3], |bv| {
        let t = bv.tape();
        Ok((t.constant(xd.clone()).dense(t.constant(w.clone()), bv)? * t.constant(q.clone())).sum())
    });

    let y = [2, 0, 1, 1];
    check_points("softmax", &[4, 3], |x| {
        let t = x.tape();
        Ok((x.softmax()? * t.constant(q.clone())).sum())
    });
    check_points("log_softmax + select", &[4, 3], |x| Ok(x.log_softmax()?.select_per_row(&y)?.mean()));
    check_points("gather + sum_rows", &[4, 3], |x| {
        let g = x.gather_rows(&[3, 0, 0, 2])?;
        Ok((g * g).sum_rows()?.sum())
    });

    let pw = rand_tensor(&[2, 3, 4, 4], &mut rng, -1.0, 1.0);
    check_points("global_avgpool", &[2, 3, 4, 4], |x| {
        let t = x.tape();
        Ok((x.global_avgpool()? * t.constant(Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.2, -0.3]).unwrap())).sum())
    });
    check_points("mask_channels", &[2, 3, 4, 4], |x| {
        let t = x.tape();
        Ok((x.mask_channels(&[true, false, true])? * t.constant(pw.clone())).sum())
    });
}

#[test]
fn conv_finite_difference_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = rand_tensor(&[3, 2, 3, 3], &mut rng, -0.5, 0.5);
    let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
    let x = rand_tensor(&[2, 2, 5, 5], &mut rng, -1.0, 1.0);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let oh = (5 + 2 * pad - 3) / stride + 1;
        let q = rand_tensor(&[2, 3, oh, oh], &mut rng, -1.0, 1.0);
        check_points("conv input", &[2, 2, 5, 5], |xv| {
            let t = xv.tape();
            Ok((xv.conv2d(t.constant(k.clone()), t.constant(b.clone()), stride, pad)? * t.constant(q.clone())).sum())
        });
        check_points("conv kernel", &[3, 2, 3, 3], |kv| {
            let t = kv.tape();
            Ok((t.constant(x.clone()).conv2d(kv, t.constant(b.clone()), stride, pad)? * t.constant(q.clone())).sum())
        });
        check_points("conv bias", &[3], |bv| {
            let t = bv.tape();
            Ok((t.constant(x.clone()).conv2d(t.constant(k.clone()), bv, stride, pad)? * t.constant(q.clone())).sum())
        });
    }
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        input_h: 8,
        input_w: 8,
        input_ch: 1,
        embed_hidden: 4,
        embed_dim: 3,
        generator_stages: vec![Stage { out_channels: 3, stride: 2 }, Stage { out_channels: 4, stride: 1 }],
    }
}

/// Full model plus combined loss, differentiated with respect to every
/// parameter tensor in turn.
#[test]
fn combined_loss_through_model_finite_difference() {
    let cfg = small_model_config();
    let labels = [AttackLabel(0), AttackLabel(0), AttackLabel(1), AttackLabel(2), AttackLabel(1), AttackLabel(2)];
    let keep = [true, false, true, true];
    let weights = LossWeights { margin: 2.0, ..LossWeights::default() };
    let mut total_params = 0;
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + point);
        let init = Model::<f64>::init(cfg.clone(), &mut rng).unwrap();
        // zero-initialised biases would put ReLU inputs exactly on the kink
        let values = init
            .params()
            .iter()
            .map(|p| if p.name.ends_with("bias") { away_from_zero(p.value.shape(), &mut rng) } else { p.value.clone() })
            .collect();
        let model = Model::from_params(cfg.clone(), values).unwrap();
        let x = rand_tensor(&[6, 1, 8, 8], &mut rng, 0.0, 1.0);
        total_params = model.params().iter().map(|p| p.value.len()).sum();
        for (pi, p) in model.params().iter().enumerate() {
            let err = finite_diff_check(
                |v| {
                    let tape = v.tape();
                    // every parameter constant except number `pi`, which is `v`
                    let mut vars = model.bind_frozen(tape).vars().to_vec();
                    vars[pi] = v;
                    let (o, o_dn, e_dn) = forward_with(&cfg, &vars, tape.constant(x.clone()), &keep)?;
                    Ok(combined_loss(o, o_dn, e_dn, &labels, &weights)?.total)
                },
                &p.value,
            )
            .unwrap();
            assert!(err < TOL, "point {point}, parameter {}: relative error {err}", p.name);
        }
    }
    assert!(total_params >= 50, "{total_params}");
}

/// The model forward written against an explicit parameter list, returning
/// (clean logits, denoised logits, denoised embedding).
fn forward_with<'t>(
    cfg: &ModelConfig,
    p: &[cfd_core::tensor::Var<'t, f64>],
    x: cfd_core::tensor::Var<'t, f64>,
    keep: &[bool],
) -> cfd_core::Result<(cfd_core::tensor::Var<'t, f64>, cfd_core::tensor::Var<'t, f64>, cfd_core::tensor::Var<'t, f64>)> {
    let mut h = x;
    for (i, st) in cfg.generator_stages.iter().enumerate() {
        h = h.conv2d(p[2 * i], p[2 * i + 1], st.stride, 1)?.relu();
    }
    let o = 2 * cfg.generator_stages.len();
    let embed = |f: cfd_core::tensor::Var<'t, f64>| -> cfd_core::Result<cfd_core::tensor::Var<'t, f64>> {
        f.conv2d(p[o], p[o + 1], 1, 0)?.relu().global_avgpool()?.dense(p[o + 2], p[o + 3])
    };
    let e = embed(h)?;
    let logits = e.dense(p[o + 4], p[o + 5])?;
    let e_dn = embed(h.mask_channels(keep)?)?;
    let logits_dn = e_dn.dense(p[o + 4], p[o + 5])?;
    Ok((logits, logits_dn, e_dn))
}

#[test]
fn bound_model_matches_explicit_forward() {
    let cfg = small_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = Model::<f64>::init(cfg.clone(), &mut rng).unwrap();
    let x = rand_tensor(&[3, 1, 8, 8], &mut rng, 0.0, 1.0);
    let tape = Tape::new();
    let b = model.bind(&tape);
    let xv = tape.constant(x);
    let o1 = b.classifier(b.embedding(b.generator(xv).unwrap()).unwrap()).unwrap();
    let (o2, _, _) = forward_with(&cfg, b.vars(), xv, &[true; 4]).unwrap();
    assert_eq!(o1.value().data(), o2.value().data());
}
