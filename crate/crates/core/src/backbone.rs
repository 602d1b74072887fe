//! Toy convolutional backbone split into generator, embedding and classifier.
//!
//! * generator: a stack of 3x3 conv + ReLU stages producing the feature map `f`
//!   with `feature_channels` channels;
//! * embedding: 1x1 conv + ReLU, global average pool, dense to `embed_dim`;
//! * classifier: dense to two logits (index 0 = live, 1 = spoof).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Gradients, Tape, Tensor, Var};

pub const N_CLASSES: usize = 2;
pub const LIVE: usize = 0;
pub const SPOOF: usize = 1;

const KERNEL: usize = 3;
const PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_ch: usize,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub generator_stages: Vec<Stage>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_h: 32,
            input_w: 32,
            input_ch: 1,
            embed_hidden: 32,
            embed_dim: 32,
            generator_stages: vec![
                Stage { out_channels: 8, stride: 2 },
                Stage { out_channels: 16, stride: 2 },
                Stage { out_channels: 16, stride: 1 },
            ],
        }
    }
}

impl ModelConfig {
    /// Channel count `c` of the generator output.
    pub fn feature_channels(&self) -> usize {
        self.generator_stages.last().map_or(0, |s| s.out_channels)
    }

    /// Replaces the channel count of the last generator stage.
    pub fn with_feature_channels(mut self, c: usize) -> Self {
        if let Some(last) = self.generator_stages.last_mut() {
            last.out_channels = c;
        }
        self
    }

    /// Spatial size `(h, w)` of the generator output.
    pub fn feature_hw(&self) -> (usize, usize) {
        let step = |d: usize, s: usize| (d + 2 * PAD - KERNEL) / s + 1;
        self.generator_stages
            .iter()
            .fold((self.input_h, self.input_w), |(h, w), st| {
                (step(h, st.stride), step(w, st.stride))
            })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_h == 0 || self.input_w == 0 || self.input_ch == 0 {
            return bad("input dimensions must be positive");
        }
        if self.embed_dim == 0 || self.embed_hidden == 0 {
            return bad("embedding sizes must be positive");
        }
        if self.generator_stages.is_empty() {
            return bad("at least one generator stage is required");
        }
        if self
            .generator_stages
            .iter()
            .any(|s| s.out_channels == 0 || s.stride == 0)
        {
            return bad("generator stages need positive channels and strides");
        }
        let (mut h, mut w) = (self.input_h, self.input_w);
        for s in &self.generator_stages {
            if h + 2 * PAD < KERNEL || w + 2 * PAD < KERNEL {
                return bad("input too small for the generator stages");
            }
            h = (h + 2 * PAD - KERNEL) / s.stride + 1;
            w = (w + 2 * PAD - KERNEL) / s.stride + 1;
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order: generator, embedding, classifier.
    pub fn parameter_layout(&self) -> Vec<(Group, String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.input_ch;
        for (i, s) in self.generator_stages.iter().enumerate() {
            out.push((Group::Generator, format!("g.conv{i}.weight"), vec![s.out_channels, cin, KERNEL, KERNEL]));
            out.push((Group::Generator, format!("g.conv{i}.bias"), vec![s.out_channels]));
            cin = s.out_channels;
        }
        let c = self.feature_channels();
        out.push((Group::Embedding, "e.conv.weight".into(), vec![self.embed_hidden, c, 1, 1]));
        out.push((Group::Embedding, "e.conv.bias".into(), vec![self.embed_hidden]));
        out.push((Group::Embedding, "e.fc.weight".into(), vec![self.embed_dim, self.embed_hidden]));
        out.push((Group::Embedding, "e.fc.bias".into(), vec![self.embed_dim]));
        out.push((Group::Classifier, "c.fc.weight".into(), vec![N_CLASSES, self.embed_dim]));
        out.push((Group::Classifier, "c.fc.bias".into(), vec![N_CLASSES]));
        out
    }
}

/// Parameter group: generator, embedding or classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Generator,
    Embedding,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub group: Group,
    pub name: String,
    pub value: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    params: Vec<Param<S>>,
}

impl<S: Scalar> Model<S> {
    /// Fan-in scaled Gaussian weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(group, name, shape)| {
                let n: usize = shape.iter().product();
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let data = (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            S::of(z * std)
                        })
                        .collect();
                    Tensor::new(shape, data).expect("layout shape")
                };
                Param { group, name, value }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Builds a model from explicit parameter values in canonical order.
    pub fn from_params(config: ModelConfig, values: Vec<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != values.len() {
            return Err(shape_err(
                "model",
                format!("expected {} parameters, got {}", layout.len(), values.len()),
            ));
        }
        let params = layout
            .into_iter()
            .zip(values)
            .map(|((group, name, shape), value)| {
                if value.shape() != shape.as_slice() {
                    return Err(shape_err(
                        "model",
                        format!("{name}: expected {shape:?}, got {:?}", value.shape()),
                    ));
                }
                Ok(Param { group, name, value })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn values_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.params.iter_mut().map(|p| &mut p.value).collect()
    }

    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Order-sensitive hash over every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |h, p| h.rotate_left(7) ^ p.value.fingerprint())
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, '_, S> {
        let vars = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        Bound { model: self, vars }
    }

    /// Same as [`Model::bind`] but as constants: no gradients are tracked.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, '_, S> {
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        Bound { model: self, vars }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1..] != [c.input_ch, c.input_h, c.input_w] {
            return Err(shape_err(
                "generator",
                format!(
                    "expected [N, {}, {}, {}], got {shape:?}",
                    c.input_ch, c.input_h, c.input_w
                ),
            ));
        }
        Ok(())
    }

    fn check_features(&self, shape: &[usize]) -> Result<()> {
        let c = self.feature_channels();
        if shape.len() != 4 || shape[1] != c {
            return Err(shape_err(
                "embedding",
                format!("expected [N, {c}, h, w], got {shape:?}"),
            ));
        }
        Ok(())
    }

    fn check_embedding(&self, shape: &[usize]) -> Result<()> {
        let d = self.config.embed_dim;
        if shape.len() != 2 || shape[1] != d {
            return Err(shape_err(
                "classifier",
                format!("expected [N, {d}], got {shape:?}"),
            ));
        }
        Ok(())
    }

    fn p(&self, i: usize) -> &Tensor<S> {
        &self.params[i].value
    }

    fn embedding_offset(&self) -> usize {
        2 * self.config.generator_stages.len()
    }

    /// Gradient-free generator pass.
    pub fn generator_values(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        for (i, st) in self.config.generator_stages.iter().enumerate() {
            h = kernels::relu(&kernels::conv2d(&h, self.p(2 * i), self.p(2 * i + 1), st.stride, PAD)?);
        }
        Ok(h)
    }

    /// Gradient-free embedding pass.
    pub fn embedding_values(&self, f: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_features(f.shape())?;
        let o = self.embedding_offset();
        let h = kernels::relu(&kernels::conv2d(f, self.p(o), self.p(o + 1), 1, 0)?);
        kernels::dense(&kernels::global_avgpool(&h)?, self.p(o + 2), self.p(o + 3))
    }

    /// Gradient-free classifier pass.
    pub fn classifier_values(&self, e: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_embedding(e.shape())?;
        let o = self.embedding_offset() + 4;
        kernels::dense(e, self.p(o), self.p(o + 1))
    }

    /// Softmax probabilities `[live, spoof]` per sample, starting from a feature map.
    pub fn head_probs(&self, f: &Tensor<S>) -> Result<Tensor<S>> {
        kernels::softmax(&self.classifier_values(&self.embedding_values(f)?)?)
    }

    /// Spoof probability `r[1]` for each image in the batch. With `keep`, the
    /// channels of `f` marked false are zeroed before the head.
    pub fn spoof_scores(&self, x: &Tensor<S>, keep: Option<&[bool]>) -> Result<Vec<S>> {
        let mut f = self.generator_values(x)?;
        if let Some(keep) = keep {
            f = kernels::mask_channels(&f, keep)?;
        }
        let r = self.head_probs(&f)?;
        Ok(r.data().chunks_exact(N_CLASSES).map(|row| row[SPOOF]).collect())
    }
}

/// Parameters of a [`Model`] registered on a tape.
pub struct Bound<'t, 'm, S> {
    model: &'m Model<S>,
    vars: Vec<Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, '_, S> {
    pub fn vars(&self) -> &[Var<'t, S>] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<Var<'t, S>> {
        self.model
            .params
            .iter()
            .position(|p| p.name == name)
            .map(|i| self.vars[i])
    }

    /// Replaces parameter `i` with another variable of the same shape, e.g. to
    /// differentiate with respect to one parameter of an otherwise frozen model.
    pub fn with_param(mut self, i: usize, v: Var<'t, S>) -> Result<Self> {
        let want = self.model.params.get(i).map(|p| p.value.shape().to_vec());
        match want {
            Some(shape) if shape == v.shape() => {
                self.vars[i] = v;
                Ok(self)
            }
            Some(shape) => Err(shape_err("bind", format!("parameter {i} has shape {shape:?}, got {:?}", v.shape()))),
            None => Err(Error::Invalid(format!("parameter index {i} out of range"))),
        }
    }

    /// Gradients for every parameter in canonical order; zeros where nothing flowed.
    pub fn grads(&self, g: &Gradients<S>) -> Vec<Tensor<S>> {
        self.vars.iter().map(|&v| g.get_or_zeros(v)).collect()
    }

    pub fn generator(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        self.model.check_input(&x.shape())?;
        let mut h = x;
        for (i, st) in self.model.config.generator_stages.iter().enumerate() {
            h = h.conv2d(self.vars[2 * i], self.vars[2 * i + 1], st.stride, PAD)?.relu();
        }
        let c = self.model.feature_channels();
        if h.shape()[1] != c {
            return Err(shape_err("generator", format!("produced {} channels, config says {c}", h.shape()[1])));
        }
        Ok(h)
    }

    pub fn embedding(&self, f: Var<'t, S>) -> Result<Var<'t, S>> {
        self.model.check_features(&f.shape())?;
        let o = self.model.embedding_offset();
        f.conv2d(self.vars[o], self.vars[o + 1], 1, 0)?
            .relu()
            .global_avgpool()?
            .dense(self.vars[o + 2], self.vars[o + 3])
    }

    pub fn classifier(&self, e: Var<'t, S>) -> Result<Var<'t, S>> {
        self.model.check_embedding(&e.shape())?;
        let o = self.model.embedding_offset() + 4;
        e.dense(self.vars[o], self.vars[o + 1])
    }
}
