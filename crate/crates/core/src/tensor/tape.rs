//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value; inputs always
//! precede the node that consumes them, so a single reverse sweep over the
//! node list visits each node once in a valid order.

use std::cell::{Ref, RefCell};
use std::ops::{Add, Mul, Neg, Sub};

use super::kernels::{self, ConvGeometry};
use super::{check_rank, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Operation recorded on the tape, with the node ids it reads from.
#[derive(Clone, Debug)]
pub enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddScalar(usize, S),
    Relu(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        geom: ConvGeometry,
    },
    GlobalAvgPool(usize),
    Dense {
        x: usize,
        weight: usize,
        bias: usize,
    },
    Softmax(usize),
    LogSoftmax(usize),
    /// Picks `x[n, cols[n]]` from a rank-2 tensor.
    SelectPerRow(usize, Vec<usize>),
    /// Gathers rows of a rank-2 tensor.
    GatherRows(usize, Vec<usize>),
    /// Sums a rank-2 tensor over its last axis.
    SumRows(usize),
    Sum(usize),
    Mean(usize),
    MaskChannels(usize, Vec<bool>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every node
    /// that requires one.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![S::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad matches shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    id: usize,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![S::zero(); nodes[id].value.len()]);
    f(slot);
}

fn backprop_node<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s)
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |ga| {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(vb) {
                    *d += s * y;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((d, &s), &x) in gb.iter_mut().zip(g).zip(va) {
                    *d += s * x;
                }
            });
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, |ga| {
            ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c)
        }),
        Op::AddScalar(a, _) => accumulate(nodes, grads, *a, |ga| add_into(ga, g)),
        Op::Relu(a) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, |ga| {
                for ((d, &s), &xv) in ga.iter_mut().zip(g).zip(x) {
                    if xv > S::zero() {
                        *d += s;
                    }
                }
            });
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let (gx, gk, gb) = kernels::conv2d_backward(val(*input), val(*kernel), geom, g);
            accumulate(nodes, grads, *input, |d| add_into(d, &gx));
            accumulate(nodes, grads, *kernel, |d| add_into(d, &gk));
            accumulate(nodes, grads, *bias, |d| add_into(d, &gb));
        }
        Op::GlobalAvgPool(a) => {
            let s = val(*a).shape();
            let plane = s[2] * s[3];
            let inv = S::one() / S::of_usize(plane);
            accumulate(nodes, grads, *a, |ga| {
                for (chunk, &gv) in ga.chunks_exact_mut(plane).zip(g) {
                    chunk.iter_mut().for_each(|d| *d += gv * inv);
                }
            });
        }
        Op::Dense { x, weight, bias } => {
            let (xv, wv) = (val(*x), val(*weight));
            let (d, k) = (xv.shape()[1], wv.shape()[0]);
            accumulate(nodes, grads, *x, |gx| {
                for (grow, gorow) in gx.chunks_exact_mut(d).zip(g.chunks_exact(k)) {
                    for (wrow, &go) in wv.data().chunks_exact(d).zip(gorow) {
                        grow.iter_mut().zip(wrow).for_each(|(t, &w)| *t += go * w);
                    }
                }
            });
            accumulate(nodes, grads, *weight, |gw| {
                for (xrow, gorow) in xv.data().chunks_exact(d).zip(g.chunks_exact(k)) {
                    for (wgrow, &go) in gw.chunks_exact_mut(d).zip(gorow) {
                        wgrow.iter_mut().zip(xrow).for_each(|(t, &x)| *t += go * x);
                    }
                }
            });
            accumulate(nodes, grads, *bias, |gb| {
                for gorow in g.chunks_exact(k) {
                    add_into(gb, gorow);
                }
            });
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let k = y.shape()[1];
            accumulate(nodes, grads, *a, |ga| {
                for ((drow, yrow), grow) in ga
                    .chunks_exact_mut(k)
                    .zip(y.data().chunks_exact(k))
                    .zip(g.chunks_exact(k))
                {
                    let dot: S = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d += yv * (gv - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let y = &node.value;
            let k = y.shape()[1];
            accumulate(nodes, grads, *a, |ga| {
                for ((drow, yrow), grow) in ga
                    .chunks_exact_mut(k)
                    .zip(y.data().chunks_exact(k))
                    .zip(g.chunks_exact(k))
                {
                    let total: S = grow.iter().copied().sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d += gv - yv.exp() * total;
                    }
                }
            });
        }
        Op::SelectPerRow(a, cols) => {
            let k = val(*a).shape()[1];
            accumulate(nodes, grads, *a, |ga| {
                for (n, (&c, &gv)) in cols.iter().zip(g).enumerate() {
                    ga[n * k + c] += gv;
                }
            });
        }
        Op::GatherRows(a, rows) => {
            let d = val(*a).shape()[1];
            accumulate(nodes, grads, *a, |ga| {
                for (&r, grow) in rows.iter().zip(g.chunks_exact(d)) {
                    add_into(&mut ga[r * d..(r + 1) * d], grow);
                }
            });
        }
        Op::SumRows(a) => {
            let d = val(*a).shape()[1];
            accumulate(nodes, grads, *a, |ga| {
                for (chunk, &gv) in ga.chunks_exact_mut(d).zip(g) {
                    chunk.iter_mut().for_each(|t| *t += gv);
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |ga| {
            ga.iter_mut().for_each(|t| *t += g[0])
        }),
        Op::Mean(a) => {
            let inv = S::one() / S::of_usize(val(*a).len());
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().for_each(|t| *t += g[0] * inv)
            });
        }
        Op::MaskChannels(a, keep) => {
            let s = val(*a).shape();
            let plane = s[2] * s[3];
            let c = s[1];
            accumulate(nodes, grads, *a, |ga| {
                for (idx, (chunk, gchunk)) in ga
                    .chunks_exact_mut(plane)
                    .zip(g.chunks_exact(plane))
                    .enumerate()
                {
                    if keep[idx % c] {
                        add_into(chunk, gchunk);
                    }
                }
            });
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Gradients produced by one backward sweep, indexed by tape node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, S>) -> Tensor<S> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<S>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(&[self.id])
    }

    fn unary(self, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t, S>, op_name: &'static str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var<'t, S>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(shape_err(
                    op_name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn try_add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn try_sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn try_mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: S) -> Var<'t, S> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: S) -> Var<'t, S> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id, c))
    }

    pub fn relu(self) -> Var<'t, S> {
        let v = kernels::relu(&self.value());
        self.unary(v, Op::Relu(self.id))
    }

    pub fn conv2d(self, kernel: Var<'t, S>, bias: Var<'t, S>, stride: usize, pad: usize) -> Result<Var<'t, S>> {
        let (value, geom) = {
            let (x, k, b) = (self.value(), kernel.value(), bias.value());
            let geom = ConvGeometry::infer(x.shape(), k.shape(), b.shape(), stride, pad)?;
            (kernels::conv2d(&x, &k, &b, stride, pad)?, geom)
        };
        let rg = self.tape.needs(&[self.id, kernel.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.id,
                geom,
            },
            rg,
        ))
    }

    pub fn global_avgpool(self) -> Result<Var<'t, S>> {
        let v = kernels::global_avgpool(&self.value())?;
        Ok(self.unary(v, Op::GlobalAvgPool(self.id)))
    }

    pub fn dense(self, weight: Var<'t, S>, bias: Var<'t, S>) -> Result<Var<'t, S>> {
        let value = kernels::dense(&self.value(), &weight.value(), &bias.value())?;
        let rg = self.tape.needs(&[self.id, weight.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::Dense {
                x: self.id,
                weight: weight.id,
                bias: bias.id,
            },
            rg,
        ))
    }

    pub fn softmax(self) -> Result<Var<'t, S>> {
        let v = kernels::softmax(&self.value())?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    pub fn log_softmax(self) -> Result<Var<'t, S>> {
        let v = kernels::log_softmax(&self.value())?;
        Ok(self.unary(v, Op::LogSoftmax(self.id)))
    }

    pub fn select_per_row(self, cols: &[usize]) -> Result<Var<'t, S>> {
        let v = {
            let x = self.value();
            check_rank("select_per_row", &x, 2)?;
            let (n, k) = (x.shape()[0], x.shape()[1]);
            if cols.len() != n || cols.iter().any(|&c| c >= k) {
                return Err(shape_err(
                    "select_per_row",
                    format!("{} column indices for shape {:?}", cols.len(), x.shape()),
                ));
            }
            let data = cols.iter().enumerate().map(|(i, &c)| x.data()[i * k + c]).collect();
            Tensor::new(vec![n], data)?
        };
        Ok(self.unary(v, Op::SelectPerRow(self.id, cols.to_vec())))
    }

    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t, S>> {
        let v = {
            let x = self.value();
            check_rank("gather_rows", &x, 2)?;
            let (n, d) = (x.shape()[0], x.shape()[1]);
            if rows.is_empty() || rows.iter().any(|&r| r >= n) {
                return Err(shape_err(
                    "gather_rows",
                    format!("row indices {rows:?} for shape {:?}", x.shape()),
                ));
            }
            let mut data = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                data.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
            }
            Tensor::new(vec![rows.len(), d], data)?
        };
        Ok(self.unary(v, Op::GatherRows(self.id, rows.to_vec())))
    }

    pub fn sum_rows(self) -> Result<Var<'t, S>> {
        let v = {
            let x = self.value();
            check_rank("sum_rows", &x, 2)?;
            let d = x.shape()[1];
            let data = x.data().chunks_exact(d).map(|r| r.iter().copied().sum()).collect();
            Tensor::new(vec![x.shape()[0]], data)?
        };
        Ok(self.unary(v, Op::SumRows(self.id)))
    }

    pub fn sum(self) -> Var<'t, S> {
        let v = Tensor::scalar(self.value().data().iter().copied().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, S> {
        let v = {
            let x = self.value();
            Tensor::scalar(x.data().iter().copied().sum::<S>() / S::of_usize(x.len()))
        };
        self.unary(v, Op::Mean(self.id))
    }

    /// Zeroes channels of an `[N, C, H, W]` tensor where `keep` is false; no
    /// gradient flows back through the zeroed channels.
    pub fn mask_channels(self, keep: &[bool]) -> Result<Var<'t, S>> {
        let v = kernels::mask_channels(&self.value(), keep)?;
        Ok(self.unary(v, Op::MaskChannels(self.id, keep.to_vec())))
    }
}

impl<'t, S: Scalar> Add for Var<'t, S> {
    type Output = Var<'t, S>;
    fn add(self, rhs: Self) -> Self::Output {
        self.try_add(rhs).expect("add: shape mismatch")
    }
}

impl<'t, S: Scalar> Sub for Var<'t, S> {
    type Output = Var<'t, S>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.try_sub(rhs).expect("sub: shape mismatch")
    }
}

impl<'t, S: Scalar> Mul for Var<'t, S> {
    type Output = Var<'t, S>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.try_mul(rhs).expect("mul: shape mismatch")
    }
}

impl<'t, S: Scalar> Neg for Var<'t, S> {
    type Output = Var<'t, S>;
    fn neg(self) -> Self::Output {
        self.scale(-S::one())
    }
}
