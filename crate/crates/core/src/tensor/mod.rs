//! Dense f64 tensors and a reverse-mode gradient tape.
//!
//! Values are recorded on a [`Tape`] as the forward pass runs; [`Tape::backward`]
//! then sweeps the nodes in reverse and accumulates gradients into every node
//! that depends on a parameter. Constants and detached values are leaves with
//! `requires_grad == false`, so no gradient ever reaches whatever produced them.
//!
//! Broadcasting is limited to scalar-with-tensor.

mod conv;
pub mod gradcheck;

use crate::error::{Error, Result};

pub use gradcheck::{finite_difference_check, GradCheck, GradCheckReport};

/// Shape-carrying row-major array of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// First value; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Slice `index` along the leading axis.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        let (lead, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::Invalid("select on a 0-d tensor".into()))?;
        if index >= *lead {
            return Err(Error::Invalid(format!(
                "select index {index} out of range for leading dim {lead}"
            )));
        }
        let stride: usize = rest.iter().product();
        Tensor::new(
            rest.to_vec(),
            self.data[index * stride..(index + 1) * stride].to_vec(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: f64 },
    PowScalar { a: Var, p: f64 },
    Unary { kind: Activation, a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Conv2d { input: Var, weight: Var, bias: Var, padding: usize },
    Sum { a: Var },
    Mean { a: Var },
    MaskedMeanSq { a: Var, b: Var, mask: Vec<f64>, denom: f64 },
    Bce { p: Var, target: Vec<f64> },
    Select { a: Var, index: usize },
    Stack { parts: Vec<Var> },
    Reshape { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probability clamp used inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Softplus switches to the identity above this input.
const SOFTPLUS_LINEAR_ABOVE: f64 = 20.0;

pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR_ABOVE {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, with zeros of `shape` when no path exists.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node so the tape can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Same values as `a`, cut from the graph.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.clone();
        self.constant(t)
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na = self.value(a).numel();
        let nb = self.value(b).numel();
        if sa == sb || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let shape = self.broadcast_shape(name, a, b)?;
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let n: usize = shape.iter().product();
        let at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
        let bt = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
        if kind == BinaryKind::Div {
            if let Some(index) = bv.iter().position(|&v| v == 0.0) {
                return Err(Error::DivisionByZero { index });
            }
        }
        let data: Vec<f64> = (0..n)
            .map(|i| match kind {
                BinaryKind::Add => at(i) + bt(i),
                BinaryKind::Sub => at(i) - bt(i),
                BinaryKind::Mul => at(i) * bt(i),
                BinaryKind::Div => at(i) / bt(i),
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar { a }, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(t, Op::MulScalar { a, c }, rg)
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let t = self.value(a).map(|v| v.powf(p));
        let rg = self.rg(a);
        self.push(t, Op::PowScalar { a, p }, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.pow_scalar(a, 2.0)
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        let x = self.value(a);
        let t = match kind {
            Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Softplus => x.map(softplus),
            Activation::Exp => x.map(f64::exp),
            Activation::Log => {
                if let Some(index) = x.data.iter().position(|&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::LogDomain {
                        index,
                        value: x.data[index],
                    });
                }
                x.map(f64::ln)
            }
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Unary { kind, a }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(Activation::Relu, a).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(Activation::Sigmoid, a)
            .expect("sigmoid is total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.activation(Activation::Softplus, a)
            .expect("softplus is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.activation(Activation::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Log, a)
    }

    /// Limit values to `[lo, hi]`. Gradient is 1 strictly inside, 0 on or
    /// beyond either bound.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::InvalidClamp { lo, hi });
        }
        let t = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        Ok(self.push(t, Op::Clamp { a, lo, hi }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(t, Op::Mean { a }, rg)
    }

    /// `Σ mask·(a−b)² / Σ mask`, or 0 when the mask is empty.
    pub fn masked_mean_sq(&mut self, a: Var, b: Var, mask: &[f64]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "masked_mean_sq",
                left: sa,
                right: sb,
            });
        }
        if mask.len() != self.value(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_mean_sq mask",
                left: sa,
                right: vec![mask.len()],
            });
        }
        let denom: f64 = mask.iter().sum();
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let value = if denom == 0.0 {
            0.0
        } else {
            mask.iter()
                .zip(av.iter().zip(bv))
                .filter(|(m, _)| **m != 0.0)
                .map(|(m, (x, y))| m * (x - y) * (x - y))
                .sum::<f64>()
                / denom
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedMeanSq {
                a,
                b,
                mask: mask.to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `target`,
    /// with `p` clamped to `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn bce(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let pv = &self.value(p).data;
        if pv.len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                left: self.shape(p).to_vec(),
                right: vec![target.len()],
            });
        }
        let n = pv.len() as f64;
        let value = -pv
            .iter()
            .zip(target)
            .map(|(&q, &r)| {
                let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
                r * q.ln() + (1.0 - r) * (1.0 - q).ln()
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Slice along the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a).select(index)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Select { a, index }, rg))
    }

    /// Stack equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(inner.iter().product::<usize>() * parts.len());
        for p in parts {
            if self.shape(*p) != inner.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: inner,
                    right: self.shape(*p).to_vec(),
                });
            }
            data.extend_from_slice(&self.value(*p).data);
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Stack {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Same-padded 2-D cross-correlation of `input [C_in,H,W]` with
    /// `weight [C_out,C_in,k,k]` plus `bias [C_out]`; k must be 1 or 3.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let out = conv::forward(self.value(input), self.value(weight), self.value(bias), padding)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
            rg,
        ))
    }

    /// Region codes of every relu and clamp input, used to detect when a
    /// perturbation crosses a kink.
    pub fn branch_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Unary {
                    kind: Activation::Relu,
                    a,
                } => sig.extend(self.nodes[a.0].value.data.iter().map(|&v| {
                    if v > 0.0 {
                        1
                    } else if v < 0.0 {
                        -1
                    } else {
                        0
                    }
                })),
                Op::Clamp { a, lo, hi } => {
                    sig.extend(self.nodes[a.0].value.data.iter().map(|&v| {
                        if v < lo {
                            -2
                        } else if v == lo {
                            -1
                        } else if v < hi {
                            0
                        } else if v == hi {
                            1
                        } else {
                            2
                        }
                    }))
                }
                Op::Bce { p, .. } => sig.extend(self.nodes[p.0].value.data.iter().map(|&v| {
                    if v <= BCE_EPS {
                        -1
                    } else if v >= 1.0 - BCE_EPS {
                        1
                    } else {
                        0
                    }
                })),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `loss`. A tape may be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar {
                shape: loss_value.shape.clone(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad).map(|data| Tensor {
                    shape: n.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let av = val(a);
                let bv = val(b);
                let at = |j: usize| if av.len() == 1 { av[0] } else { av[j] };
                let bt = |j: usize| if bv.len() == 1 { bv[0] } else { bv[j] };
                if self.rg(a) {
                    let local: Vec<f64> = (0..g.len())
                        .map(|j| match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[j],
                            BinaryKind::Mul => g[j] * bt(j),
                            BinaryKind::Div => g[j] / bt(j),
                        })
                        .collect();
                    accumulate_broadcast(grads, a, av.len(), &local);
                }
                if self.rg(b) {
                    let local: Vec<f64> = (0..g.len())
                        .map(|j| match kind {
                            BinaryKind::Add => g[j],
                            BinaryKind::Sub => -g[j],
                            BinaryKind::Mul => g[j] * at(j),
                            BinaryKind::Div => -g[j] * at(j) / (bt(j) * bt(j)),
                        })
                        .collect();
                    accumulate_broadcast(grads, b, bv.len(), &local);
                }
            }
            Op::AddScalar { a } => accumulate(grads, *a, g.iter().copied()),
            Op::MulScalar { a, c } => accumulate(grads, *a, g.iter().map(|v| v * c)),
            Op::PowScalar { a, p } => {
                let x = val(*a);
                accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(gv, xv)| gv * p * xv.powf(p - 1.0)),
                );
            }
            Op::Unary { kind, a } => {
                let x = val(*a);
                let y = &node.value.data;
                let it = g.iter().zip(x.iter().zip(y)).map(|(gv, (xv, yv))| {
                    gv * match kind {
                        Activation::Relu => {
                            if *xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Activation::Sigmoid => yv * (1.0 - yv),
                        Activation::Softplus => sigmoid(*xv),
                        Activation::Exp => *yv,
                        Activation::Log => 1.0 / xv,
                    }
                });
                accumulate(grads, *a, it);
            }
            Op::Clamp { a, lo, hi } => {
                let x = val(*a);
                accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, xv)| if *xv > *lo && *xv < *hi { *gv } else { 0.0 }),
                );
            }
            Op::Sum { a } => {
                let n = val(*a).len();
                accumulate(grads, *a, std::iter::repeat(g[0]).take(n));
            }
            Op::Mean { a } => {
                let n = val(*a).len();
                accumulate(grads, *a, std::iter::repeat(g[0] / n as f64).take(n));
            }
            Op::MaskedMeanSq { a, b, mask, denom } => {
                if *denom == 0.0 {
                    return;
                }
                let (a, b) = (*a, *b);
                let av = val(a);
                let bv = val(b);
                let scale = 2.0 * g[0] / denom;
                let diff: Vec<f64> = mask
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(m, (x, y))| if *m == 0.0 { 0.0 } else { scale * m * (x - y) })
                    .collect();
                if self.rg(a) {
                    accumulate(grads, a, diff.iter().copied());
                }
                if self.rg(b) {
                    accumulate(grads, b, diff.iter().map(|d| -d));
                }
            }
            Op::Bce { p, target } => {
                let pv = val(*p);
                let n = pv.len() as f64;
                accumulate(
                    grads,
                    *p,
                    pv.iter().zip(target).map(|(&q, &r)| {
                        if q <= BCE_EPS || q >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            -g[0] * (r / q - (1.0 - r) / (1.0 - q)) / n
                        }
                    }),
                );
            }
            Op::Select { a, index } => {
                if !self.rg(*a) {
                    return;
                }
                let len = val(*a).len();
                let stride = g.len();
                let buf = grads[a.0].get_or_insert_with(|| vec![0.0; len]);
                for (dst, src) in buf[index * stride..(index + 1) * stride].iter_mut().zip(g) {
                    *dst += src;
                }
            }
            Op::Stack { parts } => {
                let stride = g.len() / parts.len();
                for (k, p) in parts.iter().enumerate() {
                    if self.rg(*p) {
                        accumulate(grads, *p, g[k * stride..(k + 1) * stride].iter().copied());
                    }
                }
            }
            Op::Reshape { a } => accumulate(grads, *a, g.iter().copied()),
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let (gi, gw, gb) = conv::backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    *padding,
                    self.rg(*input),
                    self.rg(*weight),
                );
                if let Some(gi) = gi {
                    accumulate(grads, *input, gi.into_iter());
                }
                if let Some(gw) = gw {
                    accumulate(grads, *weight, gw.into_iter());
                }
                if self.rg(*bias) {
                    accumulate(grads, *bias, gb.into_iter());
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, it: impl Iterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (dst, src) in buf.iter_mut().zip(it) {
                *dst += src;
            }
        }
        slot @ None => *slot = Some(it.collect()),
    }
}

fn accumulate_broadcast(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, local: &[f64]) {
    if len == 1 && local.len() != 1 {
        let s: f64 = local.iter().sum();
        accumulate(grads, v, std::iter::once(s));
    } else {
        accumulate(grads, v, local.iter().copied());
    }
}
