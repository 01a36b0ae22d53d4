//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! are methods on the tape that take and return [`Var`] handles; each call
//! appends a node whose inputs are already on the tape, so the node list is
//! topologically ordered by construction. [`Tape::backward`] walks it in
//! reverse and accumulates gradients into the leaves that require them.
//!
//! Every forward op rejects non-finite output with [`Error::NonFinite`].

mod conv;
mod spatial;

pub(crate) use spatial::hflip_data;

use std::borrow::Cow;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::geometry::Pinhole;
use crate::tensor::{Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

/// Gradient rule for [`Tape::custom`]: receives the input values, the output
/// value and the upstream gradient; returns one gradient buffer per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f32]) -> Vec<Vec<f32>>>;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f32),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    ClampMin(Var, f32),
    SumTo(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    PixelShuffle(Var, usize),
    UpsampleNearest(Var, usize),
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    ReflectPad(Var, usize),
    Narrow {
        x: Var,
        dim: usize,
        start: usize,
    },
    Concat(Vec<Var>),
    HFlip(Var),
    GridSample {
        src: Var,
        grid: Var,
    },
    Reproject {
        depth: Var,
        pose: Var,
        cam: Pinhole,
    },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Affine(x, _) | Abs(x) | Exp(x) | Log(x) | Relu(x) | Sigmoid(x) | ClampMin(x, _) => {
                vec![*x]
            }
            SumTo(x) | PixelShuffle(x, _) | UpsampleNearest(x, _) | ReflectPad(x, _) | HFlip(x) => {
                vec![*x]
            }
            AvgPool { x, .. } | Narrow { x, .. } => vec![*x],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Concat(xs) => xs.clone(),
            GridSample { src, grid } => vec![*src, *grid],
            Reproject { depth, pose, .. } => vec![*depth, *pose],
            Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Affine(..) => "affine",
            Abs(_) => "abs",
            Exp(_) => "exp",
            Log(_) => "log",
            Relu(_) => "relu",
            Sigmoid(_) => "sigmoid",
            ClampMin(..) => "clamp_min",
            SumTo(_) => "sum_to",
            Conv2d { .. } => "conv2d",
            PixelShuffle(..) => "pixel_shuffle",
            UpsampleNearest(..) => "upsample_nearest",
            AvgPool { .. } => "avg_pool2d",
            ReflectPad(..) => "reflect_pad",
            Narrow { .. } => "narrow",
            Concat(_) => "concat",
            HFlip(_) => "hflip",
            GridSample { .. } => "grid_sample_bilinear",
            Reproject { .. } => "reproject",
            Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation tape. Build one per forward/backward iteration.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.id]
    }

    /// Value of a recorded variable. Panics on a handle from another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.value(v).grad_tensor()
    }

    /// Remove and return the gradient buffer of a leaf.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        self.nodes[v.id].value.grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => op.inputs().iter().any(|i| self.nodes[i.id].requires_grad),
        };
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { id, tape: self.id })
    }

    /// Record an input. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    /// Record an input that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Result<Var> {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(f);
        self.push(out, op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let Some(out_shape) = Shape::broadcast(ta.shape(), tb.shape()) else {
            return shape_err(
                op.name(),
                format!("{:?} vs {:?} not broadcastable", ta.shape(), tb.shape()),
            );
        };
        let ea = expand(ta, out_shape);
        let eb = expand(tb, out_shape);
        let data = ea.iter().zip(eb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(out_shape, data)?;
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise quotient. A zero denominator yields `NonFinite`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Result<Var> {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        self.affine(x, 1.0, c)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f32::abs)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f32::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), f32::ln)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn clamp_min(&mut self, x: Var, min: f32) -> Result<Var> {
        self.unary(x, Op::ClampMin(x, min), |v| v.max(min))
    }

    /// Sum over every dimension where `shape` has extent 1 (the reverse of
    /// broadcasting). Accumulates in f64.
    pub fn sum_to(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        self.check(x)?;
        let shape = shape.into();
        let tx = self.value(x);
        if Shape::broadcast(shape, tx.shape()) != Some(tx.shape()) {
            return shape_err("sum_to", format!("{:?} -> {shape:?}", tx.shape()));
        }
        let out = Tensor::from_vec(shape, reduce_to(tx.data(), tx.shape(), shape))?;
        self.push(out, Op::SumTo(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.sum_to(x, Shape::SCALAR)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f32;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Record an op with a caller-supplied gradient rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        output: Tensor,
        backward: BackwardFn,
    ) -> Result<Var> {
        for &i in inputs {
            self.check(i)?;
        }
        self.push(
            output,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into leaf
    /// buffers across calls; call [`Tape::zero_grads`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::NotScalar(shape.0));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            let contributions = self.node_backward(id, &g);
            for (v, gi) in contributions {
                if !self.nodes[v.id].requires_grad {
                    continue;
                }
                match &mut grads[v.id] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn node_backward(&self, id: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let out_shape = out.shape();
        let val = |v: Var| &self.nodes[v.id].value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        res.push((v, reduce_to(g, out_shape, val(v).shape())));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    res.push((*a, reduce_to(g, out_shape, val(*a).shape())));
                }
                if self.needs(*b) {
                    let neg: Vec<f32> = g.iter().map(|x| -x).collect();
                    res.push((*b, reduce_to(&neg, out_shape, val(*b).shape())));
                }
            }
            Op::Mul(a, b) => {
                let ea = expand(val(*a), out_shape);
                let eb = expand(val(*b), out_shape);
                if self.needs(*a) {
                    let ga: Vec<f32> = g.iter().zip(eb.iter()).map(|(g, y)| g * y).collect();
                    res.push((*a, reduce_to(&ga, out_shape, val(*a).shape())));
                }
                if self.needs(*b) {
                    let gb: Vec<f32> = g.iter().zip(ea.iter()).map(|(g, x)| g * x).collect();
                    res.push((*b, reduce_to(&gb, out_shape, val(*b).shape())));
                }
            }
            Op::Div(a, b) => {
                let eb = expand(val(*b), out_shape);
                if self.needs(*a) {
                    let ga: Vec<f32> = g.iter().zip(eb.iter()).map(|(g, y)| g / y).collect();
                    res.push((*a, reduce_to(&ga, out_shape, val(*a).shape())));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let gb: Vec<f32> = g
                        .iter()
                        .zip(out.data())
                        .zip(eb.iter())
                        .map(|((g, q), y)| -g * q / y)
                        .collect();
                    res.push((*b, reduce_to(&gb, out_shape, val(*b).shape())));
                }
            }
            Op::Affine(x, s) => res.push((*x, g.iter().map(|v| v * s).collect())),
            Op::Abs(x) => res.push((
                *x,
                zip_map(g, val(*x).data(), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
            )),
            Op::Exp(x) => res.push((*x, zip_map(g, out.data(), |g, y| g * y))),
            Op::Log(x) => res.push((*x, zip_map(g, val(*x).data(), |g, x| g / x))),
            Op::Relu(x) => res.push((
                *x,
                zip_map(g, val(*x).data(), |g, x| if x > 0.0 { g } else { 0.0 }),
            )),
            Op::Sigmoid(x) => res.push((*x, zip_map(g, out.data(), |g, y| g * y * (1.0 - y)))),
            Op::ClampMin(x, m) => res.push((
                *x,
                zip_map(g, val(*x).data(), |g, x| if x > *m { g } else { 0.0 }),
            )),
            Op::SumTo(x) => res.push((*x, expand_data(g, out_shape, val(*x).shape()))),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let grads = conv::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    *stride,
                    *pad,
                    [
                        self.needs(*x),
                        self.needs(*w),
                        b.is_some_and(|b| self.needs(b)),
                    ],
                );
                if let Some(gx) = grads.0 {
                    res.push((*x, gx));
                }
                if let Some(gw) = grads.1 {
                    res.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, grads.2) {
                    res.push((*b, gb));
                }
            }
            Op::PixelShuffle(x, r) => {
                res.push((*x, spatial::pixel_unshuffle(g, val(*x).shape(), *r)))
            }
            Op::UpsampleNearest(x, f) => res.push((
                *x,
                spatial::upsample_nearest_backward(g, val(*x).shape(), *f),
            )),
            Op::AvgPool { x, k, stride } => res.push((
                *x,
                spatial::avg_pool_backward(g, val(*x).shape(), out_shape, *k, *stride),
            )),
            Op::ReflectPad(x, p) => {
                res.push((*x, spatial::reflect_pad_backward(g, val(*x).shape(), *p)))
            }
            Op::Narrow { x, dim, start } => res.push((
                *x,
                spatial::narrow_backward(g, val(*x).shape(), out_shape, *dim, *start),
            )),
            Op::Concat(xs) => {
                let shapes: Vec<Shape> = xs.iter().map(|v| val(*v).shape()).collect();
                for (v, gi) in xs
                    .iter()
                    .zip(spatial::concat_backward(g, out_shape, &shapes))
                {
                    if self.needs(*v) {
                        res.push((*v, gi));
                    }
                }
            }
            Op::HFlip(x) => res.push((*x, spatial::hflip_data(g, out_shape))),
            Op::GridSample { src, grid } => {
                let (gs, gg) = spatial::grid_sample_backward(
                    val(*src),
                    val(*grid),
                    g,
                    self.needs(*src),
                    self.needs(*grid),
                );
                if let Some(gs) = gs {
                    res.push((*src, gs));
                }
                if let Some(gg) = gg {
                    res.push((*grid, gg));
                }
            }
            Op::Reproject { depth, pose, cam } => {
                let (gd, gp) = crate::geometry::reproject_backward(val(*depth), val(*pose), cam, g);
                if self.needs(*depth) {
                    res.push((*depth, gd));
                }
                if self.needs(*pose) {
                    res.push((*pose, gp));
                }
            }
            Op::Custom {
                inputs, backward, ..
            } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                for (v, gi) in inputs.iter().zip(backward(&ins, out, g)) {
                    if self.needs(*v) {
                        res.push((*v, gi));
                    }
                }
            }
        }
        res
    }

    pub(crate) fn push_op(&mut self, value: Tensor, op: Op) -> Result<Var> {
        for i in op.inputs() {
            self.check(i)?;
        }
        self.push(value, op)
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(g: &[f32], x: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

/// Materialize `t` broadcast to `shape` (borrowing when already that shape).
fn expand(t: &Tensor, shape: Shape) -> Cow<'_, [f32]> {
    if t.shape() == shape {
        Cow::Borrowed(t.data())
    } else {
        Cow::Owned(expand_data(t.data(), t.shape(), shape))
    }
}

fn expand_data(data: &[f32], from: Shape, to: Shape) -> Vec<f32> {
    if from == to {
        return data.to_vec();
    }
    let bs = from.broadcast_strides();
    let [n, c, h, w] = to.0;
    let mut out = Vec::with_capacity(to.numel());
    for i in 0..n {
        for j in 0..c {
            for k in 0..h {
                let base = i * bs[0] + j * bs[1] + k * bs[2];
                if bs[3] == 0 {
                    out.extend(std::iter::repeat_n(data[base], w));
                } else {
                    out.extend_from_slice(&data[base..base + w]);
                }
            }
        }
    }
    out
}

/// Sum `data` (of shape `from`) down to the broadcast-compatible `to`.
fn reduce_to(data: &[f32], from: Shape, to: Shape) -> Vec<f32> {
    if from == to {
        return data.to_vec();
    }
    let bs = to.broadcast_strides();
    let [n, c, h, w] = from.0;
    let mut acc = vec![0f64; to.numel()];
    let mut idx = 0;
    for i in 0..n {
        for j in 0..c {
            for k in 0..h {
                let base = i * bs[0] + j * bs[1] + k * bs[2];
                for l in 0..w {
                    acc[base + l * bs[3]] += data[idx] as f64;
                    idx += 1;
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}
