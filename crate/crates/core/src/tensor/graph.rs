//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in forward order; `backward` walks them in exact
//! reverse. Leaf gradients persist across `backward` calls and accumulate
//! until `zero_grad`.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::{Real, Shape, Tensor};
use crate::entropy::gaussian;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geo: ConvGeometry,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a + b` where `b` is `1×C×1×1`.
    AddChannel(usize, usize),
    /// `a ⊙ b` where `b` is `1×C×1×1`.
    MulChannel(usize, usize),
    /// Expand `1×C×1×1` to the stored shape.
    Broadcast(usize),
    Scale(usize, S),
    AddScalar(usize),
    Relu6(usize),
    Gelu(usize),
    Exp(usize),
    Clamp(usize, S, S),
    Upsample2(usize),
    Crop(usize),
    SliceChannels(usize, usize),
    Concat(Vec<usize>),
    SteRound(usize),
    GaussianBits(usize, usize),
    Sum(usize),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddChannel(..) => "add_channel",
            Op::MulChannel(..) => "mul_channel",
            Op::Broadcast(..) => "broadcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu6(..) => "relu6",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Clamp(..) => "clamp",
            Op::Upsample2(..) => "upsample2",
            Op::Crop(..) => "crop",
            Op::SliceChannels(..) => "slice_channels",
            Op::Concat(..) => "concat",
            Op::SteRound(..) => "ste_round",
            Op::GaussianBits(..) => "gaussian_bits",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    /// Persistent gradient; only kept for leaves.
    grad: Option<Tensor<S>>,
}

/// Elementwise activations and unary maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu6,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(GELU_K);
    let half = S::from_f64(0.5);
    half * x * (S::ONE + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(GELU_K);
    let half = S::from_f64(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * c * (S::ONE + S::from_f64(3.0) * k * x * x)
}

/// Shapes seen by one conv evaluation; used for independent MAC recounts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvRecord {
    pub input: Shape,
    pub weight: Shape,
    pub output: Shape,
}

impl ConvRecord {
    pub fn macs(&self) -> u64 {
        let w = self.weight;
        (self.output.numel() * w.c() * w.h() * w.w()) as u64
    }
}

/// Computation tape. One graph is built per forward pass.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    ste_identity: bool,
    grad_enabled: bool,
    conv_log: Vec<ConvRecord>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            ste_identity: false,
            grad_enabled: true,
            conv_log: Vec::new(),
        }
    }

    /// A graph that never tracks gradients (inference).
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            ste_identity: false,
            grad_enabled: false,
            conv_log: Vec::new(),
        }
    }

    /// Replace straight-through rounding with the identity in the forward
    /// pass as well. Finite-difference checks use this: rounding has no
    /// derivative to compare against, so STE nodes are skipped.
    /// Every conv evaluated so far, in order.
    pub fn conv_log(&self) -> &[ConvRecord] {
        &self.conv_log
    }

    pub fn set_ste_identity(&mut self, on: bool) {
        self.ste_identity = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        // Inputs are not needed once gradients are off; keep the tape but drop
        // the op so backward cannot run.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn channel_operand(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb != Shape::new(1, sa.c(), 1, 1) {
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let geo = ConvGeometry::new(stride, padding, groups);
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geo)?;
        self.conv_log.push(ConvRecord {
            input: self.shape(x),
            weight: self.shape(w),
            output: out.shape(),
        });
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = b {
            inputs.push(b.0);
        }
        self.push(
            out,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geo,
            },
            &inputs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) && self.shape(b) == Shape::new(1, self.shape(a).c(), 1, 1) {
            return self.add_channel(a, b);
        }
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) && self.shape(b) == Shape::new(1, self.shape(a).c(), 1, 1) {
            return self.mul_channel(a, b);
        }
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn add_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        self.channel_operand("add_channel", a, b)?;
        let s = self.shape(a);
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, chunk) in v.data_mut().chunks_mut(s.plane()).enumerate() {
            let bv = bias[i % s.c()];
            chunk.iter_mut().for_each(|x| *x += bv);
        }
        self.push(v, Op::AddChannel(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        self.channel_operand("mul_channel", a, b)?;
        let s = self.shape(a);
        let scale = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, chunk) in v.data_mut().chunks_mut(s.plane()).enumerate() {
            let sv = scale[i % s.c()];
            chunk.iter_mut().for_each(|x| *x *= sv);
        }
        self.push(v, Op::MulChannel(a.0, b.0), &[a.0, b.0])
    }

    /// Expand a `1×C×1×1` tensor to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let sa = self.shape(a);
        if sa != Shape::new(1, shape.c(), 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: sa,
                rhs: shape,
            });
        }
        let src = self.value(a).data().to_vec();
        let v = Tensor::from_fn(shape, |[_, c, _, _]| src[c]);
        self.push(v, Op::Broadcast(a.0), &[a.0])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let k = S::from_f64(k);
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a.0, k), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::from_f64(c);
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a.0), &[a.0])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::Relu6 => self.relu6(a),
            Activation::Gelu => self.gelu(a),
        }
    }

    pub fn relu6(&mut self, a: Var) -> Result<Var> {
        let six = S::from_f64(6.0);
        let v = self.value(a).map(|x| x.max(S::ZERO).min(six));
        self.push(v, Op::Relu6(a.0), &[a.0])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a.0), &[a.0])
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (S::from_f64(lo), S::from_f64(hi));
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a.0, lo, hi), &[a.0])
    }

    /// Nearest-neighbour ×2 spatial upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let s = src.shape();
        let out = s.with_hw(s.h() * 2, s.w() * 2);
        let v = Tensor::from_fn(out, |[n, c, y, x]| src.at(n, c, y / 2, x / 2));
        self.push(v, Op::Upsample2(a.0), &[a.0])
    }

    /// Keep the top-left `h×w` window.
    pub fn crop(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(a);
        if h > s.h() || w > s.w() {
            return Err(Error::ShapeMismatch {
                op: "crop",
                lhs: s,
                rhs: s.with_hw(h, w),
            });
        }
        if h == s.h() && w == s.w() {
            return Ok(a);
        }
        let v = self.value(a).crop(h, w);
        self.push(v, Op::Crop(a.0), &[a.0])
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let s = src.shape();
        if start + len > s.c() || len == 0 {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {s}",
                start + len
            )));
        }
        let v = Tensor::from_fn(s.with_c(len), |[n, c, y, x]| src.at(n, start + c, y, x));
        self.push(v, Op::SliceChannels(a.0, start), &[a.0])
    }

    /// Concatenate along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            channels += s.c();
        }
        let out = first.with_c(channels);
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..first.n() {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape().c() * t.shape().plane();
                data.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        let v = Tensor::from_vec(out, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(v, Op::Concat(ids.clone()), &ids)
    }

    /// Round half to even in the forward pass, identity in the backward pass.
    pub fn ste_round(&mut self, a: Var) -> Result<Var> {
        let v = if self.ste_identity {
            self.value(a).clone()
        } else {
            self.value(a).map(|x| x.round_half_even())
        };
        self.push(v, Op::SteRound(a.0), &[a.0])
    }

    /// Per-element code length in bits of residual `v` under a unit-bin
    /// discretized Gaussian with scale `sigma`.
    pub fn gaussian_bits(&mut self, v: Var, sigma: Var) -> Result<Var> {
        self.same_shape("gaussian_bits", v, sigma)?;
        let out = self
            .value(v)
            .zip_map(self.value(sigma), |r, s| S::from_f64(gaussian::bits(r.to_f64(), s.to_f64())));
        self.push(out, Op::GaussianBits(v.0, sigma.0), &[v.0, sigma.0])
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of squared differences.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum(sq)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.shape(a).numel() as f64;
        let s = self.sq_dist(a, b)?;
        self.scale(s, 1.0 / n)
    }

    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar node. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.shape(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::ONE));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            if let Op::Leaf = op {
                match self.nodes[id].grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => self.nodes[id].grad = Some(g),
                }
                continue;
            }
            self.backprop(id, &op, g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], id: usize, g: Tensor<S>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match grads[id].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads[id] = Some(g),
        }
    }

    fn backprop(&self, id: usize, op: &Op<S>, g: Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let out = &self.nodes[id].value;
        match *op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geo } => {
                let want = [
                    self.nodes[x].requires_grad,
                    self.nodes[w].requires_grad,
                    b.is_some_and(|b| self.nodes[b].requires_grad),
                ];
                let cg = conv2d_backward(&self.nodes[x].value, &self.nodes[w].value, &g, geo, want);
                if let Some(gi) = cg.input {
                    self.accumulate(grads, x, gi);
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, w, gw);
                }
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, b, g.map(|v| -v));
                self.accumulate(grads, a, g);
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(&self.nodes[b].value, |gv, bv| gv * bv);
                let gb = g.zip_map(&self.nodes[a].value, |gv, av| gv * av);
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::AddChannel(a, b) => {
                let gb = reduce_to_channels(&g);
                self.accumulate(grads, a, g);
                self.accumulate(grads, b, gb);
            }
            Op::MulChannel(a, b) => {
                let s = g.shape();
                let scale = self.nodes[b].value.data();
                let av = &self.nodes[a].value;
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(Shape::new(1, s.c(), 1, 1));
                for (i, chunk) in ga.data_mut().chunks_mut(s.plane()).enumerate() {
                    let c = i % s.c();
                    let base = i * s.plane();
                    let mut acc = S::ZERO;
                    for (j, gv) in chunk.iter_mut().enumerate() {
                        acc += *gv * av.data()[base + j];
                        *gv *= scale[c];
                    }
                    gb.data_mut()[c] += acc;
                }
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::Broadcast(a) => {
                self.accumulate(grads, a, reduce_to_channels(&g));
            }
            Op::Scale(a, k) => self.accumulate(grads, a, g.map(|v| v * k)),
            Op::AddScalar(a) => self.accumulate(grads, a, g),
            Op::Relu6(a) => {
                let six = S::from_f64(6.0);
                let ga = g.zip_map(&self.nodes[a].value, |gv, x| if x > S::ZERO && x < six { gv } else { S::ZERO });
                self.accumulate(grads, a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(&self.nodes[a].value, |gv, x| gv * gelu_grad(x));
                self.accumulate(grads, a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(out, |gv, y| gv * y);
                self.accumulate(grads, a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g.zip_map(&self.nodes[a].value, |gv, x| if x >= lo && x <= hi { gv } else { S::ZERO });
                self.accumulate(grads, a, ga);
            }
            Op::Upsample2(a) => {
                let mut ga = Tensor::zeros(self.nodes[a].value.shape());
                let s = g.shape();
                for n in 0..s.n() {
                    for c in 0..s.c() {
                        for y in 0..s.h() {
                            for x in 0..s.w() {
                                let i = ga.index(n, c, y / 2, x / 2);
                                ga.data_mut()[i] += g.at(n, c, y, x);
                            }
                        }
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::Crop(a) => {
                let mut ga = Tensor::zeros(self.nodes[a].value.shape());
                let s = g.shape();
                for n in 0..s.n() {
                    for c in 0..s.c() {
                        for y in 0..s.h() {
                            for x in 0..s.w() {
                                ga.set(n, c, y, x, g.at(n, c, y, x));
                            }
                        }
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::SliceChannels(a, start) => {
                let mut ga = Tensor::zeros(self.nodes[a].value.shape());
                let s = g.shape();
                for n in 0..s.n() {
                    for c in 0..s.c() {
                        let src = g.index(n, c, 0, 0);
                        let dst = ga.index(n, start + c, 0, 0);
                        let plane = s.plane();
                        ga.data_mut()[dst..dst + plane].copy_from_slice(&g.data()[src..src + plane]);
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::Concat(ref parts) => {
                let s = g.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.nodes[p].value.shape();
                    if self.nodes[p].requires_grad {
                        let gp = Tensor::from_fn(ps, |[n, c, y, x]| g.at(n, offset + c, y, x));
                        self.accumulate(grads, p, gp);
                    }
                    offset += ps.c();
                }
                debug_assert_eq!(offset, s.c());
            }
            Op::SteRound(a) => self.accumulate(grads, a, g),
            Op::GaussianBits(v, sigma) => {
                let rv = &self.nodes[v].value;
                let sv = &self.nodes[sigma].value;
                let mut gv = Tensor::zeros(rv.shape());
                let mut gs = Tensor::zeros(rv.shape());
                for i in 0..rv.data().len() {
                    let (dr, ds) = gaussian::bits_grad(rv.data()[i].to_f64(), sv.data()[i].to_f64());
                    let up = g.data()[i];
                    gv.data_mut()[i] = up * S::from_f64(dr);
                    gs.data_mut()[i] = up * S::from_f64(ds);
                }
                self.accumulate(grads, v, gv);
                self.accumulate(grads, sigma, gs);
            }
            Op::Sum(a) => {
                let up = g.item();
                self.accumulate(grads, a, Tensor::full(self.nodes[a].value.shape(), up));
            }
        }
        Ok(())
    }
}

/// Sum a gradient over batch and spatial axes into `1×C×1×1`.
fn reduce_to_channels<S: Real>(g: &Tensor<S>) -> Tensor<S> {
    let s = g.shape();
    let mut out = Tensor::zeros(Shape::new(1, s.c(), 1, 1));
    for (i, chunk) in g.data().chunks(s.plane()).enumerate() {
        let mut acc = S::ZERO;
        for &v in chunk {
            acc += v;
        }
        out.data_mut()[i % s.c()] += acc;
    }
    out
}
