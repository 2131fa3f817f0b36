//! Layers shared by every network in the codec.
//!
//! Layers only hold [`ParamId`]s; weights live in a [`ParamStore`] and are
//! bound into a [`Graph`] per forward pass through a [`Binding`].

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Shape, Tensor, Var};

/// Parameter initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(3 / fan_in)`.
    KaimingUniform,
    /// Kaiming-uniform multiplied by a gain.
    Scaled(f64),
    Zeros,
    /// 1×1 identity mapping; requires `cin == cout`.
    Identity,
}

/// Binds the parameters of one store into a graph, lazily.
pub struct Binding<'a, S: Real> {
    store: &'a ParamStore<S>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, S: Real> Binding<'a, S> {
    pub fn new(store: &'a ParamStore<S>, trainable: bool) -> Self {
        Binding {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    /// Parameters bound as constants: no gradient ever reaches them.
    pub fn frozen(store: &'a ParamStore<S>) -> Self {
        Self::new(store, false)
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph<S>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.index()] {
            return v;
        }
        let v = g.leaf(self.store.get(id).clone(), self.trainable);
        self.vars[id.index()] = Some(v);
        v
    }

    /// Gradient for every parameter; unbound or untouched parameters get
    /// `None`.
    pub fn grads(&self, g: &Graph<S>) -> Vec<Option<Tensor<S>>> {
        grads_of(&self.vars, g)
    }

    /// Graph variables of the bound parameters, for reading gradients after
    /// the binding is gone.
    pub fn bound(&self) -> Vec<Option<Var>> {
        self.vars.clone()
    }
}

pub fn grads_of<S: Real>(vars: &[Option<Var>], g: &Graph<S>) -> Vec<Option<Tensor<S>>> {
    vars.iter().map(|v| v.and_then(|v| g.grad(v).cloned())).collect()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        init: Init,
    ) -> Self {
        let cin_g = cin / groups;
        let shape = Shape::new(cout, cin_g, kernel, kernel);
        let w = match init {
            Init::KaimingUniform | Init::Scaled(_) => {
                let gain = if let Init::Scaled(k) = init { k } else { 1.0 };
                let bound = (3.0 / (cin_g * kernel * kernel) as f64).sqrt();
                Tensor::from_fn(shape, |_| S::from_f64(gain * rng.gen_range(-bound..bound)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Identity => {
                assert!(cin == cout && kernel == 1 && groups == 1, "identity init needs a square 1×1 conv");
                Tensor::from_fn(shape, |[o, i, _, _]| if o == i { S::ONE } else { S::ZERO })
            }
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, cout, 1, 1)));
        Conv2d {
            weight,
            bias: Some(bias),
            cin,
            cout,
            kernel,
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn depthwise<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, channels: usize) -> Self {
        Self::new(store, rng, name, channels, channels, 3, 1, channels, Init::KaimingUniform)
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = self.bias.map(|b| p.var(g, b));
        g.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    /// Multiply-accumulates for one image of size `h×w`, plus the output size.
    pub fn macs(&self, h: usize, w: usize) -> (u64, usize, usize) {
        let (oh, ow) = self.output_hw(h, w);
        let per_out = (self.cin / self.groups) * self.kernel * self.kernel;
        ((self.cout * per_out * oh * ow) as u64, oh, ow)
    }
}

/// Star-operation residual block:
/// `x + W_o( relu6(W_a · dw(x)) ⊙ (W_b · dw(x)) )` with a 2× expansion.
/// `W_o` starts at zero, so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct StarBlock {
    pub dw: Conv2d,
    pub expand_a: Conv2d,
    pub expand_b: Conv2d,
    pub project: Conv2d,
    pub width: usize,
}

impl StarBlock {
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, width: usize) -> Self {
        let hidden = 2 * width;
        StarBlock {
            dw: Conv2d::depthwise(store, rng, &format!("{name}.dw"), width),
            expand_a: Conv2d::new(store, rng, &format!("{name}.f1"), width, hidden, 1, 1, 1, Init::KaimingUniform),
            expand_b: Conv2d::new(store, rng, &format!("{name}.f2"), width, hidden, 1, 1, 1, Init::KaimingUniform),
            project: Conv2d::new(store, rng, &format!("{name}.g"), hidden, width, 1, 1, 1, Init::Zeros),
            width,
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.c() != self.width {
            return Err(crate::error::Error::ShapeMismatch {
                op: "star_block",
                lhs: s,
                rhs: s.with_c(self.width),
            });
        }
        let d = self.dw.forward(g, p, x)?;
        let a = self.expand_a.forward(g, p, d)?;
        let a = g.relu6(a)?;
        let b = self.expand_b.forward(g, p, d)?;
        let star = g.mul(a, b)?;
        let out = self.project.forward(g, p, star)?;
        g.add(x, out)
    }

    pub fn convs(&self) -> [&Conv2d; 4] {
        [&self.dw, &self.expand_a, &self.expand_b, &self.project]
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.convs().iter().map(|c| c.macs(h, w).0).sum()
    }
}

/// Nearest ×2 upsample followed by a 3×3 conv.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub conv: Conv2d,
}

impl UpConv {
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        UpConv {
            conv: Conv2d::new(store, rng, name, cin, cout, 3, 1, 1, Init::KaimingUniform),
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, x: Var) -> Result<Var> {
        let up = g.upsample2(x)?;
        self.conv.forward(g, p, up)
    }

    pub fn macs(&self, h: usize, w: usize) -> (u64, usize, usize) {
        self.conv.macs(2 * h, 2 * w)
    }
}
