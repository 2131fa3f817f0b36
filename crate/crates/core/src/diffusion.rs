//! One-step latent denoiser `ε` and the lite pixel decoder `D`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, Init, StarBlock, UpConv};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::transforms::ModelConfig;

/// Unconditional direct map `l_0 = ε(l_T)`.
///
/// `input_skip` adds `input_skip · l_T` to the output. It is 0 for trained
/// models; the affine re-parameterisation of the conditional form sets it.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub stem: Conv2d,
    pub blocks: Vec<StarBlock>,
    pub out: Conv2d,
    pub channels: usize,
    pub input_skip: f64,
}

pub struct DenoiserOutput {
    pub l0: Var,
    /// Output of every residual block.
    pub features: Vec<Var>,
}

impl Denoiser {
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let c = cfg.decoder_latent_channels;
        let w = cfg.denoiser_width;
        Denoiser {
            stem: Conv2d::new(store, rng, "eps.stem", c, w, 3, 1, 1, Init::KaimingUniform),
            blocks: (0..cfg.denoiser_depth)
                .map(|i| StarBlock::new(store, rng, &format!("eps.b{i}"), w))
                .collect(),
            out: Conv2d::new(store, rng, "eps.out", w, c, 3, 1, 1, Init::Zeros),
            channels: c,
            input_skip: 0.0,
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, l_t: Var) -> Result<DenoiserOutput> {
        let s = g.shape(l_t);
        if s.c() != self.channels {
            return Err(Error::Shape(format!("denoiser expects {} channels, got {s}", self.channels)));
        }
        let mut h = self.stem.forward(g, p, l_t)?;
        let mut features = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
            features.push(h);
        }
        let mut l0 = self.out.forward(g, p, h)?;
        if self.input_skip != 0.0 {
            let skip = g.scale(l_t, self.input_skip)?;
            l0 = g.add(l0, skip)?;
        }
        Ok(DenoiserOutput { l0, features })
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.stem.macs(h, w).0 + self.blocks.iter().map(|b| b.macs(h, w)).sum::<u64>() + self.out.macs(h, w).0
    }

    /// Fold the conditional one-step formula around `self` (treated as the
    /// noise predictor) into a direct map: the output conv is scaled by
    /// `−sqrt((1−ᾱ)/ᾱ)` and an input skip of `1/sqrt(ᾱ)` is added.
    /// The output conv is rewritten in place, so callers that still need the
    /// noise predictor should work on a copy of the store.
    pub fn reparameterize<S: Real>(&self, store: &mut ParamStore<S>, alpha_bar: f64) -> Result<Denoiser> {
        check_alpha_bar(alpha_bar)?;
        let k = S::from_f64(-((1.0 - alpha_bar) / alpha_bar).sqrt());
        for id in [Some(self.out.weight), self.out.bias].into_iter().flatten() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= k);
        }
        let mut direct = self.clone();
        direct.input_skip = 1.0 / alpha_bar.sqrt() + self.input_skip * k.to_f64();
        Ok(direct)
    }
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if alpha_bar > 0.0 && alpha_bar < 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("alpha_bar must lie in (0,1), got {alpha_bar}")))
    }
}

/// `l_0 = (l_T − sqrt(1−ᾱ)·ε(l_T)) / sqrt(ᾱ)` for an arbitrary noise
/// predictor with fixed conditioning.
pub fn conditional_denoise<S: Real>(
    l_t: &Tensor<S>,
    eps_fn: impl FnOnce(&Tensor<S>) -> Result<Tensor<S>>,
    alpha_bar: f64,
) -> Result<Tensor<S>> {
    check_alpha_bar(alpha_bar)?;
    let eps = eps_fn(l_t)?;
    if eps.shape() != l_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "conditional_denoise",
            lhs: l_t.shape(),
            rhs: eps.shape(),
        });
    }
    let a = S::from_f64((1.0 - alpha_bar).sqrt());
    let b = S::from_f64(alpha_bar.sqrt());
    Ok(l_t.zip_map(&eps, |l, e| (l - a * e) / b))
}

/// Lite pixel decoder: 4× nearest+conv upsampling to RGB in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub stem: Conv2d,
    pub ups: [UpConv; 2],
    pub out: Conv2d,
    pub channels: usize,
}

/// Constant added before the output clamp so a zero network yields mid-grey.
pub const PIXEL_OFFSET: f64 = 0.5;

impl PixelDecoder {
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let c = cfg.decoder_latent_channels;
        let w = cfg.effective_pixel_width();
        PixelDecoder {
            stem: Conv2d::new(store, rng, "dec.stem", c, w, 3, 1, 1, Init::KaimingUniform),
            ups: [
                UpConv::new(store, rng, "dec.up0", w, w),
                UpConv::new(store, rng, "dec.up1", w, w),
            ],
            out: Conv2d::new(store, rng, "dec.out", w, 3, 3, 1, 1, Init::KaimingUniform),
            channels: c,
        }
    }

    /// `x̂ = clamp(D(l_0 + l_res) + 0.5, 0, 1)`.
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, l0: Var, l_res: Var) -> Result<Var> {
        let (a, b) = (g.shape(l0), g.shape(l_res));
        if a != b {
            return Err(Error::ShapeMismatch {
                op: "pixel_decode",
                lhs: a,
                rhs: b,
            });
        }
        let fused = g.add(l0, l_res)?;
        self.decode_fused(g, p, fused)
    }

    pub fn decode_fused<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, fused: Var) -> Result<Var> {
        let s = g.shape(fused);
        if s.c() != self.channels {
            return Err(Error::Shape(format!("pixel decoder expects {} channels, got {s}", self.channels)));
        }
        let mut h = self.stem.forward(g, p, fused)?;
        h = g.gelu(h)?;
        for up in &self.ups {
            h = up.forward(g, p, h)?;
            h = g.gelu(h)?;
        }
        let out = self.out.forward(g, p, h)?;
        let out = g.add_scalar(out, PIXEL_OFFSET)?;
        g.clamp(out, 0.0, 1.0)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (mut total, mut h, mut w) = self.stem.macs(h, w);
        for up in &self.ups {
            let (m, oh, ow) = up.macs(h, w);
            total += m;
            h = oh;
            w = ow;
        }
        total + self.out.macs(h, w).0
    }
}
