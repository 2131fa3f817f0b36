//! Image ↔ bitstream.
//!
//! `z` is coded first against the per-channel prior, then the four quadtree
//! groups of `y` in order. Symbols are the integer residuals `ŷ − μ`; both
//! ends rebuild `μ, σ` from identical inputs, so the tables always agree.

use super::bitstream::{Bitstream, Header};
use super::cdf::{CdfBank, QuantizedCdf, SYMBOL_MAX, SYMBOL_MIN};
use super::range::{RangeDecoder, RangeEncoder};
use crate::entropy::{Hyperprior, QuadtreeGroups, STEPS};
use crate::error::{Error, Result};
use crate::model::CodecModel;
use crate::nn::Binding;
use crate::tensor::{Graph, Real, Shape, Tensor};

/// Replicate-pad right and bottom up to the next multiple of `r`. Returns
/// the padded image and the original `(height, width)`.
pub fn pad_to_multiple(x: &Tensor<f32>, r: usize) -> (Tensor<f32>, (usize, usize)) {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let (ph, pw) = (h.div_ceil(r) * r, w.div_ceil(r) * r);
    if (ph, pw) == (h, w) {
        return (x.clone(), (h, w));
    }
    let out = Tensor::from_fn(s.with_hw(ph, pw), |[n, c, y, xx]| x.at(n, c, y.min(h - 1), xx.min(w - 1)));
    (out, (h, w))
}

/// Encoder output plus the latents it committed to.
pub struct Encoded {
    pub bitstream: Bitstream,
    pub y_hat: Tensor<f32>,
    pub z_hat: Tensor<f32>,
}

fn residual_symbol(value: f32, mu: f32) -> i32 {
    ((value - mu).round_half_even() as i32).clamp(SYMBOL_MIN, SYMBOL_MAX)
}

struct Coder<'m> {
    model: &'m CodecModel,
    bank: &'static CdfBank,
    y_shape: Shape,
    z_shape: Shape,
}

impl<'m> Coder<'m> {
    fn new(model: &'m CodecModel, height: usize, width: usize) -> Result<Self> {
        let r = model.config.spatial_ratio;
        let (yh, yw) = (height.div_ceil(r), width.div_ceil(r));
        let (zh, zw) = Hyperprior::z_hw(yh, yw);
        Ok(Coder {
            model,
            bank: CdfBank::global(),
            y_shape: Shape::new(1, model.config.latent_channels, yh, yw),
            z_shape: Shape::new(1, model.config.hyper_channels, zh, zw),
        })
    }

    fn z_tables(&self) -> (Vec<f32>, Vec<&'static QuantizedCdf>) {
        let (mu, sigma) = self.model.net.z_prior.values(&self.model.store);
        let tables = sigma.iter().map(|&s| self.bank.get(0.0, s as f64)).collect();
        (mu, tables)
    }

    fn phi(&self, z_hat: &Tensor<f32>) -> Result<Tensor<f32>> {
        hyper_features(self.model, z_hat, self.y_shape.h(), self.y_shape.w())
    }

    fn table(&self, sigma: f32) -> &'static QuantizedCdf {
        self.bank.get(0.0, sigma as f64)
    }
}

/// Hyper-synthesis features `φ` of a decoded `ẑ` for a `y_h×y_w` grid.
pub fn hyper_features(model: &CodecModel, z_hat: &Tensor<f32>, y_h: usize, y_w: usize) -> Result<Tensor<f32>> {
    let mut g = Graph::inference();
    let mut p = Binding::frozen(&model.store);
    let z = g.constant(z_hat.clone());
    let phi = model.net.hyper.decode(&mut g, &mut p, z, y_h, y_w)?;
    Ok(g.value(phi).clone())
}

/// `(μ, σ)` of quadtree step `k` over the full grid. Only the groups before
/// `k` are read from `y_hat`; everything else is masked to zero first.
pub fn context_params(
    model: &CodecModel,
    phi: &Tensor<f32>,
    y_hat: &Tensor<f32>,
    k: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = y_hat.shape();
    if s.n() != 1 {
        return Err(Error::Shape(format!("context_params expects one latent, got {s}")));
    }
    let seen = Tensor::from_fn(s, |[_, c, r, col]| {
        if QuadtreeGroups::step_of(r, col) < k {
            y_hat.at(0, c, r, col)
        } else {
            0.0
        }
    });
    let mut g = Graph::inference();
    let mut p = Binding::frozen(&model.store);
    let phi = g.constant(phi.clone());
    let partial = g.constant(seen);
    let params = model.net.context.step(&mut g, &mut p, k, phi, partial)?;
    Ok((g.value(params.mu).clone(), g.value(params.sigma).clone()))
}

/// Compress one `1×3×H×W` image with values in `[0, 1]`.
pub fn encode_image(model: &CodecModel, x: &Tensor<f32>, lambda_id: u8) -> Result<Encoded> {
    let s = x.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::Shape(format!("encode_image expects a 1×3×H×W image, got {s}")));
    }
    let header = Header::new(model.config_id(), lambda_id, s.w(), s.h())?;
    let (padded, _) = pad_to_multiple(x, model.config.spatial_ratio);
    let coder = Coder::new(model, s.h(), s.w())?;

    let (y, z) = {
        let mut g = Graph::inference();
        let mut p = Binding::frozen(&model.store);
        let xv = g.constant(padded);
        let y = model.net.analysis.forward(&mut g, &mut p, xv)?;
        let z = model.net.hyper.encode(&mut g, &mut p, y)?;
        (g.value(y).clone(), g.value(z).clone())
    };
    debug_assert_eq!(y.shape(), coder.y_shape);

    let (z_mu, z_tables) = coder.z_tables();
    let zs = z.shape();
    let mut z_hat = Tensor::zeros(zs);
    let mut enc = RangeEncoder::new();
    for c in 0..zs.c() {
        for i in 0..zs.h() {
            for j in 0..zs.w() {
                let q = residual_symbol(z.at(0, c, i, j), z_mu[c]);
                enc.encode(q, z_tables[c])?;
                z_hat.set(0, c, i, j, q as f32 + z_mu[c]);
            }
        }
    }
    let z_bytes = enc.finish();

    let phi = coder.phi(&z_hat)?;
    let groups = QuadtreeGroups::new(coder.y_shape.h(), coder.y_shape.w());
    let mut y_hat = Tensor::zeros(coder.y_shape);
    let mut steps: [Vec<u8>; STEPS] = Default::default();
    for (k, seg) in steps.iter_mut().enumerate() {
        if groups.groups[k].is_empty() {
            *seg = RangeEncoder::new().finish();
            continue;
        }
        let (mu, sigma) = context_params(model, &phi, &y_hat, k)?;
        let mut enc = RangeEncoder::new();
        for &(r, col) in &groups.groups[k] {
            for c in 0..coder.y_shape.c() {
                let m = mu.at(0, c, r, col);
                let q = residual_symbol(y.at(0, c, r, col), m);
                enc.encode(q, coder.table(sigma.at(0, c, r, col)))?;
                y_hat.set(0, c, r, col, q as f32 + m);
            }
        }
        *seg = enc.finish();
    }
    Ok(Encoded {
        bitstream: Bitstream {
            header,
            z: z_bytes,
            steps,
        },
        y_hat,
        z_hat,
    })
}

fn check_header(model: &CodecModel, bs: &Bitstream) -> Result<()> {
    if bs.header.config_id != model.config_id() {
        return Err(Error::Decode(format!(
            "bitstream was written for config {} but the model is config {}",
            bs.header.config_id,
            model.config_id()
        )));
    }
    if bs.header.width == 0 || bs.header.height == 0 {
        return Err(Error::Decode("bitstream has an empty image".into()));
    }
    Ok(())
}

/// Recover `ŷ` exactly as the encoder produced it.
pub fn decode_latents(model: &CodecModel, bs: &Bitstream) -> Result<Tensor<f32>> {
    check_header(model, bs)?;
    let (h, w) = (bs.header.height as usize, bs.header.width as usize);
    let coder = Coder::new(model, h, w)?;

    let (z_mu, z_tables) = coder.z_tables();
    let zs = coder.z_shape;
    let mut z_hat = Tensor::zeros(zs);
    let mut dec = RangeDecoder::new(&bs.z);
    for c in 0..zs.c() {
        for i in 0..zs.h() {
            for j in 0..zs.w() {
                let q = dec.decode(z_tables[c])?;
                z_hat.set(0, c, i, j, q as f32 + z_mu[c]);
            }
        }
    }

    let phi = coder.phi(&z_hat)?;
    let groups = QuadtreeGroups::new(coder.y_shape.h(), coder.y_shape.w());
    let mut y_hat = Tensor::zeros(coder.y_shape);
    for k in 0..STEPS {
        if groups.groups[k].is_empty() {
            continue;
        }
        let (mu, sigma) = context_params(model, &phi, &y_hat, k)?;
        let mut dec = RangeDecoder::new(&bs.steps[k]);
        for &(r, col) in &groups.groups[k] {
            for c in 0..coder.y_shape.c() {
                let m = mu.at(0, c, r, col);
                let q = dec.decode(coder.table(sigma.at(0, c, r, col)))?;
                y_hat.set(0, c, r, col, q as f32 + m);
            }
        }
    }
    Ok(y_hat)
}

/// Decoder-side synthesis from `ŷ` to pixels at the padded size.
pub fn synthesize(model: &CodecModel, y_hat: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::inference();
    let mut p = Binding::frozen(&model.store);
    let yv = g.constant(y_hat.clone());
    let (l_t, l_res) = model.net.synthesis.forward(&mut g, &mut p, yv)?;
    let den = model.net.denoiser.forward(&mut g, &mut p, l_t)?;
    let x = model.net.pixel.forward(&mut g, &mut p, den.l0, l_res)?;
    Ok(g.value(x).clone())
}

pub fn decode_image(model: &CodecModel, bs: &Bitstream) -> Result<Tensor<f32>> {
    let y_hat = decode_latents(model, bs)?;
    let x = synthesize(model, &y_hat)?;
    Ok(x.crop(bs.header.height as usize, bs.header.width as usize))
}
