//! The complete codec: parameters, architecture and the differentiable
//! forward pass used for training.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{Denoiser, PixelDecoder};
use crate::entropy::{ContextModel, Hyperprior, QuadtreeGroups, ZPrior, STEPS};
use crate::error::{Error, Result};
use crate::nn::Binding;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamStore, Real, Shape, Tensor, Var};
use crate::transforms::{AnalysisTransform, ModelConfig, SynthesisTransform};

/// Module layout. Holds parameter ids only, so one layout serves stores of
/// any precision.
#[derive(Clone, Debug)]
pub struct Network {
    pub analysis: AnalysisTransform,
    pub hyper: Hyperprior,
    pub z_prior: ZPrior,
    pub context: ContextModel,
    pub synthesis: SynthesisTransform,
    pub denoiser: Denoiser,
    pub pixel: PixelDecoder,
}

#[derive(Clone, Debug)]
pub struct CodecModel {
    pub config: ModelConfig,
    pub net: Network,
    pub store: ParamStore<f32>,
}

/// How the forward pass estimates the rate.
pub enum RateProxy<'a> {
    /// Additive `U(−0.5, 0.5)` noise on `y` and `z`.
    Noise(&'a mut dyn rand::RngCore),
    /// Code lengths of the hard-quantized residuals.
    Hard,
}

/// Every intermediate of one training forward pass.
pub struct Forward {
    pub y: Var,
    pub z: Var,
    pub z_hat: Var,
    pub phi: Var,
    pub y_hat: Var,
    pub mu: Var,
    pub sigma: Var,
    pub l_t: Var,
    pub l_res: Var,
    pub l_0: Var,
    pub block_features: Vec<Var>,
    pub x_hat: Var,
    pub bits_y: Var,
    pub bits_z: Var,
}

impl Forward {
    /// Total rate estimate in bits.
    pub fn bits<S: Real>(&self, g: &mut Graph<S>) -> Result<Var> {
        g.add(self.bits_y, self.bits_z)
    }
}

fn repeat_batch<S: Real>(t: Tensor<S>, n: usize) -> Result<Tensor<S>> {
    if n == 1 {
        return Ok(t);
    }
    Tensor::stack(&vec![t; n])
}

fn uniform_noise<S: Real>(rng: &mut dyn rand::RngCore, shape: Shape) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(rng.gen_range(-0.5..0.5)))
}

impl Network {
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        Network {
            analysis: AnalysisTransform::new(store, rng, cfg),
            hyper: Hyperprior::new(store, rng, cfg),
            z_prior: ZPrior::new(store, cfg.hyper_channels),
            context: ContextModel::new(store, rng, cfg),
            synthesis: SynthesisTransform::new(store, rng, cfg),
            denoiser: Denoiser::new(store, rng, cfg),
            pixel: PixelDecoder::new(store, rng, cfg),
        }
    }

    /// `ẑ = round(z − μ_c) + μ_c` with straight-through gradients, and the
    /// rate of `z` under the per-channel prior.
    fn code_z<S: Real>(
        &self,
        g: &mut Graph<S>,
        p: &mut Binding<S>,
        z: Var,
        proxy: &mut RateProxy<'_>,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(z);
        let (mu_c, sigma_c) = self.z_prior.params(g, p)?;
        let mu = g.broadcast(mu_c, shape)?;
        let sigma = g.broadcast(sigma_c, shape)?;
        let centred = g.sub(z, mu)?;
        let rounded = g.ste_round(centred)?;
        let z_hat = g.add(rounded, mu)?;
        let residual = match proxy {
            RateProxy::Noise(rng) => {
                let u = g.constant(uniform_noise(*rng, shape));
                g.add(centred, u)?
            }
            RateProxy::Hard => rounded,
        };
        let bits = g.gaussian_bits(residual, sigma)?;
        let bits = g.sum(bits)?;
        Ok((z_hat, bits))
    }

    /// Differentiable pass from an image batch to its reconstruction.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        p: &mut Binding<S>,
        x: Var,
        mut proxy: RateProxy<'_>,
    ) -> Result<Forward> {
        let y = self.analysis.forward(g, p, x)?;
        let ys = g.shape(y);
        let z = self.hyper.encode(g, p, y)?;
        let (z_hat, bits_z) = self.code_z(g, p, z, &mut proxy)?;
        let phi = self.hyper.decode(g, p, z_hat, ys.h(), ys.w())?;

        let groups = QuadtreeGroups::new(ys.h(), ys.w());
        let noisy = match &mut proxy {
            RateProxy::Noise(rng) => {
                let u = g.constant(uniform_noise(*rng, ys));
                Some(g.add(y, u)?)
            }
            RateProxy::Hard => None,
        };
        let mut partial = g.constant(Tensor::zeros(ys));
        let mut mu_all = None;
        let mut sigma_all = None;
        let mut bit_terms = Vec::with_capacity(STEPS);
        for k in 0..STEPS {
            if groups.groups[k].is_empty() {
                continue;
            }
            let params = self.context.step(g, p, k, phi, partial)?;
            let mask = g.constant(repeat_batch(groups.mask(k, ys.c()), ys.n())?);
            let centred = g.sub(y, params.mu)?;
            let rounded = g.ste_round(centred)?;
            let y_hat_k = g.add(rounded, params.mu)?;
            let residual = match noisy {
                Some(n) => g.sub(n, params.mu)?,
                None => rounded,
            };
            let bits = g.gaussian_bits(residual, params.sigma)?;
            let bits = g.mul(bits, mask)?;
            bit_terms.push(g.sum(bits)?);

            let picked = g.mul(y_hat_k, mask)?;
            partial = g.add(partial, picked)?;
            let mu_k = g.mul(params.mu, mask)?;
            let sigma_k = g.mul(params.sigma, mask)?;
            mu_all = Some(match mu_all {
                Some(m) => g.add(m, mu_k)?,
                None => mu_k,
            });
            sigma_all = Some(match sigma_all {
                Some(s) => g.add(s, sigma_k)?,
                None => sigma_k,
            });
        }
        let y_hat = partial;
        let bits_y = g.add_all(&bit_terms)?;

        let (l_t, l_res) = self.synthesis.forward(g, p, y_hat)?;
        let den = self.denoiser.forward(g, p, l_t)?;
        let x_hat = self.pixel.forward(g, p, den.l0, l_res)?;
        Ok(Forward {
            y,
            z,
            z_hat,
            phi,
            y_hat,
            mu: mu_all.expect("grid has at least one position"),
            sigma: sigma_all.expect("grid has at least one position"),
            l_t,
            l_res,
            l_0: den.l0,
            block_features: den.features,
            x_hat,
            bits_y,
            bits_z,
        })
    }
}

/// Analytic multiply-accumulate counts of one model, per component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacTable {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<(&'static str, u64)>,
}

impl MacTable {
    pub const ENCODER: [&'static str; 4] = ["g_a", "h_a", "h_s", "context"];

    pub fn get(&self, name: &str) -> u64 {
        self.rows.iter().find(|(n, _)| *n == name).map_or(0, |r| r.1)
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().map(|r| r.1).sum()
    }

    /// Work the sender does: analysis, hyperprior and context model.
    pub fn encoder_total(&self) -> u64 {
        Self::ENCODER.iter().map(|n| self.get(n)).sum()
    }

    pub fn per_pixel(&self, macs: u64) -> f64 {
        macs as f64 / (self.height * self.width) as f64
    }
}

impl CodecModel {
    /// Construct and initialise from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, &mut rng, config);
        Ok(CodecModel {
            config: config.clone(),
            net,
            store,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Parameters of the sender side (analysis, hyper-analysis, priors and
    /// context nets; the hyper-synthesis runs on both sides).
    pub fn encoder_param_count(&self) -> usize {
        const PREFIXES: [&str; 5] = ["g_a.", "h_a.", "h_s.", "ctx.", "z_prior."];
        self.store
            .iter()
            .filter(|(n, _)| PREFIXES.iter().any(|p| n.starts_with(p)))
            .map(|(_, t)| t.data().len())
            .sum()
    }

    pub fn config_id(&self) -> u8 {
        self.config.config_id()
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        write_checkpoint(&self.store, self.config_id(), out)
    }

    pub fn save_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    /// Rebuild `config` and fill it from a checkpoint written for the same
    /// architecture.
    pub fn load<R: Read>(config: &ModelConfig, input: R) -> Result<Self> {
        let (id, stored) = read_checkpoint(input)?;
        let mut model = Self::build(config)?;
        if id != model.config_id() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config id {id} does not match model config id {}",
                model.config_id()
            )));
        }
        model.store.copy_from(&stored)?;
        Ok(model)
    }

    pub fn macs(&self, height: usize, width: usize) -> Result<MacTable> {
        let r = self.config.spatial_ratio;
        if !height.is_multiple_of(r) || !width.is_multiple_of(r) {
            return Err(Error::NotPadded { height, width, ratio: r });
        }
        let (yh, yw) = (height / r, width / r);
        let up = self.config.synthesis_upsample();
        let (lh, lw) = (yh * up, yw * up);
        let net = &self.net;
        Ok(MacTable {
            height,
            width,
            rows: vec![
                ("g_a", net.analysis.macs(height, width)),
                ("h_a", net.hyper.encode_macs(yh, yw)),
                ("h_s", net.hyper.decode_macs(yh, yw)),
                ("context", STEPS as u64 * net.context.step_macs(yh, yw)),
                ("g_s", net.synthesis.macs(yh, yw)),
                ("denoiser", net.denoiser.macs(lh, lw)),
                ("pixel_decoder", net.pixel.macs(lh, lw)),
            ],
        })
    }

    /// Run the training forward pass under inference settings with hard
    /// quantization. Returns the reconstruction and the estimated bits.
    pub fn reconstruct(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, f64)> {
        let mut g = Graph::inference();
        let mut p = Binding::frozen(&self.store);
        let xv = g.constant(x.clone());
        let f = self.net.forward(&mut g, &mut p, xv, RateProxy::Hard)?;
        let bits = f.bits(&mut g)?;
        Ok((g.value(f.x_hat).clone(), g.value(bits).item() as f64))
    }
}
