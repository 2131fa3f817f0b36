//! Hyperprior and four-step quadtree context model producing per-position
//! Gaussian parameters `(μ, σ)` for the main latent, μ-shifted quantization,
//! and the code-length estimate used for training.

pub mod gaussian;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, Init, UpConv};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Shape, Tensor, Var};
use crate::transforms::ModelConfig;

pub const SIGMA_MIN: f64 = 0.04;
pub const SIGMA_MAX: f64 = 256.0;

/// Number of autoregressive steps.
pub const STEPS: usize = 4;

/// `(row mod 2, col mod 2)` of each step, in decode order.
pub const PHASES: [(usize, usize); STEPS] = [(0, 0), (1, 1), (0, 1), (1, 0)];

/// Partition of an `h×w` grid into the four parity groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuadtreeGroups {
    pub height: usize,
    pub width: usize,
    /// Raster-ordered `(row, col)` positions per step.
    pub groups: [Vec<(usize, usize)>; STEPS],
}

impl QuadtreeGroups {
    pub fn new(height: usize, width: usize) -> Self {
        let groups = PHASES.map(|(pr, pc)| {
            (0..height)
                .filter(|r| r % 2 == pr)
                .flat_map(|r| (0..width).filter(move |c| c % 2 == pc).map(move |c| (r, c)))
                .collect()
        });
        QuadtreeGroups { height, width, groups }
    }

    /// Step (0-based) a position belongs to.
    pub fn step_of(row: usize, col: usize) -> usize {
        PHASES
            .iter()
            .position(|&(pr, pc)| row % 2 == pr && col % 2 == pc)
            .expect("parities cover all positions")
    }

    pub fn sizes(&self) -> [usize; STEPS] {
        [0, 1, 2, 3].map(|k| self.groups[k].len())
    }

    /// `1×C×H×W` indicator of group `k`.
    pub fn mask<S: Real>(&self, k: usize, channels: usize) -> Tensor<S> {
        let (pr, pc) = PHASES[k];
        Tensor::from_fn(Shape::new(1, channels, self.height, self.width), |[_, _, r, c]| {
            if r % 2 == pr && c % 2 == pc {
                S::ONE
            } else {
                S::ZERO
            }
        })
    }
}

/// Hyper analysis `h_a` and hyper synthesis `h_s`.
#[derive(Clone, Debug)]
pub struct Hyperprior {
    pub enc1: Conv2d,
    pub enc2: Conv2d,
    pub dec1: UpConv,
    pub dec2: UpConv,
}

impl Hyperprior {
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let hidden = cfg.hyper_feature_channels();
        Hyperprior {
            enc1: Conv2d::new(store, rng, "h_a.c1", cfg.latent_channels, hidden, 3, 2, 1, Init::KaimingUniform),
            enc2: Conv2d::new(store, rng, "h_a.c2", hidden, cfg.hyper_channels, 3, 2, 1, Init::KaimingUniform),
            dec1: UpConv::new(store, rng, "h_s.u1", cfg.hyper_channels, hidden),
            dec2: UpConv::new(store, rng, "h_s.u2", hidden, cfg.hyper_feature_channels()),
        }
    }

    /// `z = h_a(y)`; each stride-2 stage rounds odd sizes up.
    pub fn encode<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, y: Var) -> Result<Var> {
        let h = self.enc1.forward(g, p, y)?;
        let h = g.gelu(h)?;
        self.enc2.forward(g, p, h)
    }

    /// `φ = h_s(ẑ)`, cropped to the `y_h×y_w` latent grid.
    pub fn decode<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, z_hat: Var, y_h: usize, y_w: usize) -> Result<Var> {
        let h = self.dec1.forward(g, p, z_hat)?;
        let h = g.gelu(h)?;
        let h = self.dec2.forward(g, p, h)?;
        g.crop(h, y_h, y_w)
    }

    pub fn z_hw(y_h: usize, y_w: usize) -> (usize, usize) {
        (y_h.div_ceil(2).div_ceil(2), y_w.div_ceil(2).div_ceil(2))
    }

    pub fn encode_macs(&self, y_h: usize, y_w: usize) -> u64 {
        let (m1, h, w) = self.enc1.macs(y_h, y_w);
        m1 + self.enc2.macs(h, w).0
    }

    pub fn decode_macs(&self, y_h: usize, y_w: usize) -> u64 {
        let (zh, zw) = Self::z_hw(y_h, y_w);
        let (m1, h, w) = self.dec1.macs(zh, zw);
        m1 + self.dec2.macs(h, w).0
    }
}

/// One shared block of the context network: `x + dw3x3(gelu(pw1x1(x)))`.
#[derive(Clone, Debug)]
pub struct ContextBlock {
    pub pw: Conv2d,
    pub dw: Conv2d,
}

/// Per-step adapters around a shared trunk.
#[derive(Clone, Debug)]
pub struct ContextModel {
    pub adapters_in: Vec<Conv2d>,
    pub blocks: Vec<ContextBlock>,
    pub adapters_out: Vec<Conv2d>,
    pub latent_channels: usize,
    pub feature_channels: usize,
}

/// Gaussian parameters over the latent grid.
pub struct EntropyParams {
    pub mu: Var,
    pub sigma: Var,
}

impl ContextModel {
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let cy = cfg.latent_channels;
        let cphi = cfg.hyper_feature_channels();
        let dim = cfg.entropy_dim;
        let adapters_in = (0..STEPS)
            .map(|k| Conv2d::new(store, rng, &format!("ctx.in{k}"), cphi + cy, dim, 1, 1, 1, Init::KaimingUniform))
            .collect();
        let blocks = (0..cfg.entropy_depth)
            .map(|i| ContextBlock {
                pw: Conv2d::new(store, rng, &format!("ctx.b{i}.pw"), dim, dim, 1, 1, 1, Init::KaimingUniform),
                dw: Conv2d::depthwise(store, rng, &format!("ctx.b{i}.dw"), dim),
            })
            .collect();
        let adapters_out = (0..STEPS)
            .map(|k| Conv2d::new(store, rng, &format!("ctx.out{k}"), dim, 2 * cy, 1, 1, 1, Init::Zeros))
            .collect();
        ContextModel {
            adapters_in,
            blocks,
            adapters_out,
            latent_channels: cy,
            feature_channels: cphi,
        }
    }

    /// `(μ, σ)` for step `k` (0-based) over the whole grid. Only positions of
    /// group `k` are meant to be read. `partial` holds decoded values of the
    /// earlier groups and 0 elsewhere.
    pub fn step<S: Real>(
        &self,
        g: &mut Graph<S>,
        p: &mut Binding<S>,
        k: usize,
        phi: Var,
        partial: Var,
    ) -> Result<EntropyParams> {
        if k >= STEPS {
            return Err(Error::Invalid(format!("context step {} outside 1..={STEPS}", k + 1)));
        }
        let input = g.concat(&[phi, partial])?;
        let mut h = self.adapters_in[k].forward(g, p, input)?;
        for b in &self.blocks {
            let t = b.pw.forward(g, p, h)?;
            let t = g.gelu(t)?;
            let t = b.dw.forward(g, p, t)?;
            h = g.add(h, t)?;
        }
        let out = self.adapters_out[k].forward(g, p, h)?;
        let cy = self.latent_channels;
        let mu = g.slice_channels(out, 0, cy)?;
        let s = g.slice_channels(out, cy, cy)?;
        let sigma = sigma_from_raw(g, s)?;
        Ok(EntropyParams { mu, sigma })
    }

    pub fn step_macs(&self, y_h: usize, y_w: usize) -> u64 {
        let trunk: u64 = self
            .blocks
            .iter()
            .map(|b| b.pw.macs(y_h, y_w).0 + b.dw.macs(y_h, y_w).0)
            .sum();
        self.adapters_in[0].macs(y_h, y_w).0 + trunk + self.adapters_out[0].macs(y_h, y_w).0
    }
}

/// `σ = exp(clamp(s, ln σ_min, ln σ_max))`.
pub fn sigma_from_raw<S: Real>(g: &mut Graph<S>, raw: Var) -> Result<Var> {
    let c = g.clamp(raw, SIGMA_MIN.ln(), SIGMA_MAX.ln())?;
    g.exp(c)
}

/// Learned per-channel discretized Gaussian prior over ẑ.
#[derive(Clone, Debug)]
pub struct ZPrior {
    pub mu: ParamId,
    pub log_sigma: ParamId,
    pub channels: usize,
}

impl ZPrior {
    pub fn new<S: Real>(store: &mut ParamStore<S>, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        ZPrior {
            mu: store.add("z_prior.mu", Tensor::zeros(shape)),
            log_sigma: store.add("z_prior.log_sigma", Tensor::zeros(shape)),
            channels,
        }
    }

    /// `(μ_c, σ_c)` as `1×C×1×1` nodes.
    pub fn params<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>) -> Result<(Var, Var)> {
        let mu = p.var(g, self.mu);
        let ls = p.var(g, self.log_sigma);
        Ok((mu, sigma_from_raw(g, ls)?))
    }

    /// Plain values for the coder.
    pub fn values(&self, store: &ParamStore<f32>) -> (Vec<f32>, Vec<f32>) {
        let lo = SIGMA_MIN.ln() as f32;
        let hi = SIGMA_MAX.ln() as f32;
        let mu = store.get(self.mu).data().to_vec();
        let sigma = store
            .get(self.log_sigma)
            .data()
            .iter()
            .map(|&s| libm::expf(s.max(lo).min(hi)))
            .collect();
        (mu, sigma)
    }
}

/// `ŷ = round_half_even(y − μ) + μ`.
pub fn quantize_shift<S: Real>(y: &Tensor<S>, mu: &Tensor<S>) -> Tensor<S> {
    y.zip_map(mu, |y, m| (y - m).round_half_even() + m)
}

/// Total code length in bits of `values` under `N(μ, σ)` unit bins.
pub fn rate_bits(values: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    values
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&v, &m), &s)| gaussian::bits(v - m, s.clamp(SIGMA_MIN, SIGMA_MAX)))
        .sum()
}

/// Code length of ẑ under per-channel prior parameters.
pub fn z_prior_bits(z_hat: &Tensor<f64>, mu_c: &[f64], sigma_c: &[f64]) -> f64 {
    let s = z_hat.shape();
    let mut total = 0.0;
    for n in 0..s.n() {
        for c in 0..s.c() {
            for h in 0..s.h() {
                for w in 0..s.w() {
                    let sig = sigma_c[c].clamp(SIGMA_MIN, SIGMA_MAX);
                    total += gaussian::bits(z_hat.at(n, c, h, w) - mu_c[c], sig);
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckInput};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadtree_small_grids() {
        let g = QuadtreeGroups::new(2, 2);
        assert_eq!(g.groups, [vec![(0, 0)], vec![(1, 1)], vec![(0, 1)], vec![(1, 0)]]);
        assert_eq!(QuadtreeGroups::new(3, 3).sizes(), [4, 1, 2, 2]);
        assert_eq!(QuadtreeGroups::new(1, 1).sizes(), [1, 0, 0, 0]);
    }

    #[test]
    fn quadtree_groups_partition_the_grid() {
        for h in 1..9 {
            for w in 1..9 {
                let q = QuadtreeGroups::new(h, w);
                let mut seen = vec![false; h * w];
                for (k, grp) in q.groups.iter().enumerate() {
                    for &(r, c) in grp {
                        assert!(!seen[r * w + c]);
                        seen[r * w + c] = true;
                        assert_eq!(QuadtreeGroups::step_of(r, c), k);
                    }
                }
                assert!(seen.iter().all(|&s| s));
                let sizes = q.sizes();
                let max = *sizes.iter().max().unwrap();
                let min = *sizes.iter().min().unwrap();
                // odd dimensions leave at most one extra row and column
                assert!(max - min <= h.div_ceil(2) + w.div_ceil(2));
            }
        }
    }

    #[test]
    fn quantize_shift_examples() {
        let t = |v: f64| Tensor::scalar(v);
        assert_eq!(quantize_shift(&t(0.2), &t(0.2)).item(), 0.2);
        assert_eq!(quantize_shift(&t(1.0), &t(0.25)).item(), 1.25);
        assert_eq!(quantize_shift(&t(0.75), &t(0.25)).item(), 0.25);
    }

    #[test]
    fn sigma_parameterization() {
        let mut g = Graph::<f64>::inference();
        let raw = g.constant(Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.0, -20.0, 20.0]).unwrap());
        let s = sigma_from_raw(&mut g, raw).unwrap();
        let v = g.value(s).data();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - SIGMA_MIN).abs() < 1e-12);
        assert!((v[2] - SIGMA_MAX).abs() < 1e-9);
    }

    #[test]
    fn context_step_index_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = ModelConfig::toy_se();
        let ctx = ContextModel::new(&mut store, &mut rng, &cfg);
        let mut g = Graph::inference();
        let mut p = Binding::frozen(&store);
        let phi = g.constant(Tensor::zeros(Shape::new(1, 32, 2, 2)));
        let part = g.constant(Tensor::zeros(Shape::new(1, 16, 2, 2)));
        assert!(ctx.step(&mut g, &mut p, 4, phi, part).is_err());
        assert!(ctx.step(&mut g, &mut p, 3, phi, part).is_ok());
    }

    #[test]
    fn z_prior_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let prior = ZPrior::new(&mut store, 3);
        store.get_mut(prior.mu).data_mut().copy_from_slice(&[0.1, -0.3, 0.7]);
        store.get_mut(prior.log_sigma).data_mut().copy_from_slice(&[0.2, -0.5, 0.9]);
        let z = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_| rng.gen_range(-2.0..2.0f64).round());
        let err = grad_check(&store, GradCheckInput::default(), |g, p| {
            let (mu, sigma) = prior.params(g, p)?;
            let zv = g.constant(z.clone());
            let shape = g.shape(zv);
            let mu_b = g.broadcast(mu, shape)?;
            let sig_b = g.broadcast(sigma, shape)?;
            let r = g.sub(zv, mu_b)?;
            let bits = g.gaussian_bits(r, sig_b)?;
            g.sum(bits)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn z_prior_sigma_is_clamped() {
        let mut store = ParamStore::<f32>::new();
        let prior = ZPrior::new(&mut store, 2);
        store.get_mut(prior.log_sigma).data_mut().copy_from_slice(&[-50.0, 50.0]);
        let (_, sigma) = prior.values(&store);
        assert!((sigma[0] as f64 - SIGMA_MIN).abs() < 1e-6);
        assert!((sigma[1] as f64 - SIGMA_MAX).abs() < 1e-3);
    }
}
