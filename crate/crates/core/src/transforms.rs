//! Analysis transform (image → y) and synthesis transform (ŷ → l_T, l_res),
//! plus the architecture configuration shared by the whole model.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, Init, StarBlock, UpConv};
use crate::tensor::{Graph, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Moderate encoder (teacher).
    Me,
    /// Shallow encoder (student).
    Se,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Me => "ME",
            Variant::Se => "SE",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ME" => Ok(Variant::Me),
            "SE" => Ok(Variant::Se),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Full architecture description. Encoder-side fields differ between the
/// ME and SE variants; decoder-side fields are shared.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub spatial_ratio: usize,
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub entropy_depth: usize,
    pub entropy_dim: usize,
    pub decoder_latent_channels: usize,
    pub denoiser_width: usize,
    pub denoiser_depth: usize,
    pub alpha_bar_t: f64,
    pub pixel_width: usize,
    pub lite_decoder: bool,
    pub seed: u64,
}

/// Hidden width of the synthesis upsampling stack.
pub const SYNTHESIS_WIDTH: usize = 32;

impl ModelConfig {
    /// Moderate encoder at toy width (widths are the full-size ones ÷ 8).
    pub fn toy_me() -> Self {
        ModelConfig {
            variant: Variant::Me,
            spatial_ratio: 32,
            stage_depths: vec![2; 5],
            stage_dims: vec![8, 16, 24, 32, 40],
            latent_channels: 16,
            hyper_channels: 8,
            entropy_depth: 4,
            entropy_dim: 120,
            decoder_latent_channels: 8,
            denoiser_width: 32,
            denoiser_depth: 4,
            alpha_bar_t: 0.25,
            pixel_width: 16,
            lite_decoder: true,
            seed: 0,
        }
    }

    /// Shallow encoder at toy width.
    pub fn toy_se() -> Self {
        ModelConfig {
            variant: Variant::Se,
            stage_depths: vec![1; 5],
            stage_dims: vec![4, 8, 16, 24, 32],
            entropy_depth: 3,
            entropy_dim: 64,
            ..Self::toy_me()
        }
    }

    pub fn preset(variant: Variant) -> Self {
        match variant {
            Variant::Me => Self::toy_me(),
            Variant::Se => Self::toy_se(),
        }
    }

    /// Same variant at another spatial compression ratio. Stages are
    /// dropped from the end, or a wider stage appended.
    pub fn with_spatial_ratio(mut self, ratio: usize) -> Result<Self> {
        let stages = stages_for_ratio(ratio)?;
        while self.stage_dims.len() > stages {
            self.stage_dims.pop();
            self.stage_depths.pop();
        }
        while self.stage_dims.len() < stages {
            let last = *self.stage_dims.last().unwrap_or(&8);
            self.stage_dims.push(last + 8);
            let d = *self.stage_depths.last().unwrap_or(&1);
            self.stage_depths.push(d);
        }
        self.spatial_ratio = ratio;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let stages = stages_for_ratio(self.spatial_ratio)?;
        if self.stage_dims.len() != stages || self.stage_depths.len() != stages {
            return Err(Error::Config(format!(
                "spatial ratio {} needs {stages} stages, got {} dims / {} depths",
                self.spatial_ratio,
                self.stage_dims.len(),
                self.stage_depths.len()
            )));
        }
        let positive = [
            ("latent_channels", self.latent_channels),
            ("hyper_channels", self.hyper_channels),
            ("entropy_dim", self.entropy_dim),
            ("decoder_latent_channels", self.decoder_latent_channels),
            ("denoiser_width", self.denoiser_width),
            ("pixel_width", self.pixel_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.stage_dims.contains(&0) {
            return Err(Error::Config("stage dims must be positive".into()));
        }
        if self.lite_decoder && self.pixel_width < 2 {
            return Err(Error::Config("lite decoder needs pixel_width ≥ 2".into()));
        }
        if !(self.alpha_bar_t > 0.0 && self.alpha_bar_t < 1.0) {
            return Err(Error::Config(format!("alpha_bar_t must lie in (0,1), got {}", self.alpha_bar_t)));
        }
        Ok(())
    }

    /// Upsampling factor of the synthesis transform (latent grid → l grid).
    pub fn synthesis_upsample(&self) -> usize {
        self.spatial_ratio / 4
    }

    /// Hyper-decoder output channels (φ).
    pub fn hyper_feature_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn effective_pixel_width(&self) -> usize {
        if self.lite_decoder {
            self.pixel_width / 2
        } else {
            self.pixel_width
        }
    }

    /// Canonical `key=value` text. The seed line is included; the
    /// architecture id ignores it.
    pub fn to_text(&self) -> String {
        let mut s = self.architecture_text();
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    fn architecture_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.variant.as_str());
        let _ = writeln!(s, "spatial_ratio={}", self.spatial_ratio);
        let _ = writeln!(s, "stage_depths={}", list(&self.stage_depths));
        let _ = writeln!(s, "stage_dims={}", list(&self.stage_dims));
        let _ = writeln!(s, "latent_channels={}", self.latent_channels);
        let _ = writeln!(s, "hyper_channels={}", self.hyper_channels);
        let _ = writeln!(s, "entropy_depth={}", self.entropy_depth);
        let _ = writeln!(s, "entropy_dim={}", self.entropy_dim);
        let _ = writeln!(s, "decoder_latent_channels={}", self.decoder_latent_channels);
        let _ = writeln!(s, "denoiser_width={}", self.denoiser_width);
        let _ = writeln!(s, "denoiser_depth={}", self.denoiser_depth);
        let _ = writeln!(s, "alpha_bar_t={}", self.alpha_bar_t);
        let _ = writeln!(s, "pixel_width={}", self.pixel_width);
        let _ = writeln!(s, "lite_decoder={}", self.lite_decoder);
        s
    }

    /// Parse `key=value` lines. Missing keys fall back to the preset of the
    /// given variant (ME when absent); `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            pairs.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        let variant = match pairs.iter().find(|(k, _)| k == "variant") {
            Some((_, v)) => v.parse()?,
            None => Variant::Me,
        };
        let mut cfg = ModelConfig::preset(variant);
        let mut ratio = None;
        for (k, v) in &pairs {
            let int = || v.parse::<usize>().map_err(|_| Error::Config(format!("{k}: not an integer: {v}")));
            let list = || -> Result<Vec<usize>> {
                v.split(',')
                    .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("{k}: bad list {v}"))))
                    .collect()
            };
            match k.as_str() {
                "variant" => {}
                "spatial_ratio" => ratio = Some(int()?),
                "stage_depths" => cfg.stage_depths = list()?,
                "stage_dims" => cfg.stage_dims = list()?,
                "latent_channels" => cfg.latent_channels = int()?,
                "hyper_channels" => cfg.hyper_channels = int()?,
                "entropy_depth" => cfg.entropy_depth = int()?,
                "entropy_dim" => cfg.entropy_dim = int()?,
                "decoder_latent_channels" => cfg.decoder_latent_channels = int()?,
                "denoiser_width" => cfg.denoiser_width = int()?,
                "denoiser_depth" => cfg.denoiser_depth = int()?,
                "pixel_width" => cfg.pixel_width = int()?,
                "alpha_bar_t" => {
                    cfg.alpha_bar_t = v.parse().map_err(|_| Error::Config(format!("alpha_bar_t: {v}")))?
                }
                "lite_decoder" => {
                    cfg.lite_decoder = v.parse().map_err(|_| Error::Config(format!("lite_decoder: {v}")))?
                }
                "seed" => cfg.seed = v.parse().map_err(|_| Error::Config(format!("seed: {v}")))?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        if let Some(r) = ratio {
            cfg.spatial_ratio = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// One-byte architecture identifier carried in bitstreams and
    /// checkpoints (FNV-1a of the canonical text, folded).
    pub fn config_id(&self) -> u8 {
        let mut h: u32 = 0x811c_9dc5;
        for b in self.architecture_text().bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
        (h ^ (h >> 8) ^ (h >> 16) ^ (h >> 24)) as u8
    }
}

/// `true` when every encoder-side depth and width of `a` exceeds `b`'s.
pub fn strictly_dominates(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.stage_depths.len() == b.stage_depths.len()
        && a.stage_depths.iter().zip(&b.stage_depths).all(|(x, y)| x > y)
        && a.stage_dims.iter().zip(&b.stage_dims).all(|(x, y)| x > y)
        && a.entropy_depth > b.entropy_depth
        && a.entropy_dim > b.entropy_dim
}

fn stages_for_ratio(ratio: usize) -> Result<usize> {
    match ratio {
        16 => Ok(4),
        32 => Ok(5),
        64 => Ok(6),
        r => Err(Error::Config(format!("spatial ratio must be 16, 32 or 64, got {r}"))),
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub down: Conv2d,
    pub blocks: Vec<StarBlock>,
}

/// Pixel-space StarBlock encoder `g_a`.
/// Gain on the initial latent projection. With plain fan-in scaling nearly
/// every latent rounds to zero at initialisation and no gradient reaches the
/// decoder.
pub const LATENT_INIT_GAIN: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct AnalysisTransform {
    pub stages: Vec<EncoderStage>,
    pub head: Conv2d,
    pub ratio: usize,
}

impl AnalysisTransform {
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, (&dim, &depth)) in cfg.stage_dims.iter().zip(&cfg.stage_depths).enumerate() {
            let down = Conv2d::new(store, rng, &format!("g_a.s{i}.down"), cin, dim, 3, 2, 1, Init::KaimingUniform);
            let blocks = (0..depth)
                .map(|j| StarBlock::new(store, rng, &format!("g_a.s{i}.b{j}"), dim))
                .collect();
            stages.push(EncoderStage { down, blocks });
            cin = dim;
        }
        let head = Conv2d::new(store, rng, "g_a.head", cin, cfg.latent_channels, 1, 1, 1, Init::Scaled(LATENT_INIT_GAIN));
        AnalysisTransform {
            stages,
            head,
            ratio: cfg.spatial_ratio,
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if !s.h().is_multiple_of(self.ratio) || !s.w().is_multiple_of(self.ratio) || s.h() == 0 || s.w() == 0 {
            return Err(Error::NotPadded {
                height: s.h(),
                width: s.w(),
                ratio: self.ratio,
            });
        }
        if s.c() != 3 {
            return Err(Error::Shape(format!("analysis transform expects RGB input, got {s}")));
        }
        let mut h = g.add_scalar(x, -0.5)?;
        for stage in &self.stages {
            h = stage.down.forward(g, p, h)?;
            for b in &stage.blocks {
                h = b.forward(g, p, h)?;
            }
        }
        self.head.forward(g, p, h)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (mut h, mut w) = (h, w);
        let mut total = 0;
        for stage in &self.stages {
            let (m, oh, ow) = stage.down.macs(h, w);
            total += m;
            h = oh;
            w = ow;
            total += stage.blocks.iter().map(|b| b.macs(h, w)).sum::<u64>();
        }
        total + self.head.macs(h, w).0
    }
}

/// Synthesis transform `g_s`: ŷ → shared latent of `2·C_l` channels, split
/// into `l_T` (first half) and `l_res` (second half).
#[derive(Clone, Debug)]
pub struct SynthesisTransform {
    pub head: Conv2d,
    pub ups: Vec<UpConv>,
    pub tail: Conv2d,
    pub latent_channels: usize,
    pub split_channels: usize,
}

impl SynthesisTransform {
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let w = SYNTHESIS_WIDTH;
        let head = Conv2d::new(store, rng, "g_s.head", cfg.latent_channels, w, 3, 1, 1, Init::KaimingUniform);
        let n_up = cfg.synthesis_upsample().trailing_zeros() as usize;
        let ups = (0..n_up).map(|i| UpConv::new(store, rng, &format!("g_s.up{i}"), w, w)).collect();
        let tail = Conv2d::new(store, rng, "g_s.tail", w, 2 * cfg.decoder_latent_channels, 3, 1, 1, Init::KaimingUniform);
        SynthesisTransform {
            head,
            ups,
            tail,
            latent_channels: cfg.latent_channels,
            split_channels: cfg.decoder_latent_channels,
        }
    }

    /// Shared output before the split.
    pub fn forward_shared<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, y_hat: Var) -> Result<Var> {
        let s = g.shape(y_hat);
        if s.c() != self.latent_channels {
            return Err(Error::Shape(format!(
                "synthesis transform expects {} latent channels, got {s}",
                self.latent_channels
            )));
        }
        let mut h = self.head.forward(g, p, y_hat)?;
        h = g.gelu(h)?;
        for up in &self.ups {
            h = up.forward(g, p, h)?;
            h = g.gelu(h)?;
        }
        self.tail.forward(g, p, h)
    }

    /// Returns `(l_T, l_res)`.
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &mut Binding<S>, y_hat: Var) -> Result<(Var, Var)> {
        let shared = self.forward_shared(g, p, y_hat)?;
        split_latent(g, shared, self.split_channels)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (mut total, mut h, mut w) = self.head.macs(h, w);
        for up in &self.ups {
            let (m, oh, ow) = up.macs(h, w);
            total += m;
            h = oh;
            w = ow;
        }
        total + self.tail.macs(h, w).0
    }
}

/// Channel-contiguous halves: `[0, c)` and `[c, 2c)`.
pub fn split_latent<S: Real>(g: &mut Graph<S>, shared: Var, c: usize) -> Result<(Var, Var)> {
    let s = g.shape(shared);
    if s.c() != 2 * c {
        return Err(Error::Shape(format!("cannot split {s} into two halves of {c} channels")));
    }
    Ok((g.slice_channels(shared, 0, c)?, g.slice_channels(shared, c, c)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn presets_are_valid_and_me_dominates_se() {
        let me = ModelConfig::toy_me();
        let se = ModelConfig::toy_se();
        me.validate().unwrap();
        se.validate().unwrap();
        assert!(strictly_dominates(&me, &se));
        assert!(!strictly_dominates(&se, &me));
    }

    #[test]
    fn stage_count_follows_ratio() {
        let r64 = ModelConfig::toy_me().with_spatial_ratio(64).unwrap();
        let r16 = ModelConfig::toy_me().with_spatial_ratio(16).unwrap();
        assert_eq!(r64.stage_dims.len(), 6);
        assert_eq!(r16.stage_dims.len(), 4);
        assert!(ModelConfig::toy_me().with_spatial_ratio(8).is_err());
        let mut bad = ModelConfig::toy_me();
        bad.stage_depths.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = ModelConfig::toy_se();
        cfg.seed = 42;
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_id(), cfg.config_id());
        assert_ne!(ModelConfig::toy_me().config_id(), cfg.config_id());
        assert!(ModelConfig::from_text("bogus=1").is_err());
        assert!(ModelConfig::from_text("spatial_ratio=32\nstage_dims=1,2").is_err());
    }

    #[test]
    fn split_is_channel_contiguous() {
        let mut g = Graph::<f32>::inference();
        let t = Tensor::from_fn(Shape::new(1, 16, 2, 2), |[_, c, _, _]| c as f32);
        let v = g.constant(t);
        let (a, b) = split_latent(&mut g, v, 8).unwrap();
        assert!(g.value(a).data().chunks(4).enumerate().all(|(c, ch)| ch.iter().all(|&x| x == c as f32)));
        assert!(g.value(b).data().chunks(4).enumerate().all(|(c, ch)| ch.iter().all(|&x| x == (c + 8) as f32)));
    }
}
