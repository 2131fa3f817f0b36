//! Rate–distortion training with the two-stage bitrate schedule and an
//! optional high-resolution finetuning stage.

pub mod dataset;
pub mod optim;

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use dataset::{Dataset, TextureGenerator};
pub use optim::{grad_norm, Optimizer, OptimizerKind};

use crate::error::{Error, Result};
use crate::model::{CodecModel, Forward, RateProxy};
use crate::nn::{grads_of, Binding};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

/// Weights of the distortion terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gammas {
    /// Pixel MSE.
    pub pixel: f64,
    /// MSE between Sobel responses.
    pub edge: f64,
    /// Reserved for a semantic term; no such term is computed.
    pub semantic: f64,
}

impl Gammas {
    /// Pixel/edge weights 2:1 with the semantic term off.
    pub const BASE: Gammas = Gammas {
        pixel: 2.0,
        edge: 1.0,
        semantic: 0.0,
    };

    pub fn scaled(self, k: f64) -> Gammas {
        Gammas {
            pixel: self.pixel * k,
            edge: self.edge * k,
            semantic: self.semantic * k,
        }
    }
}

/// Multiplier on [`Gammas::BASE`] used for training. MSE on `[0, 1]` pixels
/// is small next to a rate in bits per pixel; unscaled, every λ in `[1, 16]`
/// drives the model to transmit nothing.
pub const DISTORTION_SCALE: f64 = 30.0;

impl Default for Gammas {
    fn default() -> Self {
        Gammas::BASE.scaled(DISTORTION_SCALE)
    }
}

/// Horizontal and vertical Sobel responses of every channel, normalised by
/// 1/8 so a unit ramp gives a unit response. Valid convolution, so constants
/// map to exactly zero.
pub fn sobel<S: Real>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    const KX: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    const KY: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let c = g.shape(x).c();
    let w = Tensor::from_fn(Shape::new(2 * c, 1, 3, 3), |[o, _, i, j]| {
        S::from_f64(if o % 2 == 0 { KX[i * 3 + j] } else { KY[i * 3 + j] } / 8.0)
    });
    let w = g.constant(w);
    g.conv2d(x, w, None, 1, 0, c)
}

/// `γ1·MSE(x, x̂) + γ2·MSE(sobel(x), sobel(x̂))`.
pub fn distortion<S: Real>(g: &mut Graph<S>, x: Var, x_hat: Var, gammas: Gammas) -> Result<Var> {
    let pixel = g.mse(x, x_hat)?;
    let mut total = g.scale(pixel, gammas.pixel)?;
    if gammas.edge != 0.0 {
        let (ex, eh) = (sobel(g, x)?, sobel(g, x_hat)?);
        let edge = g.mse(ex, eh)?;
        let edge = g.scale(edge, gammas.edge)?;
        total = g.add(total, edge)?;
    }
    Ok(total)
}

/// `λ·bits/num_pixels + D`.
pub fn rd_loss<S: Real>(g: &mut Graph<S>, distortion: Var, bits: Var, lambda: f64, num_pixels: usize) -> Result<Var> {
    let rate = g.scale(bits, lambda / num_pixels as f64)?;
    g.add(rate, distortion)
}

/// Scalar form of [`rd_loss`] on a measured rate.
pub fn rd_value(bpp: f64, distortion: f64, lambda: f64) -> f64 {
    lambda * bpp + distortion
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    S1 = 1,
    S2 = 2,
    S3 = 3,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_s1: f64,
    pub lambda_s2: f64,
    pub lambda_s3: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage3_iters: usize,
    pub gammas: Gammas,
    /// `(first step, learning rate)` pairs, sorted by step.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Patch size for stages 1, 2 and 3.
    pub patch_sizes: [usize; 3],
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_s1: 1.0,
            lambda_s2: 16.0,
            lambda_s3: 16.0,
            stage1_iters: 3000,
            stage2_iters: 1000,
            stage3_iters: 300,
            gammas: Gammas::default(),
            lr_schedule: vec![(0, 2.5e-4)],
            patch_sizes: [64, 64, 128],
            batch_size: 1,
            seed: 0,
            optimizer: OptimizerKind::adam(),
            clip_norm: Some(1.0),
        }
    }
}

/// One point of the schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulePoint {
    pub lambda: f64,
    pub stage: Stage,
    pub patch_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_s1 >= self.lambda_s2 {
            return Err(Error::Config(format!(
                "stage-1 lambda ({}) must be below stage-2 lambda ({})",
                self.lambda_s1, self.lambda_s2
            )));
        }
        if self.lambda_s1 < 0.0 || self.lambda_s3 < 0.0 {
            return Err(Error::Config("lambdas must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_schedule.first().map(|p| p.0) != Some(0) {
            return Err(Error::Config("learning-rate schedule must start at step 0".into()));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("learning-rate schedule steps must increase".into()));
        }
        if self.patch_sizes.contains(&0) {
            return Err(Error::Config("patch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters + self.stage3_iters
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|p| p.0 <= step)
            .last()
            .map_or(0.0, |p| p.1)
    }
}

/// `(λ, stage, patch size)` in effect at `step`.
pub fn stage_schedule(step: usize, cfg: &TrainConfig) -> SchedulePoint {
    let (lambda, stage) = if step < cfg.stage1_iters {
        (cfg.lambda_s1, Stage::S1)
    } else if step < cfg.stage1_iters + cfg.stage2_iters || cfg.stage3_iters == 0 {
        (cfg.lambda_s2, Stage::S2)
    } else {
        (cfg.lambda_s3, Stage::S3)
    };
    SchedulePoint {
        lambda,
        stage,
        patch_size: cfg.patch_sizes[stage as usize - 1],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: Stage,
    pub lambda: f64,
    pub bpp: f64,
    pub distortion: f64,
    pub loss: f64,
    pub variance: f64,
}

/// Append-only per-iteration record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,stage,lambda,bpp,distortion,loss,variance";

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Invalid(format!("log step {} after {}", row.step, last.step)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.step, r.stage, r.lambda, r.bpp, r.distortion, r.loss, r.variance
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ascii output")
    }

    /// Trailing moving average of a column, one value per row.
    pub fn moving_average(&self, window: usize, col: impl Fn(&LogRow) -> f64) -> Vec<f64> {
        let values: Vec<f64> = self.rows.iter().map(col).collect();
        let mut out = Vec::with_capacity(values.len());
        let mut sum = 0.0;
        for i in 0..values.len() {
            sum += values[i];
            if i >= window {
                sum -= values[i - window];
            }
            out.push(sum / (i + 1).min(window) as f64);
        }
        out
    }
}

/// Scalars of one training step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub bpp: f64,
    pub distortion: f64,
    pub variance: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Extra loss terms added on top of the rate–distortion objective, e.g. by
/// distillation. Gets the model forward of the current batch.
pub trait LossHook {
    fn extra(&mut self, g: &mut Graph<f32>, x: &Tensor<f32>, fwd: &Forward, step: usize) -> Result<Option<Var>>;

    /// Called after the model update with the graph of the step.
    fn after_backward(&mut self, _g: &Graph<f32>, _lr: f64) -> Result<()> {
        Ok(())
    }
}

/// Loop state: model, optimizer, RNG and log. Cloning forks a run.
#[derive(Clone)]
pub struct Trainer {
    pub model: CodecModel,
    pub cfg: TrainConfig,
    pub optimizer: Optimizer,
    pub log: TrainLog,
    pub step: usize,
    rng: ChaCha8Rng,
    /// When set, a checkpoint is written at the end of each stage.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: CodecModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.clip_norm, &model.store);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
        Ok(Trainer {
            model,
            cfg,
            optimizer,
            log: TrainLog::default(),
            step: 0,
            rng,
            checkpoint_dir: None,
        })
    }

    /// One optimisation step on `x` at rate weight `lambda`.
    pub fn train_step(&mut self, x: &Tensor<f32>, lambda: f64, mut hook: Option<&mut (dyn LossHook + '_)>) -> Result<StepStats> {
        let lr = self.cfg.learning_rate(self.step);
        let mut g = Graph::new();
        let mut p = Binding::new(&self.model.store, true);
        let xv = g.constant(x.clone());
        let fwd = self.model.net.forward(&mut g, &mut p, xv, RateProxy::Noise(&mut self.rng))?;
        let d = distortion(&mut g, xv, fwd.x_hat, self.cfg.gammas)?;
        let bits = fwd.bits(&mut g)?;
        let s = x.shape();
        let pixels = s.n() * s.h() * s.w();
        let mut loss = rd_loss(&mut g, d, bits, lambda, pixels)?;
        if let Some(h) = hook.as_deref_mut() {
            if let Some(extra) = h.extra(&mut g, x, &fwd, self.step)? {
                loss = g.add(loss, extra)?;
            }
        }
        let mut stats = StepStats {
            grad_norm: 0.0,
            loss: g.value(loss).item() as f64,
            bpp: g.value(bits).item() as f64 / pixels as f64,
            distortion: g.value(d).item() as f64,
            variance: g.value(fwd.y).mean_channel_variance(),
        };
        let bound = p.bound();
        if !stats.loss.is_finite() {
            return Err(self.diverged("loss is not finite"));
        }
        g.backward(loss)?;
        if let Some(h) = hook {
            h.after_backward(&g, lr)?;
        }
        let grads = grads_of(&bound, &g);
        drop(g);
        match self.optimizer.step(&mut self.model.store, &grads, lr) {
            Ok(norm) => stats.grad_norm = norm,
            Err(e) => return Err(self.diverged(&e.to_string())),
        }
        Ok(stats)
    }

    fn diverged(&self, detail: &str) -> Error {
        let last = self
            .log
            .rows
            .last()
            .map(|r| {
                format!(
                    "; last finite row: step {} stage {} bpp {:.5} distortion {:.5} loss {:.5}",
                    r.step, r.stage, r.bpp, r.distortion, r.loss
                )
            })
            .unwrap_or_default();
        Error::Diverged {
            step: self.step,
            detail: format!("{detail}{last}"),
        }
    }

    /// Run the schedule from the current step to `until` (exclusive).
    pub fn run_until(&mut self, data: &Dataset, until: usize, mut hook: Option<&mut dyn LossHook>) -> Result<()> {
        let until = until.min(self.cfg.total_iters());
        while self.step < until {
            let point = stage_schedule(self.step, &self.cfg);
            let bs = self.cfg.batch_size;
            let x = data.batch((self.step * bs) as u64, bs, point.patch_size)?;
            let stats = self.train_step(&x, point.lambda, hook.as_deref_mut())?;
            self.log.push(LogRow {
                step: self.step,
                stage: point.stage,
                lambda: point.lambda,
                bpp: stats.bpp,
                distortion: stats.distortion,
                loss: stats.loss,
                variance: stats.variance,
            })?;
            self.step += 1;
            let next = stage_schedule(self.step, &self.cfg).stage;
            if next != point.stage || self.step == self.cfg.total_iters() {
                self.write_checkpoint(point.stage)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self, data: &Dataset) -> Result<()> {
        self.run_until(data, self.cfg.total_iters(), None)
    }

    fn write_checkpoint(&self, stage: Stage) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let f = std::fs::File::create(dir.join(format!("stage{stage}.ckpt")))?;
            self.model.save(std::io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

/// Train `model` on `data` under `cfg`.
pub fn train_loop(model: CodecModel, data: &Dataset, cfg: &TrainConfig) -> Result<(CodecModel, TrainLog)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run(data)?;
    Ok((t.model, t.log))
}

/// Continue training at the stage-3 patch size and λ for `stage3_iters`.
pub fn hrf_stage(model: CodecModel, data: &Dataset, cfg: &TrainConfig) -> Result<CodecModel> {
    if cfg.stage3_iters == 0 {
        return Ok(model);
    }
    let hrf = TrainConfig {
        stage1_iters: 0,
        stage2_iters: 0,
        lambda_s1: 0.0,
        lambda_s2: f64::MIN_POSITIVE,
        ..cfg.clone()
    };
    let mut t = Trainer::new(model, hrf)?;
    t.run(data)?;
    Ok(t.model)
}

/// Mean of `(bpp, distortion, rd_loss)` with hard quantization over
/// `images`, using the training-time rate estimate.
pub fn evaluate(model: &CodecModel, images: &[Tensor<f32>], lambda: f64, gammas: Gammas) -> Result<(f64, f64, f64)> {
    if images.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let (mut bpp, mut dist) = (0.0, 0.0);
    for x in images {
        let mut g = Graph::inference();
        let mut p = Binding::frozen(&model.store);
        let xv = g.constant(x.clone());
        let fwd = model.net.forward(&mut g, &mut p, xv, RateProxy::Hard)?;
        let d = distortion(&mut g, xv, fwd.x_hat, gammas)?;
        let bits = fwd.bits(&mut g)?;
        let s = x.shape();
        bpp += g.value(bits).item() as f64 / (s.n() * s.h() * s.w()) as f64;
        dist += g.value(d).item() as f64;
    }
    let n = images.len() as f64;
    let (bpp, dist) = (bpp / n, dist / n);
    Ok((bpp, dist, rd_value(bpp, dist, lambda)))
}
