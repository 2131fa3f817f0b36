//! Dual-side feature distillation from a frozen moderate-encoder teacher
//! into a shallow-encoder student.

use crate::error::{Error, Result};
use crate::model::{CodecModel, Forward, RateProxy};
use crate::nn::{grads_of, Binding, Conv2d, Init};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::training::{
    stage_schedule, Dataset, LossHook, Optimizer, Stage, TrainConfig, TrainLog, Trainer, DISTORTION_SCALE,
};
use crate::transforms::ModelConfig;

/// Encoder-side features in order: `y`, `z`, `φ`, `ŷ`.
pub const ENC_FEATURES: [&str; 4] = ["y", "z", "phi", "y_hat"];

/// Channel counts of the distilled features of one architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureChannels {
    pub enc: [usize; 4],
    /// `l_T`, `l_res`, `l_0`, then one entry per denoiser block.
    pub dec: Vec<usize>,
}

impl FeatureChannels {
    pub fn of(cfg: &ModelConfig) -> Self {
        let c = cfg.decoder_latent_channels;
        let mut dec = vec![c, c, c];
        dec.extend(std::iter::repeat_n(cfg.denoiser_width, cfg.denoiser_depth));
        FeatureChannels {
            enc: [
                cfg.latent_channels,
                cfg.hyper_channels,
                cfg.hyper_feature_channels(),
                cfg.latent_channels,
            ],
            dec,
        }
    }
}

pub fn enc_features(f: &Forward) -> Vec<Var> {
    vec![f.y, f.z, f.phi, f.y_hat]
}

pub fn dec_features(f: &Forward) -> Vec<Var> {
    let mut v = vec![f.l_t, f.l_res, f.l_0];
    v.extend_from_slice(&f.block_features);
    v
}

/// One 1×1 conv per feature pair, student channels → teacher channels.
/// Identity-initialised when the counts match, zero otherwise.
#[derive(Clone, Debug)]
pub struct ProjectionSet {
    pub enc: Vec<Conv2d>,
    pub dec: Vec<Conv2d>,
}

fn projection<S: Real>(store: &mut ParamStore<S>, name: &str, from: usize, to: usize) -> Conv2d {
    let init = if from == to { Init::Identity } else { Init::Zeros };
    // the rng is never drawn from for these inits
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    Conv2d::new(store, &mut unused, name, from, to, 1, 1, 1, init)
}

impl ProjectionSet {
    pub fn new<S: Real>(store: &mut ParamStore<S>, student: &FeatureChannels, teacher: &FeatureChannels) -> Result<Self> {
        if student.dec.len() != teacher.dec.len() {
            return Err(Error::Config(format!(
                "student has {} decoder features, teacher {}",
                student.dec.len(),
                teacher.dec.len()
            )));
        }
        let enc = (0..4)
            .map(|i| projection(store, &format!("proj.{}", ENC_FEATURES[i]), student.enc[i], teacher.enc[i]))
            .collect();
        let dec = student
            .dec
            .iter()
            .zip(&teacher.dec)
            .enumerate()
            .map(|(i, (&s, &t))| projection(store, &format!("proj.dec{i}"), s, t))
            .collect();
        Ok(ProjectionSet { enc, dec })
    }

    pub fn for_models<S: Real>(store: &mut ParamStore<S>, student: &ModelConfig, teacher: &ModelConfig) -> Result<Self> {
        Self::new(store, &FeatureChannels::of(student), &FeatureChannels::of(teacher))
    }
}

/// `Σ_i MSE(teacher_i, f_i(student_i))`. Without projections every pair
/// must already agree in channel count.
pub fn feature_loss<S: Real>(
    g: &mut Graph<S>,
    p: &mut Binding<S>,
    teacher: &[Tensor<S>],
    student: &[Var],
    projections: Option<&[Conv2d]>,
) -> Result<Var> {
    if teacher.len() != student.len() || projections.is_some_and(|f| f.len() != student.len()) {
        return Err(Error::Invalid(format!(
            "{} teacher features, {} student features",
            teacher.len(),
            student.len()
        )));
    }
    if teacher.is_empty() {
        return Err(Error::Invalid("no features to distill".into()));
    }
    let mut terms = Vec::with_capacity(student.len());
    for (i, (t, &s)) in teacher.iter().zip(student).enumerate() {
        let ss = g.shape(s);
        let ts = t.shape();
        if (ss.n(), ss.h(), ss.w()) != (ts.n(), ts.h(), ts.w()) {
            return Err(Error::ShapeMismatch {
                op: "distill",
                lhs: ss,
                rhs: ts,
            });
        }
        let mapped = match projections {
            Some(f) => f[i].forward(g, p, s)?,
            None if ss.c() != ts.c() => {
                return Err(Error::Config(format!(
                    "feature {i}: student has {} channels, teacher {}; a projection is required",
                    ss.c(),
                    ts.c()
                )))
            }
            None => s,
        };
        let tv = g.constant(t.clone());
        terms.push(g.mse(tv, mapped)?);
    }
    g.add_all(&terms)
}

pub fn enc_distill_loss<S: Real>(
    g: &mut Graph<S>,
    p: &mut Binding<S>,
    teacher: &[Tensor<S>],
    student: &[Var],
    projections: Option<&[Conv2d]>,
) -> Result<Var> {
    if student.len() != ENC_FEATURES.len() {
        return Err(Error::Invalid(format!("expected 4 encoder features, got {}", student.len())));
    }
    feature_loss(g, p, teacher, student, projections)
}

pub fn dec_distill_loss<S: Real>(
    g: &mut Graph<S>,
    p: &mut Binding<S>,
    teacher: &[Tensor<S>],
    student: &[Var],
    projections: Option<&[Conv2d]>,
) -> Result<Var> {
    if student.len() < 3 {
        return Err(Error::Invalid(format!("expected l_T, l_res, l_0 and block features, got {}", student.len())));
    }
    feature_loss(g, p, teacher, student, projections)
}

/// Teacher features of one batch, computed without gradients.
pub struct TeacherFeatures {
    pub enc: Vec<Tensor<f32>>,
    pub dec: Vec<Tensor<f32>>,
}

pub fn teacher_features(teacher: &CodecModel, x: &Tensor<f32>) -> Result<TeacherFeatures> {
    let mut g = Graph::inference();
    let mut p = Binding::frozen(&teacher.store);
    let xv = g.constant(x.clone());
    let f = teacher.net.forward(&mut g, &mut p, xv, RateProxy::Hard)?;
    let grab = |vs: Vec<Var>| vs.into_iter().map(|v| g.value(v).clone()).collect();
    Ok(TeacherFeatures {
        enc: grab(enc_features(&f)),
        dec: grab(dec_features(&f)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistillVariant {
    Scratch,
    Enc,
    EncDec,
}

impl DistillVariant {
    pub const ALL: [DistillVariant; 3] = [DistillVariant::Scratch, DistillVariant::Enc, DistillVariant::EncDec];

    pub fn name(self) -> &'static str {
        match self {
            DistillVariant::Scratch => "SE-scratch",
            DistillVariant::Enc => "SE+L_enc",
            DistillVariant::EncDec => "SE+L_enc+L_dec",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub train: TrainConfig,
    pub beta_enc: f64,
    pub beta_dec: f64,
    pub use_enc: bool,
    pub use_dec: bool,
    /// Fraction of stage 1 after which the encoder term is dropped.
    pub enc_until: f64,
    /// Fraction of stage 2 after which the decoder term is dropped.
    pub dec_until: f64,
}

impl DistillConfig {
    pub fn new(train: TrainConfig, variant: DistillVariant) -> Self {
        DistillConfig {
            train,
            // same multiplier as every other non-rate term
            beta_enc: 0.5 * DISTORTION_SCALE,
            beta_dec: 0.001 * DISTORTION_SCALE,
            use_enc: variant != DistillVariant::Scratch,
            use_dec: variant == DistillVariant::EncDec,
            enc_until: 0.9,
            dec_until: 2.0 / 3.0,
        }
    }

    /// `(encoder term on, decoder term on)` at `step`.
    pub fn active(&self, step: usize) -> (bool, bool) {
        let t = &self.train;
        match stage_schedule(step, t).stage {
            Stage::S1 => (self.use_enc && (step as f64) < t.stage1_iters as f64 * self.enc_until, false),
            Stage::S2 => {
                let into = (step - t.stage1_iters) as f64;
                (false, self.use_dec && into < t.stage2_iters as f64 * self.dec_until)
            }
            Stage::S3 => (false, false),
        }
    }
}

struct DistillHook<'t> {
    teacher: &'t CodecModel,
    cfg: DistillConfig,
    projections: ProjectionSet,
    store: ParamStore<f32>,
    optimizer: Optimizer,
    bound: Vec<Option<Var>>,
}

impl LossHook for DistillHook<'_> {
    fn extra(&mut self, g: &mut Graph<f32>, x: &Tensor<f32>, fwd: &Forward, step: usize) -> Result<Option<Var>> {
        self.bound.clear();
        let (enc, dec) = self.cfg.active(step);
        if !enc && !dec {
            return Ok(None);
        }
        let t = teacher_features(self.teacher, x)?;
        let mut p = Binding::new(&self.store, true);
        let mut terms = Vec::with_capacity(2);
        if enc {
            let l = enc_distill_loss(g, &mut p, &t.enc, &enc_features(fwd), Some(&self.projections.enc))?;
            terms.push(g.scale(l, self.cfg.beta_enc)?);
        }
        if dec {
            let l = dec_distill_loss(g, &mut p, &t.dec, &dec_features(fwd), Some(&self.projections.dec))?;
            terms.push(g.scale(l, self.cfg.beta_dec)?);
        }
        self.bound = p.bound();
        Ok(Some(g.add_all(&terms)?))
    }

    fn after_backward(&mut self, g: &Graph<f32>, lr: f64) -> Result<()> {
        if self.bound.is_empty() {
            return Ok(());
        }
        let grads = grads_of(&self.bound, g);
        self.optimizer.step(&mut self.store, &grads, lr)?;
        Ok(())
    }
}

pub struct Distilled {
    pub model: CodecModel,
    pub projections: ProjectionSet,
    pub projection_store: ParamStore<f32>,
    pub log: TrainLog,
}

/// Train `student` under `cfg.train` with the distillation terms of `cfg`.
/// The teacher is only read.
pub fn distill_train(teacher: &CodecModel, student: CodecModel, data: &Dataset, cfg: &DistillConfig) -> Result<Distilled> {
    let (tr, sr) = (teacher.config.spatial_ratio, student.config.spatial_ratio);
    if tr != sr {
        return Err(Error::Config(format!(
            "teacher spatial ratio {tr} differs from student spatial ratio {sr}"
        )));
    }
    let mut store = ParamStore::new();
    let projections = ProjectionSet::for_models(&mut store, &student.config, &teacher.config)?;
    let optimizer = Optimizer::new(cfg.train.optimizer, cfg.train.clip_norm, &store);
    let mut hook = DistillHook {
        teacher,
        cfg: cfg.clone(),
        projections,
        store,
        optimizer,
        bound: Vec::new(),
    };
    let mut trainer = Trainer::new(student, cfg.train.clone())?;
    let total = cfg.train.total_iters();
    trainer.run_until(data, total, Some(&mut hook))?;
    Ok(Distilled {
        model: trainer.model,
        projections: hook.projections,
        projection_store: hook.store,
        log: trainer.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckInput};
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identical_features_with_identity_projections_cost_nothing() {
        let cfg = ModelConfig::toy_me();
        let mut store = ParamStore::<f64>::new();
        let proj = ProjectionSet::for_models(&mut store, &cfg, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats: Vec<Tensor<f64>> = FeatureChannels::of(&cfg)
            .enc
            .iter()
            .map(|&c| random(Shape::new(1, c, 2, 2), &mut rng))
            .collect();
        let mut g = Graph::inference();
        let mut p = Binding::frozen(&store);
        let student: Vec<Var> = feats.iter().map(|t| g.constant(t.clone())).collect();
        let l = enc_distill_loss(&mut g, &mut p, &feats, &student, Some(&proj.enc)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn zero_projection_costs_teacher_energy() {
        let mut store = ParamStore::<f64>::new();
        let s = FeatureChannels {
            enc: [3, 2, 4, 3],
            dec: vec![],
        };
        let t = FeatureChannels {
            enc: [5, 6, 7, 5],
            dec: vec![],
        };
        let proj = ProjectionSet::new(&mut store, &s, &t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let teacher: Vec<_> = t.enc.iter().map(|&c| random(Shape::new(1, c, 3, 3), &mut rng)).collect();
        let mut g = Graph::inference();
        let mut p = Binding::frozen(&store);
        let student: Vec<Var> = s
            .enc
            .iter()
            .map(|&c| g.constant(random(Shape::new(1, c, 3, 3), &mut rng)))
            .collect();
        let l = enc_distill_loss(&mut g, &mut p, &teacher, &student, Some(&proj.enc)).unwrap();
        let want: f64 = teacher
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>() / t.data().len() as f64)
            .sum();
        assert!((g.value(l).item() - want).abs() < 1e-12);
        // without projections the mismatch is a construction error
        assert!(matches!(
            enc_distill_loss(&mut g, &mut p, &teacher, &student, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn spatial_mismatch_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let ch = FeatureChannels {
            enc: [2, 2, 2, 2],
            dec: vec![],
        };
        let proj = ProjectionSet::new(&mut store, &ch, &ch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let teacher: Vec<_> = (0..4).map(|_| random(Shape::new(1, 2, 4, 4), &mut rng)).collect();
        let mut g = Graph::inference();
        let mut p = Binding::frozen(&store);
        let student: Vec<Var> = (0..4).map(|_| g.constant(random(Shape::new(1, 2, 2, 2), &mut rng))).collect();
        assert!(matches!(
            enc_distill_loss(&mut g, &mut p, &teacher, &student, Some(&proj.enc)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn decoder_term_count_and_gradients() {
        let s = FeatureChannels {
            enc: [1; 4],
            dec: vec![2, 2, 2, 3, 3],
        };
        let t = FeatureChannels {
            enc: [1; 4],
            dec: vec![3, 3, 3, 4, 4],
        };
        assert_eq!(FeatureChannels::of(&ModelConfig::toy_se()).dec.len(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let proj = ProjectionSet::new(&mut store, &s, &t).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let teacher: Vec<_> = t.dec.iter().map(|&c| random(Shape::new(1, c, 3, 3), &mut rng)).collect();
        let student: Vec<_> = s.dec.iter().map(|&c| random(Shape::new(1, c, 3, 3), &mut rng)).collect();
        let err = grad_check(&store, GradCheckInput::default(), |g, p| {
            let vs: Vec<Var> = student.iter().map(|t| g.leaf(t.clone(), true)).collect();
            dec_distill_loss(g, p, &teacher, &vs, Some(&proj.dec))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn schedule_drops_terms() {
        let train = TrainConfig {
            stage1_iters: 100,
            stage2_iters: 30,
            stage3_iters: 0,
            ..TrainConfig::default()
        };
        let cfg = DistillConfig::new(train, DistillVariant::EncDec);
        assert_eq!(cfg.active(0), (true, false));
        assert_eq!(cfg.active(89), (true, false));
        assert_eq!(cfg.active(90), (false, false));
        assert_eq!(cfg.active(100), (false, true));
        assert_eq!(cfg.active(119), (false, true));
        assert_eq!(cfg.active(120), (false, false));
        let scratch = DistillConfig::new(cfg.train.clone(), DistillVariant::Scratch);
        assert!((0..130).all(|s| scratch.active(s) == (false, false)));
    }

    #[test]
    fn teacher_is_untouched_and_ratios_must_match() {
        let teacher = CodecModel::build(&ModelConfig::toy_me()).unwrap();
        let before = teacher.save_bytes();
        let student = CodecModel::build(&ModelConfig::toy_se()).unwrap();
        let train = TrainConfig {
            stage1_iters: 2,
            stage2_iters: 2,
            stage3_iters: 0,
            patch_sizes: [32, 32, 64],
            ..TrainConfig::default()
        };
        let cfg = DistillConfig::new(train, DistillVariant::EncDec);
        let out = distill_train(&teacher, student.clone(), &Dataset::procedural(0), &cfg).unwrap();
        assert_eq!(teacher.save_bytes(), before);
        assert_eq!(out.log.rows.len(), 4);
        assert_ne!(out.model.save_bytes(), student.save_bytes());

        let other = CodecModel::build(&ModelConfig::toy_se().with_spatial_ratio(16).unwrap()).unwrap();
        assert!(matches!(
            distill_train(&teacher, other, &Dataset::procedural(0), &cfg),
            Err(Error::Config(_))
        ));
    }
}
