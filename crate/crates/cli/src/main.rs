use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use aeic::analysis::{self, RdModel};
use aeic::codec::{decode_image, encode_image, Bitstream};
use aeic::distill::{distill_train, DistillConfig, DistillVariant};
use aeic::image::{read_ppm, read_ppm_dir, write_ppm};
use aeic::model::CodecModel;
use aeic::training::{Dataset, Gammas, TextureGenerator, TrainConfig, Trainer};
use aeic::transforms::{ModelConfig, Variant};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aeic", version, about = "Asymmetric extreme image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistillMode {
    Scratch,
    Enc,
    EncDec,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with the two-stage λ schedule.
    Train {
        /// Preset name (`me`, `se`) or a key=value config file.
        #[arg(long, default_value = "se")]
        config: String,
        /// Stage-2 (and stage-3) λ.
        #[arg(long, default_value_t = 16.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_s1: f64,
        /// Stage-1 iterations.
        #[arg(long, default_value_t = 3000)]
        iters: usize,
        #[arg(long, default_value_t = 1000)]
        stage2_iters: usize,
        #[arg(long, default_value_t = 0)]
        stage3_iters: usize,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra PPM images mixed into the procedural patches.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Output checkpoint; the config is written next to it as `.cfg`.
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a shallow-encoder student against a frozen teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        teacher_config: Option<String>,
        #[arg(long, default_value = "se")]
        config: String,
        #[arg(long, value_enum, default_value_t = DistillMode::EncDec)]
        variant: DistillMode,
        #[arg(long, default_value_t = 16.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 500)]
        stage2_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compress a PPM image.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        input: PathBuf,
        /// λ tag stored in the header.
        #[arg(long, default_value_t = 16.0)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompress a bitstream to PPM.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Code a corpus with several models and write `<out>.csv` and `<out>.svg`.
    RdCurve {
        /// Checkpoints; each reads its config from `<model>.cfg` unless --config is given.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        /// One λ per model, in the same order.
        #[arg(long, required = true)]
        lambda: Vec<f64>,
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean latent variance against coded bpp, one CSV row per model.
    VarianceReport {
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, required = true)]
        lambda: Vec<f64>,
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic MACs per pixel of each component.
    Macs {
        #[arg(long, default_value = "se")]
        config: String,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median encode/decode latency as JSON.
    Bench {
        /// Checkpoint; a freshly initialised model is timed when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write procedural texture patches as PPM files.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_config(name: &str) -> Result<ModelConfig> {
    match name {
        "me" => Ok(ModelConfig::preset(Variant::Me)),
        "se" => Ok(ModelConfig::preset(Variant::Se)),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
            Ok(ModelConfig::from_text(&text)?)
        }
    }
}

fn config_path(model: &Path) -> PathBuf {
    model.with_extension("cfg")
}

fn load_model(path: &Path, config: Option<&str>) -> Result<CodecModel> {
    let cfg = match config {
        Some(c) => parse_config(c)?,
        None => {
            let p = config_path(path);
            let text = fs::read_to_string(&p)
                .with_context(|| format!("no --config given and {} is unreadable", p.display()))?;
            ModelConfig::from_text(&text)?
        }
    };
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(CodecModel::load(&cfg, std::io::BufReader::new(f))?)
}

fn save_model(model: &CodecModel, out: &Path) -> Result<()> {
    let f = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    model.save(BufWriter::new(f))?;
    fs::write(config_path(out), model.config.to_text())?;
    Ok(())
}

fn dataset(seed: u64, images: Option<&Path>) -> Result<Dataset> {
    let extra = match images {
        Some(dir) => read_ppm_dir(dir)?.into_iter().map(|(_, t)| t).collect(),
        None => Vec::new(),
    };
    Ok(Dataset::procedural(seed).with_images(extra))
}

fn corpus(dir: &Path) -> Result<Vec<aeic::tensor::Tensor<f32>>> {
    let images: Vec<_> = read_ppm_dir(dir)?.into_iter().map(|(_, t)| t).collect();
    if images.is_empty() {
        bail!("no .ppm files in {}", dir.display());
    }
    Ok(images)
}

fn load_models(paths: &[PathBuf], lambdas: &[f64], config: Option<&str>) -> Result<Vec<(String, f64, CodecModel)>> {
    if paths.len() != lambdas.len() {
        bail!("{} models but {} lambdas", paths.len(), lambdas.len());
    }
    paths
        .iter()
        .zip(lambdas)
        .map(|(p, &l)| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, l, load_model(p, config)?))
        })
        .collect()
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            lambda,
            lambda_s1,
            iters,
            stage2_iters,
            stage3_iters,
            batch_size,
            patch,
            seed,
            images,
            out,
            log,
        } => {
            let mcfg = ModelConfig {
                seed,
                ..parse_config(&config)?
            };
            let tcfg = TrainConfig {
                lambda_s1,
                lambda_s2: lambda,
                lambda_s3: lambda,
                stage1_iters: iters,
                stage2_iters,
                stage3_iters,
                batch_size,
                patch_sizes: [patch, patch, 2 * patch],
                seed,
                ..TrainConfig::default()
            };
            let data = dataset(seed, images.as_deref())?;
            let mut trainer = Trainer::new(CodecModel::build(&mcfg)?, tcfg)?;
            trainer.checkpoint_dir = out.parent().map(|p| p.join(format!("{}.stages", stem(&out))));
            trainer.run(&data)?;
            save_model(&trainer.model, &out)?;
            if let Some(p) = log {
                trainer.log.write_csv(BufWriter::new(fs::File::create(&p)?))?;
            }
            if let Some(last) = trainer.log.rows.last() {
                eprintln!("step {} bpp {:.5} distortion {:.5}", last.step, last.bpp, last.distortion);
            }
        }
        Command::Distill {
            teacher,
            teacher_config,
            config,
            variant,
            lambda,
            iters,
            stage2_iters,
            seed,
            out,
            log,
        } => {
            let teacher = load_model(&teacher, teacher_config.as_deref())?;
            let student = CodecModel::build(&ModelConfig {
                seed,
                ..parse_config(&config)?
            })?;
            let train = TrainConfig {
                lambda_s2: lambda,
                lambda_s3: lambda,
                stage1_iters: iters,
                stage2_iters,
                stage3_iters: 0,
                seed,
                ..TrainConfig::default()
            };
            let variant = match variant {
                DistillMode::Scratch => DistillVariant::Scratch,
                DistillMode::Enc => DistillVariant::Enc,
                DistillMode::EncDec => DistillVariant::EncDec,
            };
            let done = distill_train(&teacher, student, &Dataset::procedural(seed), &DistillConfig::new(train, variant))?;
            save_model(&done.model, &out)?;
            if let Some(p) = log {
                done.log.write_csv(BufWriter::new(fs::File::create(&p)?))?;
            }
        }
        Command::Encode {
            model,
            config,
            input,
            lambda,
            out,
        } => {
            let model = load_model(&model, config.as_deref())?;
            let x = read_ppm(&input)?;
            let enc = encode_image(&model, &x, analysis::lambda_id(lambda))?;
            fs::write(&out, enc.bitstream.to_bytes()?)?;
            eprintln!("{} bytes, {:.5} bpp", enc.bitstream.len(), enc.bitstream.bpp());
        }
        Command::Decode {
            model,
            config,
            input,
            out,
        } => {
            let model = load_model(&model, config.as_deref())?;
            let bs = Bitstream::parse(&fs::read(&input)?)?;
            write_ppm(&out, &decode_image(&model, &bs)?)?;
        }
        Command::RdCurve {
            model,
            lambda,
            config,
            images,
            out,
        } => {
            let models = load_models(&model, &lambda, config.as_deref())?;
            let images = corpus(&images)?;
            let list: Vec<RdModel> = models
                .iter()
                .map(|(id, l, m)| RdModel {
                    id: id.clone(),
                    lambda: *l,
                    model: m,
                })
                .collect();
            let points = analysis::rd_curve(&list, &images, Gammas::default())?;
            fs::write(out.with_extension("csv"), analysis::rd_csv(&points))?;
            fs::write(out.with_extension("svg"), analysis::rd_svg(&points))?;
        }
        Command::VarianceReport {
            model,
            lambda,
            config,
            images,
            out,
        } => {
            let models = load_models(&model, &lambda, config.as_deref())?;
            let images = corpus(&images)?;
            let list: Vec<(f64, &CodecModel)> = models.iter().map(|(_, l, m)| (*l, m)).collect();
            let rows = analysis::variance_report(&list, &images)?;
            fs::write(&out, analysis::variance_csv(&rows))?;
        }
        Command::Macs {
            config,
            height,
            width,
            out,
        } => {
            let model = CodecModel::build(&parse_config(&config)?)?;
            let table = analysis::macs_per_pixel(&model, height, width)?;
            let recount = analysis::recount_macs(&model, height, width)?;
            if recount != table.total() {
                bail!("analytic total {} disagrees with executed convolutions {recount}", table.total());
            }
            let mut text = String::from("component,macs,macs_per_pixel\n");
            for (name, macs) in &table.rows {
                text += &format!("{name},{macs},{:.3}\n", table.per_pixel(*macs));
            }
            text += &format!("encoder,{},{:.3}\n", table.encoder_total(), table.per_pixel(table.encoder_total()));
            text += &format!("total,{},{:.3}\n", table.total(), table.per_pixel(table.total()));
            emit(&text, out.as_deref())?;
        }
        Command::Bench {
            model,
            config,
            height,
            width,
            reps,
            out,
        } => {
            let model = match model {
                Some(p) => load_model(&p, config.as_deref())?,
                None => CodecModel::build(&parse_config(config.as_deref().unwrap_or("se"))?)?,
            };
            let report = analysis::bench_latency(&model, height, width, reps)?;
            emit(&format!("{}\n", report.to_json()), out.as_deref())?;
        }
        Command::GenDataset { out, count, size, seed } => {
            fs::create_dir_all(&out)?;
            let g = TextureGenerator::new(seed);
            for i in 0..count {
                write_ppm(out.join(format!("{i:05}.ppm")), &g.patch(i, size))?;
            }
        }
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
