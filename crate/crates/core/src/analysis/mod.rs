//! Rate/variance studies, complexity accounting and RD curves.

mod svg;

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::codec::{decode_image, encode_image, pad_to_multiple};
use crate::error::{Error, Result};
use crate::model::{CodecModel, MacTable, RateProxy};
use crate::nn::Binding;
use crate::tensor::{Graph, Tensor};
use crate::training::{distortion, Gammas, TextureGenerator};

pub use svg::rd_svg;

/// Differential entropy of a Gaussian with variance `sigma_sq`, in bits.
pub fn diff_entropy_bits(sigma_sq: f64) -> Result<f64> {
    if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
        return Err(Error::Invalid(format!("variance must be positive and finite, got {sigma_sq}")));
    }
    Ok(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma_sq).log2())
}

/// Number of codewords reachable at `rate` bits.
pub fn codebook_size(rate: f64) -> f64 {
    rate.exp2()
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("mse of {} and {}", a.shape(), b.shape())));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

/// PSNR in dB for signals in `[0, 1]`.
pub fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse).log10()
}

/// Single-scale SSIM over non-overlapping 8×8 windows, averaged over
/// windows and channels. A stand-in for MS-SSIM on small images.
pub fn ssim_proxy(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    const WIN: usize = 8;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::Shape(format!("ssim of {s} and {}", b.shape())));
    }
    let (wy, wx) = (s.h().div_ceil(WIN), s.w().div_ceil(WIN));
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n() {
        for c in 0..s.c() {
            for by in 0..wy {
                for bx in 0..wx {
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut k) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for y in by * WIN..((by + 1) * WIN).min(s.h()) {
                        for x in bx * WIN..((bx + 1) * WIN).min(s.w()) {
                            let (p, q) = (a.at(n, c, y, x) as f64, b.at(n, c, y, x) as f64);
                            sa += p;
                            sb += q;
                            saa += p * p;
                            sbb += q * q;
                            sab += p * q;
                            k += 1.0;
                        }
                    }
                    let (ma, mb) = (sa / k, sb / k);
                    let va = saa / k - ma * ma;
                    let vb = sbb / k - mb * mb;
                    let cov = sab / k - ma * mb;
                    total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Bitstream λ tag for a training λ.
pub fn lambda_id(lambda: f64) -> u8 {
    lambda.round().clamp(0.0, 255.0) as u8
}

/// Worker count for corpus loops: `AEIC_THREADS` when set, otherwise the
/// available parallelism.
pub fn thread_limit() -> usize {
    std::env::var("AEIC_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `f` over `items` on up to `thread_limit()` threads. Results keep input
/// order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = thread_limit().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Invalid("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

pub fn macs_per_pixel(model: &CodecModel, height: usize, width: usize) -> Result<MacTable> {
    model.macs(height, width)
}

/// MACs of every convolution the forward pass actually executes at
/// `height × width`, counted from the graph's conv log.
pub fn recount_macs(model: &CodecModel, height: usize, width: usize) -> Result<u64> {
    let mut g = Graph::<f32>::inference();
    let mut p = Binding::frozen(&model.store);
    let x = g.constant(Tensor::zeros(crate::tensor::Shape::new(1, 3, height, width)));
    model.net.forward(&mut g, &mut p, x, RateProxy::Hard)?;
    Ok(g.conv_log().iter().map(|r| r.macs()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceRow {
    pub lambda: f64,
    pub mean_var: f64,
    pub bpp: f64,
}

impl VarianceRow {
    pub const CSV_HEADER: &'static str = "lambda,mean_var,bpp";
}

fn latents(model: &CodecModel, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (x, _) = pad_to_multiple(x, model.config.spatial_ratio);
    let mut g = Graph::inference();
    let mut p = Binding::frozen(&model.store);
    let xv = g.constant(x);
    let y = model.net.analysis.forward(&mut g, &mut p, xv)?;
    Ok(g.value(y).clone())
}

/// Mean per-channel latent variance and coded bpp of each `(λ, model)`
/// over `images`.
pub fn variance_report(models: &[(f64, &CodecModel)], images: &[Tensor<f32>]) -> Result<Vec<VarianceRow>> {
    if images.is_empty() {
        return Err(Error::Invalid("variance report needs at least one image".into()));
    }
    models
        .iter()
        .map(|&(lambda, model)| {
            let per_image = par_map(images, |x| {
                let var = latents(model, x)?.mean_channel_variance();
                let bpp = encode_image(model, x, lambda_id(lambda))?.bitstream.bpp();
                Ok((var, bpp))
            })?;
            let n = per_image.len() as f64;
            Ok(VarianceRow {
                lambda,
                mean_var: per_image.iter().map(|r| r.0).sum::<f64>() / n,
                bpp: per_image.iter().map(|r| r.1).sum::<f64>() / n,
            })
        })
        .collect()
}

pub fn variance_csv(rows: &[VarianceRow]) -> String {
    let mut out = format!("{}\n", VarianceRow::CSV_HEADER);
    for r in rows {
        writeln!(out, "{},{:.6},{:.6}", r.lambda, r.mean_var, r.bpp).unwrap();
    }
    out
}

/// One model measured over one corpus by actually coding every image.
#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub model_id: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim_proxy: Option<f64>,
    pub distortion_loss: f64,
}

impl RdPoint {
    /// The SSIM column is single-scale, not MS-SSIM.
    pub const CSV_HEADER: &'static str = "model_id,lambda,bpp,psnr,ssim_single_scale_proxy,distortion_loss";
}

pub struct RdModel<'a> {
    pub id: String,
    pub lambda: f64,
    pub model: &'a CodecModel,
}

fn distortion_value(x: &Tensor<f32>, x_hat: &Tensor<f32>, gammas: Gammas) -> Result<f64> {
    let mut g = Graph::inference();
    let (a, b) = (g.constant(x.clone()), g.constant(x_hat.clone()));
    let d = distortion(&mut g, a, b, gammas)?;
    Ok(g.value(d).item() as f64)
}

/// Encode and decode every image with every model. PSNR is taken from the
/// corpus-mean MSE.
pub fn rd_curve(models: &[RdModel<'_>], images: &[Tensor<f32>], gammas: Gammas) -> Result<Vec<RdPoint>> {
    if images.is_empty() {
        return Err(Error::Invalid("rd curve needs at least one image".into()));
    }
    models
        .iter()
        .map(|m| {
            let per_image = par_map(images, |x| {
                let bs = encode_image(m.model, x, lambda_id(m.lambda))?.bitstream;
                let x_hat = decode_image(m.model, &bs)?;
                Ok([
                    bs.bpp(),
                    mse(x, &x_hat)?,
                    ssim_proxy(x, &x_hat)?,
                    distortion_value(x, &x_hat, gammas)?,
                ])
            })?;
            let n = per_image.len() as f64;
            let mean = |i: usize| per_image.iter().map(|r| r[i]).sum::<f64>() / n;
            let point = RdPoint {
                model_id: m.id.clone(),
                lambda: m.lambda,
                bpp: mean(0),
                psnr: psnr(mean(1)),
                ms_ssim_proxy: Some(mean(2)),
                distortion_loss: mean(3),
            };
            if !(point.bpp > 0.0) || !point.psnr.is_finite() {
                return Err(Error::Invalid(format!(
                    "degenerate RD point for {}: bpp {} psnr {}",
                    point.model_id, point.bpp, point.psnr
                )));
            }
            Ok(point)
        })
        .collect()
}

pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut out = format!("{}\n", RdPoint::CSV_HEADER);
    for p in points {
        let ssim = p.ms_ssim_proxy.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.6},{:.4},{},{:.6}",
            p.model_id, p.lambda, p.bpp, p.psnr, ssim, p.distortion_loss
        )
        .unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub encode_ms: f64,
    pub decode_ms: f64,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub reps: usize,
}

impl LatencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock encode (including entropy coding) and decode time on
/// a fixed procedural image, after one untimed warm-up.
pub fn bench_latency(model: &CodecModel, height: usize, width: usize, reps: usize) -> Result<LatencyReport> {
    if reps == 0 {
        return Err(Error::Invalid("reps must be at least 1".into()));
    }
    let x = TextureGenerator::new(0).patch(0, height.max(width)).crop(height, width);
    let bs = encode_image(model, &x, 0)?.bitstream;
    decode_image(model, &bs)?;
    let mut enc = Vec::with_capacity(reps);
    let mut dec = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        let bs = encode_image(model, &x, 0)?.bitstream;
        enc.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        decode_image(model, &bs)?;
        dec.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyReport {
        encode_ms: median(enc),
        decode_ms: median(dec),
        height,
        width,
        reps,
    })
}
