//! Procedural RGB textures: mixtures of gradients, checkers, soft blobs and
//! value noise. Patch `i` of a given seed is always the same image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug)]
enum Layer {
    Gradient { angle: f32, color: [f32; 3] },
    Checker { period: f32, angle: f32, color: [f32; 3] },
    Blob { cx: f32, cy: f32, radius: f32, color: [f32; 3] },
    Noise { cell: f32, amp: f32, seed: u64 },
    Stripes { period: f32, angle: f32, color: [f32; 3] },
}

fn hash2(seed: u64, x: i64, y: i64) -> f32 {
    // SplitMix64 over the lattice coordinates
    let mut z = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, x: f32, y: f32) -> f32 {
    let (xi, yi) = (x.floor(), y.floor());
    let (tx, ty) = (smooth(x - xi), smooth(y - yi));
    let (xi, yi) = (xi as i64, yi as i64);
    let a = hash2(seed, xi, yi);
    let b = hash2(seed, xi + 1, yi);
    let c = hash2(seed, xi, yi + 1);
    let d = hash2(seed, xi + 1, yi + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]
}

impl Layer {
    fn sample(rng: &mut ChaCha8Rng) -> Layer {
        match rng.gen_range(0..5) {
            0 => Layer::Gradient {
                angle: rng.gen_range(0.0..std::f32::consts::TAU),
                color: random_color(rng),
            },
            1 => Layer::Checker {
                period: rng.gen_range(0.05..0.3),
                angle: rng.gen_range(0.0..std::f32::consts::PI),
                color: random_color(rng),
            },
            2 => Layer::Blob {
                cx: rng.gen_range(0.0..1.0),
                cy: rng.gen_range(0.0..1.0),
                radius: rng.gen_range(0.08..0.4),
                color: random_color(rng),
            },
            3 => Layer::Noise {
                cell: rng.gen_range(0.04..0.25),
                amp: rng.gen_range(0.1..0.4),
                seed: rng.gen(),
            },
            _ => Layer::Stripes {
                period: rng.gen_range(0.05..0.3),
                angle: rng.gen_range(0.0..std::f32::consts::PI),
                color: random_color(rng),
            },
        }
    }

    /// Contribution at normalised coordinates `(u, v)` ∈ `[0,1)²`.
    fn add(&self, u: f32, v: f32, px: &mut [f32; 3]) {
        let rot = |angle: f32| u * angle.cos() + v * angle.sin();
        let (w, color) = match *self {
            Layer::Gradient { angle, color } => (rot(angle) - 0.5, color),
            Layer::Checker { period, angle, color } => {
                let a = (rot(angle) / period).floor() as i64;
                let b = (rot(angle + std::f32::consts::FRAC_PI_2) / period).floor() as i64;
                (if (a + b) % 2 == 0 { 0.5 } else { -0.5 }, color)
            }
            Layer::Blob { cx, cy, radius, color } => {
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                ((-d2 / (2.0 * radius * radius)).exp(), color)
            }
            Layer::Noise { cell, amp, seed } => {
                for (c, p) in px.iter_mut().enumerate() {
                    *p += amp * (value_noise(seed.wrapping_add(c as u64), u / cell, v / cell) - 0.5);
                }
                return;
            }
            Layer::Stripes { period, angle, color } => {
                let t = rot(angle) / period;
                (0.5 * (std::f32::consts::TAU * t).sin(), color)
            }
        };
        for c in 0..3 {
            px[c] += w * color[c];
        }
    }
}

/// Seeded generator of texture patches.
#[derive(Clone, Debug)]
pub struct TextureGenerator {
    pub seed: u64,
}

impl TextureGenerator {
    pub fn new(seed: u64) -> Self {
        TextureGenerator { seed }
    }

    /// Patch number `index` as a `1×3×size×size` tensor in `[0, 1]`.
    pub fn patch(&self, index: u64, size: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ index);
        let base = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
        let layers: Vec<Layer> = (0..rng.gen_range(2..5)).map(|_| Layer::sample(&mut rng)).collect();
        let inv = 1.0 / size as f32;
        let mut t = Tensor::zeros(Shape::new(1, 3, size, size));
        for y in 0..size {
            for x in 0..size {
                let mut px = base;
                for l in &layers {
                    l.add(x as f32 * inv, y as f32 * inv, &mut px);
                }
                for (c, &p) in px.iter().enumerate() {
                    // 8-bit quantized like any stored image
                    let q = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                    t.set(0, c, y, x, q);
                }
            }
        }
        t
    }

    /// Patches `start..start+count` stacked into one batch.
    pub fn batch(&self, start: u64, count: usize, size: usize) -> Result<Tensor<f32>> {
        if count == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        let items: Vec<_> = (0..count as u64).map(|i| self.patch(start + i, size)).collect();
        Tensor::stack(&items)
    }
}

/// Training images: procedural patches, optionally mixed with random crops
/// from user images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub generator: TextureGenerator,
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn procedural(seed: u64) -> Self {
        Dataset {
            generator: TextureGenerator::new(seed),
            images: Vec::new(),
        }
    }

    pub fn with_images(mut self, images: Vec<Tensor<f32>>) -> Self {
        self.images = images;
        self
    }

    /// Deterministic patch `index`: user images (when any are large enough)
    /// supply every other patch through a seeded crop.
    pub fn patch(&self, index: u64, size: usize) -> Tensor<f32> {
        let usable: Vec<&Tensor<f32>> = self
            .images
            .iter()
            .filter(|t| t.shape().h() >= size && t.shape().w() >= size)
            .collect();
        if usable.is_empty() || index.is_multiple_of(2) {
            return self.generator.patch(index, size);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.generator.seed ^ index.rotate_left(17));
        let img = usable[rng.gen_range(0..usable.len())];
        let s = img.shape();
        let y0 = rng.gen_range(0..=s.h() - size);
        let x0 = rng.gen_range(0..=s.w() - size);
        Tensor::from_fn(Shape::new(1, 3, size, size), |[_, c, y, x]| img.at(0, c, y0 + y, x0 + x))
    }

    pub fn batch(&self, start: u64, count: usize, size: usize) -> Result<Tensor<f32>> {
        if count == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        let items: Vec<_> = (0..count as u64).map(|i| self.patch(start + i, size)).collect();
        Tensor::stack(&items)
    }
}
