//! Quantized discretized-Gaussian frequency tables.

use std::sync::OnceLock;

use crate::entropy::gaussian::normal_cdf;
use crate::entropy::{SIGMA_MAX, SIGMA_MIN};
use crate::error::{Error, Result};

pub const SYMBOL_MIN: i32 = -256;
pub const SYMBOL_MAX: i32 = 256;
pub const NUM_SYMBOLS: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;
pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;

/// Cumulative frequencies over `[SYMBOL_MIN, SYMBOL_MAX]`; every symbol has
/// at least one count and the counts sum to [`TOTAL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u32>,
}

impl QuantizedCdf {
    /// Build from per-symbol counts.
    pub fn from_frequencies(freq: &[u32]) -> Result<Self> {
        if freq.len() != NUM_SYMBOLS {
            return Err(Error::Invalid(format!("expected {NUM_SYMBOLS} frequencies, got {}", freq.len())));
        }
        if freq.contains(&0) {
            return Err(Error::Invalid("every symbol needs a non-zero frequency".into()));
        }
        let mut cum = Vec::with_capacity(NUM_SYMBOLS + 1);
        cum.push(0u32);
        let mut acc = 0u32;
        for &f in freq {
            acc += f;
            cum.push(acc);
        }
        if acc != TOTAL {
            return Err(Error::Invalid(format!("frequencies sum to {acc}, not {TOTAL}")));
        }
        Ok(QuantizedCdf { cum })
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    fn index(symbol: i32) -> Result<usize> {
        if !(SYMBOL_MIN..=SYMBOL_MAX).contains(&symbol) {
            return Err(Error::Invalid(format!(
                "symbol {symbol} outside [{SYMBOL_MIN}, {SYMBOL_MAX}]"
            )));
        }
        Ok((symbol - SYMBOL_MIN) as usize)
    }

    /// `(cumulative start, frequency)` of `symbol`.
    pub fn range(&self, symbol: i32) -> Result<(u32, u32)> {
        let i = Self::index(symbol)?;
        Ok((self.cum[i], self.cum[i + 1] - self.cum[i]))
    }

    pub fn frequency(&self, symbol: i32) -> Result<u32> {
        Ok(self.range(symbol)?.1)
    }

    /// Symbol whose interval contains `target < TOTAL`, with its range.
    pub fn lookup(&self, target: u32) -> (i32, u32, u32) {
        // first index with cum > target, minus one
        let i = self.cum.partition_point(|&c| c <= target) - 1;
        let i = i.min(NUM_SYMBOLS - 1);
        (i as i32 + SYMBOL_MIN, self.cum[i], self.cum[i + 1] - self.cum[i])
    }

    /// `−log2` of the quantized probability.
    pub fn ideal_bits(&self, symbol: i32) -> Result<f64> {
        let f = self.frequency(symbol)?;
        Ok(PRECISION_BITS as f64 - (f as f64).log2())
    }
}

/// Table for a Gaussian centred at `mu_frac` with scale `sigma`. Mass beyond
/// the symbol range is folded into the two edge bins.
pub fn gaussian_cdf_table(mu_frac: f64, sigma: f64) -> QuantizedCdf {
    let sigma = sigma.clamp(SIGMA_MIN, SIGMA_MAX);
    let budget = (TOTAL - NUM_SYMBOLS as u32) as f64;
    let mut lower = 0.0;
    let mut scaled: Vec<f64> = (0..NUM_SYMBOLS)
        .map(|i| {
            let s = i as f64 + SYMBOL_MIN as f64;
            let upper = if i == NUM_SYMBOLS - 1 {
                1.0
            } else {
                normal_cdf((s - mu_frac + 0.5) / sigma)
            };
            let p = (upper - lower).max(0.0);
            lower = upper;
            p * budget
        })
        .collect();
    let mut freq: Vec<u32> = scaled.iter().map(|&v| 1 + v as u32).collect();
    // largest-remainder rounding of the floored counts
    let left = TOTAL - freq.iter().sum::<u32>();
    scaled.iter_mut().for_each(|v| *v = v.fract());
    let mut order: Vec<usize> = (0..NUM_SYMBOLS).collect();
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(left as usize) {
        freq[i] += 1;
    }
    QuantizedCdf::from_frequencies(&freq).expect("construction keeps the table valid")
}

/// Number of log-spaced scale levels in a [`CdfBank`].
pub const SCALE_LEVELS: usize = 256;
/// Number of mean-offset levels in a [`CdfBank`].
pub const FRAC_LEVELS: usize = 16;

/// Lazily built tables on a fixed grid of `(mu_frac, sigma)`. Both coder
/// ends snap parameters onto the grid the same way, so any `f32` scale maps
/// to one shared table.
pub struct CdfBank {
    tables: Vec<OnceLock<QuantizedCdf>>,
}

impl Default for CdfBank {
    fn default() -> Self {
        Self::new()
    }
}

impl CdfBank {
    pub fn new() -> Self {
        CdfBank {
            tables: (0..SCALE_LEVELS * FRAC_LEVELS).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Process-wide bank.
    pub fn global() -> &'static CdfBank {
        static BANK: OnceLock<CdfBank> = OnceLock::new();
        BANK.get_or_init(CdfBank::new)
    }

    pub fn scale_level(sigma: f64) -> usize {
        let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
        let s = if sigma.is_nan() { lo } else { sigma.clamp(SIGMA_MIN, SIGMA_MAX).ln() };
        let t = (s - lo) / (hi - lo) * (SCALE_LEVELS - 1) as f64;
        (t.round() as usize).min(SCALE_LEVELS - 1)
    }

    pub fn scale_value(level: usize) -> f64 {
        let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
        (lo + (hi - lo) * level as f64 / (SCALE_LEVELS - 1) as f64).exp()
    }

    pub fn frac_level(mu_frac: f64) -> usize {
        let t = ((mu_frac + 0.5) * FRAC_LEVELS as f64).round();
        if t.is_nan() {
            return FRAC_LEVELS / 2;
        }
        (t.max(0.0) as usize).min(FRAC_LEVELS - 1)
    }

    pub fn frac_value(level: usize) -> f64 {
        level as f64 / FRAC_LEVELS as f64 - 0.5
    }

    pub fn get(&self, mu_frac: f64, sigma: f64) -> &QuantizedCdf {
        let (f, s) = (Self::frac_level(mu_frac), Self::scale_level(sigma));
        self.tables[f * SCALE_LEVELS + s].get_or_init(|| gaussian_cdf_table(Self::frac_value(f), Self::scale_value(s)))
    }
}
