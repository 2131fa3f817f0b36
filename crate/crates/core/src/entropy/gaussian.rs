//! Discretized Gaussian likelihoods shared by the rate estimate and the
//! coder's frequency tables.

/// Smallest probability a symbol may be assigned (2⁻¹⁶).
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Probability of the unit bin centred `residual` away from the mean.
///
/// Evaluated on the lower tail so mass far from the mean does not cancel.
#[inline]
pub fn bin_probability(residual: f64, sigma: f64) -> f64 {
    let r = residual.abs();
    normal_cdf((0.5 - r) / sigma) - normal_cdf((-0.5 - r) / sigma)
}

/// `−log2 p` of the unit bin, with `p` floored at [`PROB_FLOOR`].
#[inline]
pub fn bits(residual: f64, sigma: f64) -> f64 {
    -libm::log2(bin_probability(residual, sigma).max(PROB_FLOOR))
}

/// Partial derivatives of [`bits`] with respect to `(residual, sigma)`.
///
/// Inside the floored tail the gradient is evaluated as if the floor were
/// the probability, so it still points toward more likely values.
#[inline]
pub fn bits_grad(residual: f64, sigma: f64) -> (f64, f64) {
    let r = residual.abs();
    let a = (0.5 - r) / sigma;
    let b = (-0.5 - r) / sigma;
    let p = (normal_cdf(a) - normal_cdf(b)).max(PROB_FLOOR);
    let (pa, pb) = (normal_pdf(a), normal_pdf(b));
    let sign = if residual > 0.0 {
        1.0
    } else if residual < 0.0 {
        -1.0
    } else {
        0.0
    };
    let dp_dr = sign * (pb - pa) / sigma;
    let dp_ds = (b * pb - a * pa) / sigma;
    let k = -1.0 / (p * std::f64::consts::LN_2);
    (k * dp_dr, k * dp_ds)
}
