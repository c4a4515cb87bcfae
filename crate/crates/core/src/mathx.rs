//! Scalar math shims.
//!
//! The crate is `no_std`; transcendental functions come from `libm` so the
//! numeric behavior is identical on every target.

pub const SQRT_2PI: f64 = 2.5066282746310002;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

/// Gaussian error linear unit, exact (erf) form.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / core::f64::consts::SQRT_2))
}

/// d/dx gelu(x) = Phi(x) + x * phi(x) with the standard normal cdf/pdf.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / core::f64::consts::SQRT_2));
    let pdf = exp(-0.5 * x * x) / SQRT_2PI;
    cdf + x * pdf
}
