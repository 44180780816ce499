//! Scalar distribution samplers used by the Gibbs kernels.
//!
//! Thin wrappers over `rand_distr` plus two samplers it lacks: a
//! small-shape-safe gamma (rejection samplers stall or underflow below shape
//! ~1e-3) and a generalized inverse Gaussian sampler after Devroye (2014),
//! needed by the Dirichlet-Laplace updates.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, InverseGaussian, StandardNormal};

use crate::error::{Error, Result};

/// Gamma(shape, rate) draw.
///
/// For shape >= 1e-3 this defers to `rand_distr`. Below that the
/// Marsaglia-Tsang boost `X = G_{a+1} U^{1/a}` is evaluated in log space so
/// the power of the uniform cannot underflow before the final `exp`.
pub fn gamma_draw<R: Rng>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::Numeric(format!(
            "gamma draw requires positive finite shape/rate, got ({shape}, {rate})"
        )));
    }
    if shape >= 1e-3 {
        let g = Gamma::new(shape, 1.0 / rate)
            .map_err(|e| Error::Numeric(format!("gamma sampler construction: {e}")))?;
        Ok(g.sample(rng).max(f64::MIN_POSITIVE))
    } else {
        let boost = Gamma::new(shape + 1.0, 1.0)
            .map_err(|e| Error::Numeric(format!("gamma sampler construction: {e}")))?;
        let g: f64 = boost.sample(rng);
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let ln_x = g.max(f64::MIN_POSITIVE).ln() + u.ln() / shape - rate.ln();
        Ok(ln_x.exp().max(f64::MIN_POSITIVE))
    }
}

/// Inverse-gamma(shape, rate) draw: `1/X` with `X ~ Gamma(shape, rate)`.
/// Mean is `rate / (shape - 1)` for shape > 1.
pub fn inverse_gamma_draw<R: Rng>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    let g = gamma_draw(rng, shape, rate)?;
    Ok((1.0 / g).max(f64::MIN_POSITIVE))
}

/// Inverse-Gaussian(mean, shape) draw.
pub fn inverse_gaussian_draw<R: Rng>(rng: &mut R, mean: f64, shape: f64) -> Result<f64> {
    let d = InverseGaussian::new(mean, shape)
        .map_err(|e| Error::Numeric(format!("inverse-Gaussian sampler: {e}")))?;
    let x: f64 = d.sample(rng);
    Ok(x.max(f64::MIN_POSITIVE))
}

/// Generalized inverse Gaussian draw with density
/// `f(x) ∝ x^{p-1} exp(-(a x + b / x) / 2)` on `x > 0`, `a, b > 0`.
///
/// Implementation: Devroye's log-concave rejection sampler applied to
/// `Y = ln Z` where `X = sqrt(b/a) Z` and `Z` is the standardized
/// two-parameter GIG with `omega = sqrt(a b)`. Negative `p` uses the
/// reciprocal identity `1/X ~ GIG(-p, b, a)`.
pub fn gig_draw<R: Rng>(rng: &mut R, p: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !p.is_finite() {
        return Err(Error::Numeric(format!(
            "GIG draw requires positive (a, b) and finite p, got ({p}, {a}, {b})"
        )));
    }
    if p < 0.0 {
        return Ok(1.0 / gig_draw(rng, -p, b, a)?);
    }
    let omega = (a * b).sqrt();
    let scale = (b / a).sqrt();
    let z = gig_standardized(rng, p, omega);
    Ok((scale * z).max(f64::MIN_POSITIVE))
}

/// Standardized GIG: density ∝ z^{lambda-1} exp(-omega (z + 1/z) / 2),
/// lambda >= 0. Sampled on the log scale where the density is log-concave.
fn gig_standardized<R: Rng>(rng: &mut R, lambda: f64, omega: f64) -> f64 {
    // Mode of h(y) = lambda*y - omega*cosh(y + y_star) shifted to y = 0.
    let y_star = (lambda / omega).asinh();
    let cosh_star = (1.0 + (lambda / omega).powi(2)).sqrt();
    // h(0) = 0, h concave, h <= 0 everywhere.
    let h = |y: f64| lambda * y - omega * ((y + y_star).cosh() - cosh_star);
    let h_prime = |y: f64| lambda - omega * (y + y_star).sinh();

    // Find t > 0 and s > 0 with h(t) <= -1 <= h(t/2) (ditto for -s), by
    // doubling then bisection. Any such points give a valid envelope.
    let locate = |dir: f64| -> f64 {
        let mut hi = 1.0;
        while h(dir * hi) > -1.0 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if h(dir * mid) > -1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let t = locate(1.0);
    let s = locate(-1.0);

    let ht = h(t);
    let hs = h(-s);
    let dpt = -h_prime(t); // > 0
    let dps = h_prime(-s); // > 0
    let mass_center = s + t;
    let mass_right = ht.exp() / dpt;
    let mass_left = hs.exp() / dps;
    let total = mass_center + mass_right + mass_left;

    loop {
        let u: f64 = rng.gen_range(0.0..total);
        let (y, log_env) = if u < mass_center {
            (-s + u, 0.0)
        } else if u < mass_center + mass_right {
            let e: f64 = rng.sample(Exp1);
            let y = t + e / dpt;
            (y, ht - dpt * (y - t))
        } else {
            let e: f64 = rng.sample(Exp1);
            let y = -s - e / dps;
            (y, hs + dps * (y + s))
        };
        let v: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        if v.ln() <= h(y) - log_env {
            return (y + y_star).exp();
        }
    }
}

/// Standard normal draw.
pub fn normal_draw<R: Rng>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + sd * z
}
