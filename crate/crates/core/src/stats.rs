//! Densities, samplers and summary statistics shared across modules.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_ln_cdf(x: f64) -> f64 {
    if x > -35.0 {
        norm_cdf(x).ln()
    } else {
        // Asymptotic tail expansion; erfc underflows below here.
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * LN_2PI + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

#[inline]
pub fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Inverse-Gamma with shape `a` and scale (rate on the precision) `b`.
pub fn ln_inv_gamma(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

/// Gamma with shape `a` and rate `b`.
pub fn ln_gamma_density(x: f64, a: f64, b: f64) -> f64 {
    if x < 0.0 || (x == 0.0 && a > 1.0) {
        return f64::NEG_INFINITY;
    }
    if x == 0.0 && a == 1.0 {
        return b.ln();
    }
    a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x
}

pub fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub fn ln_beta_density(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta_fn(a, b)
}

/// Draw from IG(shape, scale) as the reciprocal of a Gamma(shape, 1/scale).
pub fn sample_inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("positive inverse-gamma parameters");
    1.0 / g.sample(rng)
}

#[inline]
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Beta draw through two Gamma variates. May return exactly 0 or 1 when a
/// shape parameter is tiny; callers reject such values.
pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let x = Gamma::new(a, 1.0).expect("positive beta shape").sample(rng);
    let y = Gamma::new(b, 1.0).expect("positive beta shape").sample(rng);
    if x + y == 0.0 {
        return f64::NAN;
    }
    x / (x + y)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (divisor `n − 1`).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Linear-interpolation quantile of already sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Monte Carlo standard error of the mean by non-overlapping batch means.
pub fn batch_means_se(xs: &[f64], n_batches: usize) -> f64 {
    let size = xs.len() / n_batches;
    let means: Vec<f64> = xs.chunks_exact(size).take(n_batches).map(mean).collect();
    sample_sd(&means) / (means.len() as f64).sqrt()
}
