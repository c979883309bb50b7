//! Monotone warping functions.
//!
//! A warp `h(t) = B_w(t)' φ` is monotone whenever its coefficients are
//! strictly increasing, and maps the domain onto itself when the first and
//! last coefficients equal the domain bounds. The free interior coefficients
//! are parametrized by the log-ratios of consecutive increments, which gives
//! an unconstrained vector of length `Q − 2`.

use nalgebra::DMatrix;

use crate::basis::KnotVector;
use crate::error::{Error, Result};

/// Strictly increasing warp coefficients pinned to the domain bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpCoefficients(Vec<f64>);

/// Unconstrained warp parameters (log increment ratios).
#[derive(Debug, Clone, PartialEq)]
pub struct JuppVector(pub Vec<f64>);

impl WarpCoefficients {
    pub fn new(phi: Vec<f64>) -> Result<Self> {
        if phi.len() < 2 {
            return Err(Error::invalid("warp needs at least two coefficients"));
        }
        if !phi.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("warp coefficients must be strictly increasing"));
        }
        Ok(Self(phi))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl JuppVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Log-ratios of consecutive increments:
/// `η[j] = log((φ[j+2] − φ[j+1]) / (φ[j+1] − φ[j]))`.
pub fn jupp(phi: &WarpCoefficients) -> JuppVector {
    let inc: Vec<f64> = phi.0.windows(2).map(|w| w[1] - w[0]).collect();
    JuppVector(inc.windows(2).map(|d| (d[1] / d[0]).ln()).collect())
}

/// Inverse of [`jupp`] with the endpoints anchored at `lo` and `hi`.
pub fn jupp_inverse(eta: &JuppVector, lo: f64, hi: f64) -> Result<WarpCoefficients> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("warp domain [{lo}, {hi}] must satisfy lo < hi")));
    }
    let mut phi = vec![0.0; eta.len() + 2];
    jupp_inverse_into(eta.as_slice(), lo, hi, &mut phi);
    Ok(WarpCoefficients(phi))
}

/// Allocation-free inverse used by the sampler; `out.len() == eta.len() + 2`.
///
/// Increments are built in log space and normalized against their maximum,
/// so the reconstruction does not overflow for large `|η|`.
pub fn jupp_inverse_into(eta: &[f64], lo: f64, hi: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), eta.len() + 2);
    let q = out.len();
    // out[1..q] temporarily holds the log increments.
    out[1] = 0.0;
    for j in 0..eta.len() {
        out[j + 2] = out[j + 1] + eta[j];
    }
    let max = out[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in out[1..].iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let width = hi - lo;
    let mut cum = 0.0;
    out[0] = lo;
    for k in 1..q - 1 {
        cum += out[k];
        out[k] = lo + width * (cum / total);
    }
    out[q - 1] = hi;
    // Increments far below one ulp of their neighbours vanish in rounding;
    // nudge by single ulps so the coefficients stay strictly ordered.
    for k in 1..q - 1 {
        if out[k] <= out[k - 1] {
            out[k] = out[k - 1].next_up();
        }
    }
    for k in (1..q - 1).rev() {
        if out[k] >= out[k + 1] {
            out[k] = out[k + 1].next_down();
        }
    }
}

/// `h(t) = B_w(t)' φ`, confined to the domain.
pub fn warp_time(kv_w: &KnotVector, phi: &WarpCoefficients, t: f64) -> Result<f64> {
    let h = kv_w.eval_spline(phi.as_slice(), t)?;
    Ok(h.clamp(kv_w.lo(), kv_w.hi()))
}

/// `ρ (h − t) + t`.
pub fn scale_warp(h_of_t: f64, t: f64, rho: f64) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(Error::invalid(format!("warp scale must be non-negative, got {rho}")));
    }
    Ok(scale_warp_unchecked(h_of_t, t, rho))
}

#[inline]
pub(crate) fn scale_warp_unchecked(h_of_t: f64, t: f64, rho: f64) -> f64 {
    rho * (h_of_t - t) + t
}

/// Shift the rows of `etas` so that every column mean equals `target`.
pub fn center_etas(etas: &DMatrix<f64>, target: &JuppVector) -> DMatrix<f64> {
    let mut out = etas.clone();
    center_etas_in_place(&mut out, target.as_slice());
    out
}

pub(crate) fn center_etas_in_place(etas: &mut DMatrix<f64>, target: &[f64]) {
    let n = etas.nrows();
    if n == 0 {
        return;
    }
    for (j, mut col) in etas.column_iter_mut().enumerate() {
        let shift = target[j] - col.sum() / n as f64;
        col.add_scalar_mut(shift);
    }
}

/// Jupp image of the identity warp coefficients (the Greville abscissae).
pub fn identity_target(kv_w: &KnotVector) -> JuppVector {
    jupp(&WarpCoefficients(kv_w.greville()))
}
