//! Clamped cubic B-spline bases.
//!
//! Both the shape functions and the warping functions are expanded in the
//! same kind of basis: cubic, clamped at the domain boundaries, with equally
//! spaced interior knots. Evaluation uses the Cox–de Boor triangle restricted
//! to the `degree + 1` functions that are non-zero on the knot span
//! containing `t`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;
const ORDER: usize = DEGREE + 1;

/// Clamped knot sequence on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    lo: f64,
    hi: f64,
    interior: Vec<f64>,
    full: Vec<f64>,
    // Knot spacing when the interior knots are equally spaced; used for O(1)
    // span lookup.
    uniform_step: Option<f64>,
}

/// The non-zero window of a basis evaluation: entries
/// `first..first + 4` of the full design vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisRow {
    pub first: usize,
    pub values: [f64; ORDER],
}

impl BasisRow {
    #[inline]
    pub fn dot(&self, coef: &[f64]) -> f64 {
        let c = &coef[self.first..self.first + ORDER];
        self.values[0] * c[0] + self.values[1] * c[1] + self.values[2] * c[2] + self.values[3] * c[3]
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        out[self.first..self.first + ORDER].copy_from_slice(&self.values);
        out
    }
}

impl KnotVector {
    /// Equally spaced interior knots on `(lo, hi)`.
    pub fn uniform(lo: f64, hi: f64, n_interior: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("domain [{lo}, {hi}] must satisfy lo < hi")));
        }
        let step = (hi - lo) / (n_interior + 1) as f64;
        let interior = (1..=n_interior).map(|k| lo + step * k as f64).collect();
        let mut kv = Self::general(lo, hi, interior)?;
        kv.uniform_step = Some(step);
        Ok(kv)
    }

    /// Arbitrary strictly increasing interior knots, all inside `(lo, hi)`.
    /// Knots identical to those of [`KnotVector::uniform`] get the same fast
    /// span lookup.
    pub fn with_interior(lo: f64, hi: f64, interior: Vec<f64>) -> Result<Self> {
        let uniform = Self::uniform(lo, hi, interior.len())?;
        if uniform.interior == interior {
            return Ok(uniform);
        }
        Self::general(lo, hi, interior)
    }

    fn general(lo: f64, hi: f64, interior: Vec<f64>) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("domain [{lo}, {hi}] must satisfy lo < hi")));
        }
        let mut prev = lo;
        for &k in &interior {
            if !(k > prev && k < hi) {
                return Err(Error::invalid("interior knots must be strictly increasing inside the domain"));
            }
            prev = k;
        }
        let mut full = Vec::with_capacity(interior.len() + 2 * ORDER);
        full.extend(std::iter::repeat_n(lo, ORDER));
        full.extend_from_slice(&interior);
        full.extend(std::iter::repeat_n(hi, ORDER));
        Ok(Self { lo, hi, interior, full, uniform_step: None })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn degree(&self) -> usize {
        DEGREE
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn full_sequence(&self) -> &[f64] {
        &self.full
    }

    /// Number of basis functions, `|interior| + degree + 1`.
    pub fn dim(&self) -> usize {
        self.interior.len() + ORDER
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t <= self.hi
    }

    fn check(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { t, lo: self.lo, hi: self.hi })
        }
    }

    // Index `s` into the full sequence with full[s] <= t < full[s+1]; the
    // right endpoint belongs to the last non-empty span.
    fn span(&self, t: f64) -> usize {
        let last = self.dim() - 1;
        if t >= self.hi {
            return last;
        }
        if let Some(step) = self.uniform_step {
            let guess = ((t - self.lo) / step) as usize + DEGREE;
            let mut s = guess.clamp(DEGREE, last);
            // Rounding in the division can put the guess one span off.
            while s > DEGREE && t < self.full[s] {
                s -= 1;
            }
            while s < last && t >= self.full[s + 1] {
                s += 1;
            }
            return s;
        }
        // Binary search over the knot spans DEGREE..=last.
        let (mut low, mut high) = (DEGREE, last + 1);
        while high - low > 1 {
            let mid = (low + high) / 2;
            if t < self.full[mid] {
                high = mid;
            } else {
                low = mid;
            }
        }
        low
    }

    /// Non-zero window of the basis at `t` without a domain check. `t` is
    /// clamped into the domain.
    #[inline]
    pub fn eval_row_clamped(&self, t: f64) -> BasisRow {
        let t = t.clamp(self.lo, self.hi);
        let s = self.span(t);
        let k = &self.full;
        let mut n = [0.0; ORDER];
        let mut left = [0.0; ORDER];
        let mut right = [0.0; ORDER];
        n[0] = 1.0;
        for j in 1..ORDER {
            left[j] = t - k[s + 1 - j];
            right[j] = k[s + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        BasisRow { first: s - DEGREE, values: n }
    }

    pub fn eval_row(&self, t: f64) -> Result<BasisRow> {
        self.check(t)?;
        Ok(self.eval_row_clamped(t))
    }

    /// Full design vector at `t` (length [`dim`](Self::dim)).
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        Ok(self.eval_row(t)?.to_dense(self.dim()))
    }

    /// `times.len() × dim` matrix whose rows are basis evaluations.
    pub fn design_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let dim = self.dim();
        let mut m = DMatrix::zeros(times.len(), dim);
        for (j, &t) in times.iter().enumerate() {
            let row = self.eval_row(t)?;
            for (k, v) in row.values.iter().enumerate() {
                m[(j, row.first + k)] = *v;
            }
        }
        Ok(m)
    }

    /// Knot averages. Used as coefficients they reproduce `h(t) = t`.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.full[i + 1..i + 1 + DEGREE].iter().sum::<f64>() / DEGREE as f64)
            .collect()
    }

    /// `Σ_k coef[k] B_k(t)`.
    pub fn eval_spline(&self, coef: &[f64], t: f64) -> Result<f64> {
        if coef.len() != self.dim() {
            return Err(Error::invalid(format!(
                "expected {} coefficients, got {}",
                self.dim(),
                coef.len()
            )));
        }
        Ok(self.eval_row(t)?.dot(coef))
    }
}

/// `n` equally spaced points covering `[lo, hi]` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|j| lo + step * j as f64).collect();
            v[n - 1] = hi;
            v
        }
    }
}
