//! Model state, mean structure, likelihood, priors and identifiability
//! projections.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::KnotVector;
use crate::error::{Error, Result};
use crate::stats::{ln_beta_density, ln_gamma_density, ln_inv_gamma, ln_normal, LN_2PI};
use crate::warp::{self, JuppVector};

/// Prior and proposal constants.
///
/// Inverse-Gamma priors are parametrized by shape `a_*` and scale `b_*`; the
/// warp-scale prior is Gamma with shape `a_rho` and rate `b_rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub a_eps: f64,
    pub b_eps: f64,
    pub a_c: f64,
    pub b_c: f64,
    pub a_lambda: f64,
    pub b_lambda: f64,
    pub a_eta: f64,
    pub b_eta: f64,
    pub a_rho: f64,
    pub b_rho: f64,
    /// Symmetric Beta prior on memberships.
    pub alpha: f64,
    /// g-prior scale for the phase regression; `None` uses the number of
    /// subjects.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    /// Concentration multiplier of the Dirichlet membership proposal.
    pub dirichlet_scale: f64,
    /// Target acceptance rate of the adaptive warp proposals.
    pub target_accept: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            a_eps: 1e-4,
            b_eps: 1e-4,
            a_c: 0.1,
            b_c: 1.0,
            a_lambda: 0.01,
            b_lambda: 0.01,
            a_eta: 100.0,
            b_eta: 1.0,
            a_rho: 1.0,
            b_rho: 1.0,
            alpha: 0.5,
            g: None,
            dirichlet_scale: 1000.0,
            target_accept: 0.35,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a_eps", self.a_eps),
            ("b_eps", self.b_eps),
            ("a_c", self.a_c),
            ("b_c", self.b_c),
            ("a_lambda", self.a_lambda),
            ("b_lambda", self.b_lambda),
            ("a_eta", self.a_eta),
            ("b_eta", self.b_eta),
            ("a_rho", self.a_rho),
            ("b_rho", self.b_rho),
            ("alpha", self.alpha),
            ("dirichlet_scale", self.dirichlet_scale),
            ("g", self.g.unwrap_or(1.0)),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target_accept must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn g_for(&self, n_subjects: usize) -> f64 {
        self.g.unwrap_or(n_subjects as f64)
    }
}

/// Semi-supervision label of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[default]
    Free,
    Feature1,
    Feature2,
}

impl Label {
    /// Membership implied by a label, if fixed.
    pub fn fixed_membership(self) -> Option<f64> {
        match self {
            Label::Free => None,
            Label::Feature1 => Some(1.0),
            Label::Feature2 => Some(0.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Free => "free",
            Label::Feature1 => "feature1",
            Label::Feature2 => "feature2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "free" => Some(Label::Free),
            "feature1" | "1" => Some(Label::Feature1),
            "feature2" | "2" => Some(Label::Feature2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub covariates: Vec<f64>,
    pub label: Label,
}

/// Functional observations on a common domain `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub lo: f64,
    pub hi: f64,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.covariates.len())
    }

    pub fn labels(&self) -> Vec<Label> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn total_points(&self) -> usize {
        self.subjects.iter().map(|s| s.times.len()).sum()
    }

    /// `N × l` covariate design (no intercept column).
    pub fn covariate_matrix(&self) -> DMatrix<f64> {
        let l = self.n_covariates();
        DMatrix::from_fn(self.len(), l, |i, j| self.subjects[i].covariates[j])
    }

    /// Check the structural contracts against a warp basis of dimension `q`.
    pub fn validate(&self, q: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::data("dataset has no subjects"));
        }
        if !(self.lo < self.hi) {
            return Err(Error::data(format!("invalid domain [{}, {}]", self.lo, self.hi)));
        }
        let l = self.n_covariates();
        for s in &self.subjects {
            if s.times.len() != s.values.len() {
                return Err(Error::data(format!("subject {}: times and values differ in length", s.id)));
            }
            if s.times.len() < q {
                return Err(Error::data(format!(
                    "subject {} has {} observations, fewer than the warp basis dimension {q}",
                    s.id,
                    s.times.len()
                )));
            }
            if s.times.iter().any(|&t| !(t >= self.lo && t <= self.hi)) {
                return Err(Error::data(format!("subject {} has times outside the domain", s.id)));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("subject {} has non-finite values", s.id)));
            }
            if s.covariates.len() != l {
                return Err(Error::data(format!("subject {} has {} covariates, expected {l}", s.id, s.covariates.len())));
            }
        }
        Ok(())
    }
}

/// Shape and warp bases on a shared domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub shape: KnotVector,
    pub warp: KnotVector,
}

impl ModelSpec {
    pub fn uniform(lo: f64, hi: f64, shape_interior: usize, warp_interior: usize) -> Result<Self> {
        Ok(Self {
            shape: KnotVector::uniform(lo, hi, shape_interior)?,
            warp: KnotVector::uniform(lo, hi, warp_interior)?,
        })
    }

    pub fn lo(&self) -> f64 {
        self.shape.lo()
    }

    pub fn hi(&self) -> f64 {
        self.shape.hi()
    }

    /// Shape basis dimension `K`.
    pub fn k(&self) -> usize {
        self.shape.dim()
    }

    /// Warp basis dimension `Q`.
    pub fn q(&self) -> usize {
        self.warp.dim()
    }

    /// Number of free warp parameters `Q − 2`.
    pub fn q_star(&self) -> usize {
        self.warp.dim() - 2
    }

    pub fn identity_target(&self) -> JuppVector {
        warp::identity_target(&self.warp)
    }
}

/// One draw of every sampled quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub intercepts: Vec<f64>,
    /// Membership to feature 1.
    pub memberships: Vec<f64>,
    /// `N × (Q − 2)` warp parameters in log-increment-ratio space.
    pub eta: DMatrix<f64>,
    pub gamma1: DVector<f64>,
    pub gamma2: DVector<f64>,
    pub rho: f64,
    /// `l × (Q − 2)` phase regression coefficients.
    pub regression: DMatrix<f64>,
    pub sigma2_eps: f64,
    pub sigma2_c: f64,
    pub sigma2_eta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl ModelState {
    pub fn n_subjects(&self) -> usize {
        self.intercepts.len()
    }

    pub fn warp_coefficients(&self, i: usize, spec: &ModelSpec) -> Vec<f64> {
        let mut phi = vec![0.0; spec.q()];
        let eta: Vec<f64> = self.eta.row(i).iter().copied().collect();
        warp::jupp_inverse_into(&eta, spec.lo(), spec.hi(), &mut phi);
        phi
    }

    /// Prior mean of subject `i`'s warp parameters: `target + B' x_i`.
    pub fn eta_prior_mean(&self, covariates: &[f64], target: &[f64]) -> Vec<f64> {
        let mut m = target.to_vec();
        for (r, &x) in covariates.iter().enumerate().take(self.regression.nrows()) {
            for (j, mj) in m.iter_mut().enumerate() {
                *mj += self.regression[(r, j)] * x;
            }
        }
        m
    }
}

/// Simulation truth used for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    /// Additive constant applied to the raw first shape.
    pub f1_constant: f64,
    pub phi: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
    pub memberships: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub rho: f64,
    pub sigma_eps: f64,
    pub shape_interior_knots: usize,
    pub warp_interior_knots: usize,
}

/// Per-time evaluation of the warped mean, `m_i(t)`.
pub fn mean_curve(state: &ModelState, i: usize, times: &[f64], spec: &ModelSpec) -> Result<Vec<f64>> {
    if i >= state.n_subjects() {
        return Err(Error::invalid(format!("subject index {i} out of range")));
    }
    let phi = state.warp_coefficients(i, spec);
    let (g1, g2) = (state.gamma1.as_slice(), state.gamma2.as_slice());
    let (c, p) = (state.intercepts[i], state.memberships[i]);
    times
        .iter()
        .map(|&t| {
            let h = spec.warp.eval_row(t)?.dot(&phi).clamp(spec.lo(), spec.hi());
            let h2 = warp::scale_warp(h, t, state.rho)?;
            let f1 = spec.shape.eval_row_clamped(h).dot(g1);
            let f2 = spec.shape.eval_row_clamped(h2).dot(g2);
            Ok(c + p * f1 + (1.0 - p) * f2)
        })
        .collect()
}

/// Gaussian log-likelihood of every observation.
pub fn log_likelihood(state: &ModelState, data: &Dataset, spec: &ModelSpec) -> Result<f64> {
    if !(state.sigma2_eps > 0.0) {
        return Err(Error::invalid("error variance must be positive"));
    }
    let mut total = 0.0;
    for (i, s) in data.subjects.iter().enumerate() {
        let m = mean_curve(state, i, &s.times, spec)?;
        let ss: f64 = s.values.iter().zip(&m).map(|(y, m)| (y - m) * (y - m)).sum();
        let n = s.values.len() as f64;
        total += -0.5 * n * (LN_2PI + state.sigma2_eps.ln()) - 0.5 * ss / state.sigma2_eps;
    }
    Ok(total)
}

/// First-order random walk penalty: tridiagonal with `2` on the diagonal
/// (last entry `1`) and `−1` off the diagonal.
pub fn penalty_matrix(k: usize) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(Error::invalid(format!("penalty matrix needs K >= 2, got {k}")));
    }
    let mut m = DMatrix::zeros(k, k);
    for j in 0..k {
        m[(j, j)] = if j + 1 == k { 1.0 } else { 2.0 };
        if j + 1 < k {
            m[(j, j + 1)] = -1.0;
            m[(j + 1, j)] = -1.0;
        }
    }
    Ok(m)
}

/// `blockdiag(λ₁ Ω⁻¹, λ₂ Ω⁻¹)`.
pub fn gamma_prior_covariance(lambda1: f64, lambda2: f64, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !(lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(Error::invalid("shape variances must be positive"));
    }
    let inv = omega
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("penalty matrix is singular".into()))?;
    let k = omega.nrows();
    let mut out = DMatrix::zeros(2 * k, 2 * k);
    out.view_mut((0, 0), (k, k)).copy_from(&(&inv * lambda1));
    out.view_mut((k, k), (k, k)).copy_from(&(&inv * lambda2));
    Ok(out)
}

/// `blockdiag(Ω / λ₁, Ω / λ₂)`, the inverse of [`gamma_prior_covariance`].
pub fn gamma_prior_precision(lambda1: f64, lambda2: f64, omega: &DMatrix<f64>) -> DMatrix<f64> {
    let k = omega.nrows();
    let mut out = DMatrix::zeros(2 * k, 2 * k);
    out.view_mut((0, 0), (k, k)).copy_from(&(omega / lambda1));
    out.view_mut((k, k), (k, k)).copy_from(&(omega / lambda2));
    out
}

/// Affine map sending the smallest membership to 0 and the largest to 1.
pub fn membership_rescale(pi: &[f64]) -> Result<Vec<f64>> {
    let min = pi.iter().copied().fold(f64::INFINITY, f64::min);
    let max = pi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::Degenerate("memberships are constant; cannot rescale".into()));
    }
    let span = max - min;
    Ok(pi.iter().map(|&p| (p - min) / span).collect())
}

/// Sum-to-zero intercepts, warp parameters centered on `target`, level
/// constraint on `γ₁`, and membership rescaling when exactly one feature has
/// labelled subjects.
pub fn apply_identifiability(state: &ModelState, labels: &[Label], target: &JuppVector) -> ModelState {
    let mut out = state.clone();
    apply_identifiability_in_place(&mut out, labels, target);
    out
}

pub(crate) fn apply_identifiability_in_place(state: &mut ModelState, labels: &[Label], target: &JuppVector) {
    let n = state.intercepts.len() as f64;
    let c_mean = state.intercepts.iter().sum::<f64>() / n;
    state.intercepts.iter_mut().for_each(|c| *c -= c_mean);

    warp::center_etas_in_place(&mut state.eta, target.as_slice());

    let g_mean = state.gamma1.mean();
    state.gamma1.add_scalar_mut(-g_mean);

    let has1 = labels.contains(&Label::Feature1);
    let has2 = labels.contains(&Label::Feature2);
    if has1 != has2 {
        match membership_rescale(&state.memberships) {
            Ok(p) => state.memberships = p,
            Err(e) => log::warn!("membership rescale skipped: {e}"),
        }
        for (p, l) in state.memberships.iter_mut().zip(labels) {
            if let Some(v) = l.fixed_membership() {
                *p = v;
            }
        }
    }
}

/// Settings that change which blocks of the prior are active.
#[derive(Debug, Clone, Copy)]
pub struct PriorTerms {
    pub rho_sampled: bool,
    pub regression: bool,
}

/// Unnormalized log prior density of every sampled block.
///
/// Written directly from the prior specification; the sampler's closed-form
/// conditionals are validated against `log_prior + log_likelihood`.
pub fn log_prior(
    state: &ModelState,
    data: &Dataset,
    spec: &ModelSpec,
    hp: &Hyperparameters,
    terms: PriorTerms,
) -> Result<f64> {
    let omega = penalty_matrix(spec.k())?;
    let k = spec.k() as f64;
    let ln_det_omega = omega
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("penalty matrix not positive definite".into()))?
        .l()
        .diagonal()
        .iter()
        .map(|d| 2.0 * d.ln())
        .sum::<f64>();

    let mut lp = 0.0;
    for &c in &state.intercepts {
        lp += ln_normal(c, 0.0, state.sigma2_c);
    }
    for (g, lambda) in [(&state.gamma1, state.lambda1), (&state.gamma2, state.lambda2)] {
        let quad = (g.transpose() * &omega * g)[(0, 0)];
        lp += -0.5 * k * (LN_2PI + lambda.ln()) + 0.5 * ln_det_omega - 0.5 * quad / lambda;
    }
    let target = spec.identity_target();
    for (i, s) in data.subjects.iter().enumerate() {
        let cov: &[f64] = if terms.regression { &s.covariates } else { &[] };
        let m = state.eta_prior_mean(cov, target.as_slice());
        for (j, mj) in m.iter().enumerate() {
            lp += ln_normal(state.eta[(i, j)], *mj, state.sigma2_eta);
        }
        if s.label == Label::Free {
            lp += ln_beta_density(state.memberships[i], hp.alpha, hp.alpha);
        }
    }
    if terms.regression {
        let x = data.covariate_matrix();
        let g = hp.g_for(data.len());
        let xtx = x.transpose() * &x;
        let l = xtx.nrows() as f64;
        let q = spec.q_star() as f64;
        // V_B = g (X'X)^-1, so V_B^-1 = X'X / g.
        let chol = xtx
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("covariate design is rank deficient"))?;
        let ln_det_xtx: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let ln_det_vb = l * g.ln() - ln_det_xtx;
        let b = &state.regression;
        let quad = (b.transpose() * (&xtx / g) * b).trace();
        lp += -0.5 * l * q * (LN_2PI + state.sigma2_eta.ln()) - 0.5 * q * ln_det_vb - 0.5 * quad / state.sigma2_eta;
    }
    if terms.rho_sampled {
        lp += ln_gamma_density(state.rho, hp.a_rho, hp.b_rho);
    }
    lp += ln_inv_gamma(state.sigma2_eps, hp.a_eps, hp.b_eps);
    lp += ln_inv_gamma(state.sigma2_c, hp.a_c, hp.b_c);
    lp += ln_inv_gamma(state.sigma2_eta, hp.a_eta, hp.b_eta);
    lp += ln_inv_gamma(state.lambda1, hp.a_lambda, hp.b_lambda);
    lp += ln_inv_gamma(state.lambda2, hp.a_lambda, hp.b_lambda);
    Ok(lp)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::basis::linspace;

    pub fn spec() -> ModelSpec {
        ModelSpec::uniform(0.0, 1.0, 5, 1).unwrap()
    }

    pub fn dataset(n: usize, points: usize) -> Dataset {
        let times = linspace(0.0, 1.0, points);
        Dataset {
            lo: 0.0,
            hi: 1.0,
            subjects: (0..n)
                .map(|i| Subject {
                    id: format!("s{i}"),
                    times: times.clone(),
                    values: times.iter().map(|t| (6.0 * t + i as f64).sin()).collect(),
                    covariates: vec![i as f64 - (n as f64 - 1.0) / 2.0],
                    label: Label::Free,
                })
                .collect(),
        }
    }

    pub fn state(n: usize, spec: &ModelSpec) -> ModelState {
        let k = spec.k();
        let target = spec.identity_target();
        ModelState {
            intercepts: (0..n).map(|i| 0.1 * i as f64 - 0.05 * (n as f64 - 1.0)).collect(),
            memberships: (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
            eta: DMatrix::from_fn(n, spec.q_star(), |i, j| target.0[j] + 0.3 * ((i + 2 * j) as f64).sin()),
            gamma1: DVector::from_fn(k, |j, _| (j as f64 * 0.7).cos()),
            gamma2: DVector::from_fn(k, |j, _| 0.5 - 0.1 * j as f64),
            rho: 0.4,
            regression: DMatrix::from_element(1, spec.q_star(), 0.05),
            sigma2_eps: 0.04,
            sigma2_c: 0.3,
            sigma2_eta: 0.5,
            lambda1: 2.0,
            lambda2: 1.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::basis::linspace;
    use crate::stats::ln_normal;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pure_membership_identity_warp() {
        let spec = spec();
        let mut st = state(3, &spec);
        let target = spec.identity_target();
        for j in 0..spec.q_star() {
            st.eta[(0, j)] = target.0[j];
        }
        st.intercepts[0] = 0.0;
        st.memberships[0] = 1.0;
        let times = linspace(0.0, 1.0, 23);
        let m = mean_curve(&st, 0, &times, &spec).unwrap();
        for (t, v) in times.iter().zip(m) {
            let f1 = spec.shape.eval_spline(st.gamma1.as_slice(), *t).unwrap();
            assert_abs_diff_eq!(v, f1, epsilon = 1e-12);
        }
    }

    #[test]
    fn unwarped_second_feature_at_rho_zero() {
        let spec = spec();
        let mut st = state(3, &spec);
        st.rho = 0.0;
        st.memberships[1] = 0.0;
        st.intercepts[1] = 0.0;
        let times = linspace(0.0, 1.0, 17);
        let m = mean_curve(&st, 1, &times, &spec).unwrap();
        for (t, v) in times.iter().zip(m) {
            assert_abs_diff_eq!(v, spec.shape.eval_spline(st.gamma2.as_slice(), *t).unwrap(), epsilon = 1e-14);
        }
    }

    #[test]
    fn constant_features_are_warp_invariant() {
        let spec = spec();
        let mut st = state(3, &spec);
        st.gamma1.fill(1.5);
        st.gamma2.fill(-0.5);
        st.memberships[2] = 0.5;
        let m = mean_curve(&st, 2, &linspace(0.0, 1.0, 9), &spec).unwrap();
        for v in m {
            assert_abs_diff_eq!(v, st.intercepts[2] + 0.5, epsilon = 1e-12);
        }
        assert!(mean_curve(&st, 3, &[0.5], &spec).is_err());
    }

    #[test]
    fn mean_curve_is_affine_in_shapes() {
        let spec = spec();
        let st = state(2, &spec);
        let times = linspace(0.0, 1.0, 11);
        let mut a = st.clone();
        a.intercepts = vec![0.0; 2];
        let mut b = a.clone();
        b.gamma1 = b.gamma1.map(|x| 2.0 - x);
        b.gamma2 = b.gamma2.map(|x| x * x);
        let mut sum = a.clone();
        sum.gamma1 = &a.gamma1 * 0.3 + &b.gamma1 * 0.7;
        sum.gamma2 = &a.gamma2 * 0.3 + &b.gamma2 * 0.7;
        let ma = mean_curve(&a, 1, &times, &spec).unwrap();
        let mb = mean_curve(&b, 1, &times, &spec).unwrap();
        let ms = mean_curve(&sum, 1, &times, &spec).unwrap();
        for j in 0..times.len() {
            assert_abs_diff_eq!(ms[j], 0.3 * ma[j] + 0.7 * mb[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn likelihood_matches_pointwise_density_product() {
        let spec = spec();
        let data = dataset(4, 12);
        let st = state(4, &spec);
        let ll = log_likelihood(&st, &data, &spec).unwrap();
        let mut brute = 1.0f64;
        let mut log_acc = 0.0;
        for (i, s) in data.subjects.iter().enumerate() {
            let m = mean_curve(&st, i, &s.times, &spec).unwrap();
            for (y, mu) in s.values.iter().zip(&m) {
                let sd = st.sigma2_eps.sqrt();
                let dens = (-(y - mu).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
                brute *= dens;
                // Rescale to keep the running product representable.
                if brute < 1e-100 || brute > 1e100 {
                    log_acc += brute.ln();
                    brute = 1.0;
                }
            }
        }
        assert_abs_diff_eq!(ll, log_acc + brute.ln(), epsilon = 1e-9);
    }

    #[test]
    fn likelihood_zero_residuals_and_monotonicity() {
        let spec = spec();
        let mut data = dataset(3, 10);
        let mut st = state(3, &spec);
        st.sigma2_eps = 1.0;
        let fitted: Vec<Vec<f64>> =
            (0..3).map(|i| mean_curve(&st, i, &data.subjects[i].times, &spec).unwrap()).collect();
        for (s, m) in data.subjects.iter_mut().zip(&fitted) {
            s.values = m.clone();
        }
        let ll = log_likelihood(&st, &data, &spec).unwrap();
        assert_abs_diff_eq!(ll, -15.0 * LN_2PI, epsilon = 1e-10);

        let offsets = |scale: f64| {
            let mut d = data.clone();
            for (i, s) in d.subjects.iter_mut().enumerate() {
                for (j, v) in s.values.iter_mut().enumerate() {
                    *v += scale * (0.1 + 0.01 * (i * j) as f64);
                }
            }
            log_likelihood(&st, &d, &spec).unwrap()
        };
        assert!(offsets(2.0) < offsets(1.0));
        st.sigma2_eps = 0.0;
        assert!(log_likelihood(&st, &data, &spec).is_err());
    }

    #[test]
    fn penalty_matrix_examples() {
        let m = penalty_matrix(3).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]));
        assert_abs_diff_eq!(m.determinant(), 1.0, epsilon = 1e-12);
        assert!(penalty_matrix(1).is_err());
        for k in 2..=25 {
            let m = penalty_matrix(k).unwrap();
            assert_eq!(m, m.transpose());
            assert!(m.cholesky().is_some(), "K = {k} not positive definite");
        }
    }

    #[test]
    fn prior_covariance_blocks() {
        let omega = penalty_matrix(4).unwrap();
        let inv = omega.clone().try_inverse().unwrap();
        let s = gamma_prior_covariance(1.0, 1.0, &omega).unwrap();
        assert!((s.view((0, 0), (4, 4)) - &inv).abs().max() < 1e-12);
        assert!((s.view((4, 4), (4, 4)) - &inv).abs().max() < 1e-12);
        assert!(s.view((0, 4), (4, 4)).iter().all(|&x| x == 0.0));
        assert!(s.view((4, 0), (4, 4)).iter().all(|&x| x == 0.0));
        let s3 = gamma_prior_covariance(3.0, 1.0, &omega).unwrap();
        assert!((s3.view((0, 0), (4, 4)) - &s.view((0, 0), (4, 4)) * 3.0).abs().max() < 1e-12);
        assert!(gamma_prior_covariance(0.0, 1.0, &omega).is_err());
        let p = gamma_prior_precision(3.0, 2.0, &omega);
        let s = gamma_prior_covariance(3.0, 2.0, &omega).unwrap();
        assert!((p * s - DMatrix::<f64>::identity(8, 8)).abs().max() < 1e-10);
    }

    #[test]
    fn rescale_examples() {
        let r = membership_rescale(&[0.2, 0.5, 0.8]).unwrap();
        for (a, b) in r.iter().zip([0.0, 0.5, 1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let fixed = [0.0, 0.3, 1.0, 0.7];
        assert_eq!(membership_rescale(&fixed).unwrap(), fixed.to_vec());
        assert!(matches!(membership_rescale(&[0.4, 0.4]), Err(Error::Degenerate(_))));
        let v = [0.9, 0.1, 0.35, 0.6, 0.2];
        let r = membership_rescale(&v).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(v[i] < v[j], r[i] < r[j]);
            }
        }
    }

    #[test]
    fn identifiability_projection() {
        let spec = spec();
        let target = spec.identity_target();
        let mut st = state(3, &spec);
        st.intercepts = vec![1.0, 2.0, 3.0];
        let labels = [Label::Feature1, Label::Feature2, Label::Free];
        let out = apply_identifiability(&st, &labels, &target);
        assert_eq!(out.intercepts, vec![-1.0, 0.0, 1.0]);
        assert!(out.gamma1.sum().abs() < 1e-12);
        for j in 0..spec.q_star() {
            assert!((out.eta.column(j).mean() - target.0[j]).abs() < 1e-12);
        }
        // Labels on both features leave memberships alone.
        assert_eq!(out.memberships, st.memberships);
        let again = apply_identifiability(&out, &labels, &target);
        assert!((again.eta.clone() - &out.eta).abs().max() < 1e-14);
        assert_eq!(again.intercepts, out.intercepts);
        assert!((again.gamma1.clone() - &out.gamma1).abs().max() < 1e-15);

        // One-sided labels trigger the rescale.
        st.memberships = vec![1.0, 0.2, 0.6];
        let one_sided = [Label::Feature1, Label::Free, Label::Free];
        let out = apply_identifiability(&st, &one_sided, &target);
        assert_abs_diff_eq!(out.memberships[1], 0.0);
        assert_abs_diff_eq!(out.memberships[2], 0.5, epsilon = 1e-15);
        assert_eq!(out.memberships[0], 1.0);
    }

    #[test]
    fn log_prior_pieces() {
        let spec = spec();
        let data = dataset(3, 8);
        let hp = Hyperparameters::default();
        let st = state(3, &spec);
        let terms = PriorTerms { rho_sampled: true, regression: true };
        let base = log_prior(&st, &data, &spec, &hp, terms).unwrap();
        // Changing one intercept moves the prior by the Normal log-density difference.
        let mut moved = st.clone();
        moved.intercepts[0] += 0.3;
        let d = log_prior(&moved, &data, &spec, &hp, terms).unwrap() - base;
        let expect = ln_normal(moved.intercepts[0], 0.0, st.sigma2_c) - ln_normal(st.intercepts[0], 0.0, st.sigma2_c);
        assert_abs_diff_eq!(d, expect, epsilon = 1e-12);
        // A standard Gaussian in gamma: the density integrates to one along a
        // slice only after normalization; check the quadratic form instead.
        let mut g = st.clone();
        g.gamma2.fill(0.0);
        let omega = penalty_matrix(spec.k()).unwrap();
        let quad = (st.gamma2.transpose() * &omega * &st.gamma2)[(0, 0)];
        let diff = log_prior(&g, &data, &spec, &hp, terms).unwrap() - base;
        assert_abs_diff_eq!(diff, 0.5 * quad / st.lambda2, epsilon = 1e-10);
    }
}
