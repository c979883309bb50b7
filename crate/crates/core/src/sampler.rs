//! Metropolis-within-Gibbs sampler.
//!
//! One sweep updates, in order: shape coefficients (joint Gaussian),
//! intercepts (Gaussian), memberships (Dirichlet-proposal MH), warp
//! parameters (adaptive random-walk MH), the warp scale `ρ` (truncated
//! normal MH), the phase regression matrix (matrix-normal), the variance
//! components (inverse-Gamma), and finally the identifiability projections.
//!
//! Per-subject basis evaluations at the warped observation times are cached
//! and only rebuilt when that subject's warp or `ρ` changes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::BasisRow;
use crate::error::{Error, Result};
use crate::model::{self, Dataset, Hyperparameters, Label, ModelSpec, ModelState};
use crate::stats::{self, ln_gamma_density, ln_normal, norm_ln_cdf, LN_2PI};
use crate::warp;

/// Standard deviation of the `ρ` random-walk proposal.
pub const RHO_PROPOSAL_SD: f64 = 0.01;
/// Memberships are kept inside `[ε, 1 − ε]` for free subjects.
pub const MEMBERSHIP_EPS: f64 = 1e-9;
const INIT_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoMode {
    Fixed(f64),
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub n_burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Independent RNG stream under the same seed (replicates, chains).
    pub stream: u64,
    pub initial_tau: f64,
    pub rho_mode: RhoMode,
    pub regression: bool,
    /// Apply the identifiability projections each sweep. Disabled only for
    /// joint-distribution checks of the raw conditional updates.
    pub project_constraints: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 60_000,
            n_burnin: 45_000,
            thin: 1,
            seed: 1,
            stream: 0,
            initial_tau: 0.1,
            rho_mode: RhoMode::Sampled,
            regression: false,
            project_constraints: true,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burnin >= self.n_iter {
            return Err(Error::invalid("n_burnin must be smaller than n_iter"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if !(self.initial_tau > 0.0) {
            return Err(Error::invalid("initial_tau must be positive"));
        }
        if let RhoMode::Fixed(r) = self.rho_mode {
            if !(r >= 0.0) {
                return Err(Error::invalid("fixed rho must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn n_draws(&self) -> usize {
        (self.n_iter - self.n_burnin) / self.thin
    }
}

/// Retained draws and sampler diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub spec: ModelSpec,
    pub draws: Vec<ModelState>,
    pub loglik: Vec<f64>,
    /// Post burn-in acceptance rate of each subject's warp proposals.
    pub eta_accept: Vec<f64>,
    /// Post burn-in membership acceptance (0 for labelled subjects).
    pub pi_accept: Vec<f64>,
    pub rho_accept: f64,
    /// Final adaptive proposal variances.
    pub tau: Vec<f64>,
    /// Warped evaluation points clamped back into the domain.
    pub clamp_events: u64,
    pub seed: u64,
    pub stream: u64,
}

/// Normal full conditional of one intercept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalConditional {
    pub mean: f64,
    pub var: f64,
}

/// Inverse-Gamma full conditional `IG(shape, scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGammaConditional {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaConditional {
    pub fn ln_density(&self, x: f64) -> f64 {
        stats::ln_inv_gamma(x, self.shape, self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceConditionals {
    pub sigma2_eps: InvGammaConditional,
    pub sigma2_c: InvGammaConditional,
    pub sigma2_eta: InvGammaConditional,
    pub lambda1: InvGammaConditional,
    pub lambda2: InvGammaConditional,
}

/// Gaussian full conditional of the stacked shape coefficients.
#[derive(Debug, Clone)]
pub struct GammaConditional {
    pub precision: DMatrix<f64>,
    pub mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

/// Matrix-normal full conditional of the regression matrix: column `j` of
/// `B` is `N(mean[:, j], σ²_η · row_cov)`.
#[derive(Debug, Clone)]
pub struct RegressionConditional {
    pub mean: DMatrix<f64>,
    pub row_cov: DMatrix<f64>,
}

#[derive(Debug, Clone, Default)]
struct SubjectCache {
    h: Vec<f64>,
    b1: Vec<BasisRow>,
    b2: Vec<BasisRow>,
}

#[derive(Debug, Clone, Default)]
struct Counters {
    eta_acc: Vec<u64>,
    eta_tries: Vec<u64>,
    pi_acc: Vec<u64>,
    pi_tries: Vec<u64>,
    rho_acc: u64,
    rho_tries: u64,
}

impl Counters {
    fn new(n: usize) -> Self {
        Self {
            eta_acc: vec![0; n],
            eta_tries: vec![0; n],
            pi_acc: vec![0; n],
            pi_tries: vec![0; n],
            rho_acc: 0,
            rho_tries: 0,
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Sampler state that is not part of the model: data, bases, caches,
/// adaptive scales and the RNG.
pub struct Sampler {
    data: Dataset,
    spec: ModelSpec,
    hp: Hyperparameters,
    cfg: ChainConfig,
    labels: Vec<Label>,
    target: Vec<f64>,
    omega: DMatrix<f64>,
    warp_rows: Vec<Vec<BasisRow>>,
    cache: Vec<SubjectCache>,
    xtx: DMatrix<f64>,
    // (X'X)^-1 for regression draws.
    xtx_inv: DMatrix<f64>,
    tau: Vec<f64>,
    counters: Counters,
    clamp_events: u64,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(data: Dataset, spec: ModelSpec, hp: Hyperparameters, cfg: ChainConfig) -> Result<Self> {
        hp.validate()?;
        cfg.validate()?;
        data.validate(spec.q())?;
        if data.lo != spec.lo() || data.hi != spec.hi() {
            return Err(Error::invalid("dataset domain differs from the basis domain"));
        }
        let n = data.len();
        let warp_rows = data
            .subjects
            .iter()
            .map(|s| s.times.iter().map(|&t| spec.warp.eval_row(t)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let (xtx, xtx_inv) = if cfg.regression {
            if data.n_covariates() == 0 {
                return Err(Error::invalid("phase regression enabled but the data has no covariates"));
            }
            let x = data.covariate_matrix();
            let xtx = x.transpose() * &x;
            let inv = xtx
                .clone()
                .cholesky()
                .ok_or_else(|| Error::invalid("covariate design X is not of full column rank"))?
                .inverse();
            (xtx, inv)
        } else {
            (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(cfg.stream);
        Ok(Self {
            labels: data.labels(),
            target: spec.identity_target().0,
            omega: model::penalty_matrix(spec.k())?,
            warp_rows,
            cache: vec![SubjectCache::default(); n],
            xtx,
            xtx_inv,
            tau: vec![cfg.initial_tau; n],
            counters: Counters::new(n),
            clamp_events: 0,
            rng,
            data,
            spec,
            hp,
            cfg,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Mutable access to the observed values (joint-distribution checks
    /// regenerate them between sweeps). Times must not be changed.
    pub fn values_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data.subjects[i].values
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    fn prior_mean_variance(a: f64, b: f64) -> f64 {
        if a > 1.0 {
            b / (a - 1.0)
        } else {
            b / a
        }
    }

    /// Starting point: zero intercepts, memberships at 1/2 (labels fixed),
    /// identity warps, ridge least-squares shapes and variances at their
    /// prior means.
    pub fn initial_state(&mut self) -> Result<ModelState> {
        let n = self.data.len();
        let k = self.spec.k();
        let hp = &self.hp;
        let mut state = ModelState {
            intercepts: vec![0.0; n],
            memberships: self.labels.iter().map(|l| l.fixed_membership().unwrap_or(0.5)).collect(),
            eta: DMatrix::from_fn(n, self.spec.q_star(), |_, j| self.target[j]),
            gamma1: DVector::zeros(k),
            gamma2: DVector::zeros(k),
            rho: match self.cfg.rho_mode {
                RhoMode::Fixed(r) => r,
                RhoMode::Sampled => 1.0,
            },
            regression: DMatrix::zeros(self.data.n_covariates(), self.spec.q_star()),
            sigma2_eps: Self::prior_mean_variance(hp.a_eps, hp.b_eps),
            sigma2_c: Self::prior_mean_variance(hp.a_c, hp.b_c),
            sigma2_eta: Self::prior_mean_variance(hp.a_eta, hp.b_eta),
            lambda1: Self::prior_mean_variance(hp.a_lambda, hp.b_lambda),
            lambda2: Self::prior_mean_variance(hp.a_lambda, hp.b_lambda),
        };
        self.refresh_all(&state);
        let (mut xtx, xty) = self.shape_normal_equations(&state);
        let ridge = model::gamma_prior_precision(1.0, 1.0, &self.omega) * INIT_RIDGE;
        xtx += ridge;
        let sol = xtx
            .cholesky()
            .ok_or_else(|| Error::Numerical("initial shape fit is singular".into()))?
            .solve(&xty);
        state.gamma1 = sol.rows(0, k).into_owned();
        state.gamma2 = sol.rows(k, k).into_owned();
        Ok(state)
    }

    fn build_rows(&mut self, i: usize, eta: &[f64], rho: f64, out: &mut SubjectCache) {
        let (lo, hi) = (self.spec.lo(), self.spec.hi());
        let mut phi = vec![0.0; eta.len() + 2];
        warp::jupp_inverse_into(eta, lo, hi, &mut phi);
        let times = &self.data.subjects[i].times;
        out.h.clear();
        out.b1.clear();
        out.b2.clear();
        for (wr, &t) in self.warp_rows[i].iter().zip(times) {
            let h = wr.dot(&phi).clamp(lo, hi);
            out.h.push(h);
            out.b1.push(self.spec.shape.eval_row_clamped(h));
            let h2 = warp::scale_warp_unchecked(h, t, rho);
            if h2 < lo || h2 > hi {
                self.clamp_events += 1;
            }
            out.b2.push(self.spec.shape.eval_row_clamped(h2));
        }
    }

    fn rebuild_b2(&mut self, i: usize, h: &[f64], rho: f64, out: &mut Vec<BasisRow>) {
        let (lo, hi) = (self.spec.lo(), self.spec.hi());
        out.clear();
        for (&h, &t) in h.iter().zip(&self.data.subjects[i].times) {
            let h2 = warp::scale_warp_unchecked(h, t, rho);
            if h2 < lo || h2 > hi {
                self.clamp_events += 1;
            }
            out.push(self.spec.shape.eval_row_clamped(h2));
        }
    }

    fn refresh_subject(&mut self, state: &ModelState, i: usize) {
        let eta: Vec<f64> = state.eta.row(i).iter().copied().collect();
        let mut c = std::mem::take(&mut self.cache[i]);
        self.build_rows(i, &eta, state.rho, &mut c);
        self.cache[i] = c;
    }

    fn refresh_all(&mut self, state: &ModelState) {
        for i in 0..self.data.len() {
            self.refresh_subject(state, i);
        }
    }

    /// Shape values `(f1(h1(t)), f2(h2(t)))` of subject `i` at its times.
    fn features(&self, state: &ModelState, i: usize) -> (Vec<f64>, Vec<f64>) {
        let c = &self.cache[i];
        let g1 = state.gamma1.as_slice();
        let g2 = state.gamma2.as_slice();
        (c.b1.iter().map(|r| r.dot(g1)).collect(), c.b2.iter().map(|r| r.dot(g2)).collect())
    }

    fn subject_ss(&self, state: &ModelState, i: usize, cache: &SubjectCache) -> f64 {
        let (c, p) = (state.intercepts[i], state.memberships[i]);
        let g1 = state.gamma1.as_slice();
        let g2 = state.gamma2.as_slice();
        let y = &self.data.subjects[i].values;
        let mut ss = 0.0;
        for j in 0..y.len() {
            let m = c + p * cache.b1[j].dot(g1) + (1.0 - p) * cache.b2[j].dot(g2);
            let r = y[j] - m;
            ss += r * r;
        }
        ss
    }

    fn total_ss(&self, state: &ModelState) -> f64 {
        (0..self.data.len()).map(|i| self.subject_ss(state, i, &self.cache[i])).sum()
    }

    /// Log-likelihood from the cached warped bases.
    pub fn log_likelihood(&self, state: &ModelState) -> f64 {
        let n = self.data.total_points() as f64;
        -0.5 * n * (LN_2PI + state.sigma2_eps.ln()) - 0.5 * self.total_ss(state) / state.sigma2_eps
    }

    /// Rebuild every cached basis row from `state`; required after the
    /// state is modified outside the sampler.
    pub fn sync(&mut self, state: &ModelState) {
        self.refresh_all(state);
    }

    // X'X and X'(y - c) of the stacked shape regression.
    fn shape_normal_equations(&self, state: &ModelState) -> (DMatrix<f64>, DVector<f64>) {
        let k = self.spec.k();
        let mut xtx = DMatrix::zeros(2 * k, 2 * k);
        let mut xty = DVector::zeros(2 * k);
        for (i, s) in self.data.subjects.iter().enumerate() {
            let p = state.memberships[i];
            let c = &self.cache[i];
            for j in 0..s.values.len() {
                let r = s.values[j] - state.intercepts[i];
                let mut idx = [0usize; 8];
                let mut val = [0.0; 8];
                for m in 0..4 {
                    idx[m] = c.b1[j].first + m;
                    val[m] = p * c.b1[j].values[m];
                    idx[4 + m] = k + c.b2[j].first + m;
                    val[4 + m] = (1.0 - p) * c.b2[j].values[m];
                }
                for a in 0..8 {
                    if val[a] == 0.0 {
                        continue;
                    }
                    xty[idx[a]] += val[a] * r;
                    for b in 0..8 {
                        xtx[(idx[a], idx[b])] += val[a] * val[b];
                    }
                }
            }
        }
        (xtx, xty)
    }

    /// Unconstrained Gaussian conditional of `(γ₁, γ₂)`.
    pub fn gamma_conditional(&self, state: &ModelState) -> Result<GammaConditional> {
        let (xtx, xty) = self.shape_normal_equations(state);
        let precision = xtx / state.sigma2_eps + model::gamma_prior_precision(state.lambda1, state.lambda2, &self.omega);
        let chol = precision.clone().cholesky().ok_or_else(|| {
            let d = precision.diagonal();
            let (mx, mn) = (d.max(), d.min());
            Error::Numerical(format!(
                "shape posterior precision not positive definite (diagonal range {mn:.3e}..{mx:.3e})"
            ))
        })?;
        let mean = chol.solve(&(xty / state.sigma2_eps));
        Ok(GammaConditional { precision, mean, chol })
    }

    /// Draw the shape coefficients; with projections on, the draw is
    /// conditioned on `1'γ₁ = 0` exactly (conditioning by kriging).
    pub fn update_gamma(&mut self, state: &mut ModelState) -> Result<()> {
        let k = self.spec.k();
        let cond = self.gamma_conditional(state)?;
        let z = DVector::from_fn(2 * k, |_, _| stats::std_normal(&mut self.rng));
        // x = mean + L^{-T} z has covariance (L L')^{-1}.
        let mut x = cond.chol.l().transpose().solve_upper_triangular(&z).expect("triangular solve");
        x += &cond.mean;
        if self.cfg.project_constraints {
            let a = DVector::from_fn(2 * k, |j, _| if j < k { 1.0 } else { 0.0 });
            let pa = cond.chol.solve(&a);
            let apa = a.dot(&pa);
            let excess = x.rows(0, k).sum();
            x -= pa * (excess / apa);
        }
        state.gamma1 = x.rows(0, k).into_owned();
        state.gamma2 = x.rows(k, k).into_owned();
        Ok(())
    }

    pub fn intercept_conditional(&self, state: &ModelState, i: usize) -> NormalConditional {
        let (f1, f2) = self.features(state, i);
        let p = state.memberships[i];
        let y = &self.data.subjects[i].values;
        let resid: f64 = (0..y.len()).map(|j| y[j] - p * f1[j] - (1.0 - p) * f2[j]).sum();
        let prec = y.len() as f64 / state.sigma2_eps + 1.0 / state.sigma2_c;
        NormalConditional { mean: resid / state.sigma2_eps / prec, var: 1.0 / prec }
    }

    pub fn update_intercepts(&mut self, state: &mut ModelState) {
        for i in 0..self.data.len() {
            let c = self.intercept_conditional(state, i);
            state.intercepts[i] = c.mean + c.var.sqrt() * stats::std_normal(&mut self.rng);
        }
    }

    /// Unnormalized log conditional of subject `i`'s membership.
    pub fn membership_log_target(&self, state: &ModelState, i: usize, p: f64) -> f64 {
        if !(p > 0.0 && p < 1.0) {
            return f64::NEG_INFINITY;
        }
        let (f1, f2) = self.features(state, i);
        let y = &self.data.subjects[i].values;
        let c = state.intercepts[i];
        let ss: f64 = (0..y.len())
            .map(|j| {
                let r = y[j] - c - p * f1[j] - (1.0 - p) * f2[j];
                r * r
            })
            .sum();
        (self.hp.alpha - 1.0) * (p.ln() + (1.0 - p).ln()) - 0.5 * ss / state.sigma2_eps
    }

    /// Log density of the membership proposal `Beta(a·p, a·(1 − p))` at `to`.
    pub fn membership_proposal_ln_density(&self, from: f64, to: f64) -> f64 {
        let a = self.hp.dirichlet_scale;
        stats::ln_beta_density(to, a * from, a * (1.0 - from))
    }

    pub fn update_memberships(&mut self, state: &mut ModelState) {
        let a = self.hp.dirichlet_scale;
        let alpha = self.hp.alpha;
        for i in 0..self.data.len() {
            if self.labels[i] != Label::Free {
                continue;
            }
            let p = state.memberships[i].clamp(MEMBERSHIP_EPS, 1.0 - MEMBERSHIP_EPS);
            state.memberships[i] = p;
            self.counters.pi_tries[i] += 1;
            let prop = stats::sample_beta(&mut self.rng, a * p, a * (1.0 - p));
            if !(prop >= MEMBERSHIP_EPS && prop <= 1.0 - MEMBERSHIP_EPS) {
                continue;
            }
            // The likelihood is quadratic in p: SS(p) = E - 2pF + p²D.
            let (f1, f2) = self.features(state, i);
            let y = &self.data.subjects[i].values;
            let c = state.intercepts[i];
            let (mut ee, mut ed, mut dd) = (0.0, 0.0, 0.0);
            for j in 0..y.len() {
                let e = y[j] - c - f2[j];
                let d = f1[j] - f2[j];
                ee += e * e;
                ed += e * d;
                dd += d * d;
            }
            let ss = |q: f64| ee - 2.0 * q * ed + q * q * dd;
            let target = |q: f64| (alpha - 1.0) * (q.ln() + (1.0 - q).ln()) - 0.5 * ss(q) / state.sigma2_eps;
            let log_r = target(prop) - target(p) + self.membership_proposal_ln_density(prop, p)
                - self.membership_proposal_ln_density(p, prop);
            if self.rng.random::<f64>().ln() < log_r {
                state.memberships[i] = prop;
                self.counters.pi_acc[i] += 1;
            }
        }
    }

    pub fn update_eta(&mut self, state: &mut ModelState, iter: usize, adapt: bool) {
        let q = self.spec.q_star();
        let target_rate = self.hp.target_accept;
        let mut proposal = SubjectCache::default();
        for i in 0..self.data.len() {
            let cov: &[f64] = if self.cfg.regression { &self.data.subjects[i].covariates } else { &[] };
            let mean = state.eta_prior_mean(cov, &self.target);
            let cur: Vec<f64> = state.eta.row(i).iter().copied().collect();
            let sd = self.tau[i].sqrt();
            let prop: Vec<f64> = cur.iter().map(|&e| e + sd * stats::std_normal(&mut self.rng)).collect();
            self.build_rows(i, &prop, state.rho, &mut proposal);
            let ss_new = self.subject_ss(state, i, &proposal);
            let ss_old = self.subject_ss(state, i, &self.cache[i]);
            let mut log_r = -0.5 * (ss_new - ss_old) / state.sigma2_eps;
            for j in 0..q {
                log_r += ln_normal(prop[j], mean[j], state.sigma2_eta) - ln_normal(cur[j], mean[j], state.sigma2_eta);
            }
            self.counters.eta_tries[i] += 1;
            if self.rng.random::<f64>().ln() < log_r {
                for j in 0..q {
                    state.eta[(i, j)] = prop[j];
                }
                std::mem::swap(&mut self.cache[i], &mut proposal);
                self.counters.eta_acc[i] += 1;
            }
            if adapt {
                let rate = ratio(self.counters.eta_acc[i], self.counters.eta_tries[i]);
                self.tau[i] = adapt_scale(self.tau[i], rate, target_rate, iter);
            }
        }
    }

    /// Log ratio `q(ρ | ρ*) / q(ρ* | ρ)` of the zero-truncated normal
    /// proposal: `log Φ(ρ/s) − log Φ(ρ*/s)`.
    pub fn rho_hastings_correction(current: f64, proposed: f64) -> f64 {
        norm_ln_cdf(current / RHO_PROPOSAL_SD) - norm_ln_cdf(proposed / RHO_PROPOSAL_SD)
    }

    pub fn update_rho(&mut self, state: &mut ModelState) {
        if let RhoMode::Fixed(_) = self.cfg.rho_mode {
            return;
        }
        let cur = state.rho;
        let prop = loop {
            let r = cur + RHO_PROPOSAL_SD * stats::std_normal(&mut self.rng);
            if r >= 0.0 {
                break r;
            }
        };
        let n = self.data.len();
        let mut new_b2 = Vec::with_capacity(n);
        let mut ss_old = 0.0;
        let mut ss_new = 0.0;
        for i in 0..n {
            let h = std::mem::take(&mut self.cache[i].h);
            let mut rows = Vec::with_capacity(h.len());
            self.rebuild_b2(i, &h, prop, &mut rows);
            self.cache[i].h = h;
            ss_old += self.subject_ss(state, i, &self.cache[i]);
            let trial = SubjectCache { h: Vec::new(), b1: std::mem::take(&mut self.cache[i].b1), b2: rows };
            ss_new += self.subject_ss(state, i, &trial);
            self.cache[i].b1 = trial.b1;
            new_b2.push(trial.b2);
        }
        let log_r = -0.5 * (ss_new - ss_old) / state.sigma2_eps + ln_gamma_density(prop, self.hp.a_rho, self.hp.b_rho)
            - ln_gamma_density(cur, self.hp.a_rho, self.hp.b_rho)
            + Self::rho_hastings_correction(cur, prop);
        self.counters.rho_tries += 1;
        if self.rng.random::<f64>().ln() < log_r {
            state.rho = prop;
            for (c, b2) in self.cache.iter_mut().zip(new_b2) {
                c.b2 = b2;
            }
            self.counters.rho_acc += 1;
        }
    }

    pub fn regression_conditional(&self, state: &ModelState) -> RegressionConditional {
        let g = self.hp.g_for(self.data.len());
        let x = self.data.covariate_matrix();
        let resid = DMatrix::from_fn(self.data.len(), self.spec.q_star(), |i, j| state.eta[(i, j)] - self.target[j]);
        // Posterior row covariance (X'X + X'X/g)^-1 = g/(g+1) (X'X)^-1.
        let row_cov = &self.xtx_inv * (g / (g + 1.0));
        let mean = &row_cov * (x.transpose() * resid);
        RegressionConditional { mean, row_cov }
    }

    pub fn update_regression(&mut self, state: &mut ModelState) -> Result<()> {
        if !self.cfg.regression {
            return Ok(());
        }
        let cond = self.regression_conditional(state);
        let l = cond
            .row_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("regression covariance not positive definite".into()))?
            .l();
        let z = DMatrix::from_fn(cond.mean.nrows(), cond.mean.ncols(), |_, _| stats::std_normal(&mut self.rng));
        state.regression = cond.mean + l * z * state.sigma2_eta.sqrt();
        Ok(())
    }

    pub fn variance_conditionals(&self, state: &ModelState) -> VarianceConditionals {
        let hp = &self.hp;
        let n = self.data.len() as f64;
        let k = self.spec.k() as f64;
        let q = self.spec.q_star() as f64;
        let sigma2_eps = InvGammaConditional {
            shape: hp.a_eps + 0.5 * self.data.total_points() as f64,
            scale: hp.b_eps + 0.5 * self.total_ss(state),
        };
        let sigma2_c = InvGammaConditional {
            shape: hp.a_c + 0.5 * n,
            scale: hp.b_c + 0.5 * state.intercepts.iter().map(|c| c * c).sum::<f64>(),
        };
        let quad = |g: &DVector<f64>| (g.transpose() * &self.omega * g)[(0, 0)];
        let lambda1 =
            InvGammaConditional { shape: hp.a_lambda + 0.5 * k, scale: hp.b_lambda + 0.5 * quad(&state.gamma1) };
        let lambda2 =
            InvGammaConditional { shape: hp.a_lambda + 0.5 * k, scale: hp.b_lambda + 0.5 * quad(&state.gamma2) };
        let mut eta_ss = 0.0;
        for (i, s) in self.data.subjects.iter().enumerate() {
            let cov: &[f64] = if self.cfg.regression { &s.covariates } else { &[] };
            let m = state.eta_prior_mean(cov, &self.target);
            for (j, mj) in m.iter().enumerate() {
                eta_ss += (state.eta[(i, j)] - mj).powi(2);
            }
        }
        let mut eta_shape = hp.a_eta + 0.5 * n * q;
        if self.cfg.regression {
            let g = hp.g_for(self.data.len());
            let b = &state.regression;
            eta_ss += (b.transpose() * (&self.xtx / g) * b).trace();
            eta_shape += 0.5 * b.nrows() as f64 * q;
        }
        let sigma2_eta = InvGammaConditional { shape: eta_shape, scale: hp.b_eta + 0.5 * eta_ss };
        VarianceConditionals { sigma2_eps, sigma2_c, sigma2_eta, lambda1, lambda2 }
    }

    pub fn update_variances(&mut self, state: &mut ModelState) {
        let v = self.variance_conditionals(state);
        let draw = |rng: &mut ChaCha8Rng, c: InvGammaConditional| stats::sample_inv_gamma(rng, c.shape, c.scale);
        state.sigma2_eps = draw(&mut self.rng, v.sigma2_eps);
        state.sigma2_c = draw(&mut self.rng, v.sigma2_c);
        state.lambda1 = draw(&mut self.rng, v.lambda1);
        state.lambda2 = draw(&mut self.rng, v.lambda2);
        state.sigma2_eta = draw(&mut self.rng, v.sigma2_eta);
    }

    fn project(&mut self, state: &mut ModelState) {
        if !self.cfg.project_constraints {
            return;
        }
        let target = warp::JuppVector(self.target.clone());
        model::apply_identifiability_in_place(state, &self.labels, &target);
        self.refresh_all(state);
    }

    /// One full sweep; returns the log-likelihood of the resulting state.
    pub fn sweep(&mut self, state: &mut ModelState, iter: usize, adapt: bool) -> Result<f64> {
        self.update_gamma(state)?;
        self.update_intercepts(state);
        self.update_memberships(state);
        self.update_eta(state, iter, adapt);
        self.update_rho(state);
        self.update_regression(state)?;
        self.update_variances(state);
        self.project(state);
        let ll = self.log_likelihood(state);
        if !ll.is_finite() {
            return Err(Error::NonFinite { iteration: iter });
        }
        Ok(ll)
    }

    fn reset_counters(&mut self) {
        self.counters = Counters::new(self.data.len());
    }
}

/// Run a full chain: burn-in with proposal adaptation, then retained
/// (thinned) draws with frozen proposal scales.
pub fn run_chain(data: &Dataset, spec: &ModelSpec, hp: &Hyperparameters, cfg: &ChainConfig) -> Result<ChainOutput> {
    run_chain_from(data, spec, hp, cfg, None)
}

/// [`run_chain`] starting from `initial` instead of the default start.
pub fn run_chain_from(
    data: &Dataset,
    spec: &ModelSpec,
    hp: &Hyperparameters,
    cfg: &ChainConfig,
    initial: Option<ModelState>,
) -> Result<ChainOutput> {
    let mut sampler = Sampler::new(data.clone(), spec.clone(), hp.clone(), cfg.clone())?;
    let mut state = match initial {
        Some(s) => {
            if s.n_subjects() != data.len() || s.eta.ncols() != spec.q_star() || s.gamma1.len() != spec.k() {
                return Err(Error::invalid("initial state does not match the data and bases"));
            }
            let mut s = s;
            if let RhoMode::Fixed(r) = cfg.rho_mode {
                s.rho = r;
            }
            if !cfg.regression || s.regression.shape() != (data.n_covariates(), spec.q_star()) {
                s.regression = DMatrix::zeros(data.n_covariates(), spec.q_star());
            }
            sampler.sync(&s);
            s
        }
        None => sampler.initial_state()?,
    };
    let mut draws = Vec::with_capacity(cfg.n_draws());
    let mut loglik = Vec::with_capacity(cfg.n_draws());
    for iter in 1..=cfg.n_iter {
        if iter == cfg.n_burnin + 1 {
            sampler.reset_counters();
        }
        let adapt = iter <= cfg.n_burnin;
        let ll = sampler.sweep(&mut state, iter, adapt)?;
        if !adapt && (iter - cfg.n_burnin) % cfg.thin == 0 {
            draws.push(state.clone());
            loglik.push(ll);
        }
    }
    let c = &sampler.counters;
    Ok(ChainOutput {
        spec: spec.clone(),
        eta_accept: c.eta_acc.iter().zip(&c.eta_tries).map(|(&a, &t)| ratio(a, t)).collect(),
        pi_accept: c.pi_acc.iter().zip(&c.pi_tries).map(|(&a, &t)| ratio(a, t)).collect(),
        rho_accept: ratio(c.rho_acc, c.rho_tries),
        tau: sampler.tau.clone(),
        clamp_events: sampler.clamp_events,
        seed: cfg.seed,
        stream: cfg.stream,
        draws,
        loglik,
    })
}

/// `τ (1 + (rate − target) / √iter)`.
pub fn adapt_scale(tau: f64, rate: f64, target: f64, iter: usize) -> f64 {
    tau * (1.0 + (rate - target) / (iter as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support;
    use approx::assert_abs_diff_eq;

    #[test]
    fn adaptation_rule() {
        assert_eq!(adapt_scale(0.7, 0.35, 0.35, 50), 0.7);
        assert_abs_diff_eq!(adapt_scale(1.0, 0.55, 0.35, 100), 1.02, epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ChainConfig { n_iter: 10, n_burnin: 10, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.n_burnin = 4;
        cfg.thin = 0;
        assert!(cfg.validate().is_err());
        cfg.thin = 3;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.n_draws(), 2);
    }

    #[test]
    fn rank_deficient_covariates_rejected() {
        let spec = test_support::spec();
        let mut data = test_support::dataset(4, 10);
        for s in &mut data.subjects {
            let x = s.covariates[0];
            s.covariates = vec![x, 2.0 * x];
        }
        let cfg = ChainConfig { regression: true, ..Default::default() };
        assert!(matches!(
            Sampler::new(data, spec, Hyperparameters::default(), cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn labelled_memberships_never_move() {
        let spec = test_support::spec();
        let mut data = test_support::dataset(4, 10);
        data.subjects[0].label = Label::Feature1;
        data.subjects[1].label = Label::Feature2;
        let cfg = ChainConfig { n_iter: 40, n_burnin: 20, ..Default::default() };
        let out = run_chain(&data, &spec, &Hyperparameters::default(), &cfg).unwrap();
        assert_eq!(out.draws.len(), 20);
        for d in &out.draws {
            assert_eq!(d.memberships[0], 1.0);
            assert_eq!(d.memberships[1], 0.0);
        }
        assert_eq!(out.pi_accept[0], 0.0);
    }

    #[test]
    fn fixed_rho_is_never_updated() {
        let spec = test_support::spec();
        let data = test_support::dataset(3, 10);
        let cfg = ChainConfig { n_iter: 30, n_burnin: 10, rho_mode: RhoMode::Fixed(0.0), ..Default::default() };
        let out = run_chain(&data, &spec, &Hyperparameters::default(), &cfg).unwrap();
        assert!(out.draws.iter().all(|d| d.rho == 0.0));
    }

    #[test]
    fn cached_likelihood_matches_direct_evaluation() {
        let spec = test_support::spec();
        let data = test_support::dataset(5, 12);
        let mut s = Sampler::new(data.clone(), spec.clone(), Hyperparameters::default(), ChainConfig::default()).unwrap();
        let mut state = test_support::state(5, &spec);
        state.rho = 3.0;
        state.eta[(0, 0)] += 2.5;
        state.eta[(1, 2)] -= 2.5;
        s.sync(&state);
        let direct = model::log_likelihood(&state, &data, &spec).unwrap();
        assert_abs_diff_eq!(s.log_likelihood(&state), direct, epsilon = 1e-9);
        assert!(s.clamp_events() > 0);
    }
}
