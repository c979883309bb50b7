//! Synthetic two-feature data with known shapes, warps and memberships,
//! plus the error metrics used to score fits against them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{linspace, KnotVector};
use crate::error::{Error, Result};
use crate::model::{self, Dataset, GroundTruth, Label, ModelSpec, ModelState, Subject};
use crate::stats::{self, norm_cdf};
use crate::warp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub n_points: usize,
    pub sigma_c: f64,
    pub sigma_eps: f64,
    pub sigma2_eta: f64,
    pub rho: f64,
    pub dirichlet_alpha: f64,
    /// Fraction of subjects (largest memberships) forced into feature 1.
    pub label_fraction: f64,
    /// Exact number of forced subjects; overrides `label_fraction`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_count: Option<usize>,
    pub shape_interior_knots: usize,
    pub warp_interior_knots: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_subjects: 50,
            n_points: 30,
            sigma_c: 0.2,
            sigma_eps: 0.085,
            sigma2_eta: 1.5,
            rho: 0.4,
            dirichlet_alpha: 0.5,
            label_fraction: 0.05,
            label_count: None,
            shape_interior_knots: 15,
            warp_interior_knots: 1,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_points < 2 {
            return Err(Error::invalid("simulation needs at least one subject and two points"));
        }
        for (name, v) in [
            ("sigma_c", self.sigma_c),
            ("sigma2_eta", self.sigma2_eta),
            ("dirichlet_alpha", self.dirichlet_alpha),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.sigma_eps >= 0.0) || !(self.rho >= 0.0) {
            return Err(Error::invalid("sigma_eps and rho must be non-negative"));
        }
        if !(0.0..=0.5).contains(&self.label_fraction) {
            return Err(Error::invalid("label_fraction must lie in [0, 0.5]"));
        }
        if self.label_count.is_some_and(|c| c == 0 || c > self.n_subjects) {
            return Err(Error::invalid("label_count must lie in 1..=n_subjects"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::uniform(0.0, 1.0, self.shape_interior_knots, self.warp_interior_knots)
    }

    /// Number of subjects forced to feature 1; at least one.
    pub fn n_labelled(&self) -> usize {
        if let Some(c) = self.label_count {
            return c;
        }
        let raw = self.label_fraction * self.n_subjects as f64;
        if raw < 1.0 {
            log::warn!("label fraction {} of {} subjects yields no label; using 1", self.label_fraction, self.n_subjects);
        }
        (raw - 1e-9).ceil().max(1.0) as usize
    }
}

/// The two generating shapes without the level constant on `f₁`:
/// `f₁(t) = Φ((t − 0.7)/0.2) − 5(t − 0.3)²`,
/// `f₂(t) = −Φ((t − 0.3)/0.2) + (t − 0.7)²`.
pub fn true_shapes(t: f64) -> (f64, f64) {
    let f1 = norm_cdf((t - 0.7) / 0.2) - 5.0 * (t - 0.3).powi(2);
    let f2 = -norm_cdf((t - 0.3) / 0.2) + (t - 0.7).powi(2);
    (f1, f2)
}

/// Spline coefficients of the generating shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueCoefficients {
    pub gamma1: DVector<f64>,
    pub gamma2: DVector<f64>,
    /// Constant added to `f₁` so that `γ₁` sums to zero.
    pub f1_constant: f64,
}

impl TrueCoefficients {
    /// `(f₁(t), f₂(t))` including the level constant.
    pub fn shapes(&self, t: f64) -> (f64, f64) {
        let (f1, f2) = true_shapes(t);
        (f1 + self.f1_constant, f2)
    }
}

fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let xtx = design.transpose() * design;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular normal equations in spline fit".into()))?;
    Ok(chol.solve(&(design.transpose() * y)))
}

/// Least-squares spline fit of the generating shapes on 101 equally spaced
/// points, with the `f₁` constant chosen so that `1'γ₁ = 0`.
pub fn fit_true_coefficients(kv_s: &KnotVector) -> Result<TrueCoefficients> {
    fit_on_grid(kv_s, &linspace(kv_s.lo(), kv_s.hi(), 101), |t| true_shapes(t))
}

fn fit_on_grid(kv_s: &KnotVector, grid: &[f64], f: impl Fn(f64) -> (f64, f64)) -> Result<TrueCoefficients> {
    let design = kv_s.design_matrix(grid)?;
    let y1 = DVector::from_iterator(grid.len(), grid.iter().map(|&t| f(t).0));
    let y2 = DVector::from_iterator(grid.len(), grid.iter().map(|&t| f(t).1));
    let mut gamma1 = least_squares(&design, &y1)?;
    let gamma2 = least_squares(&design, &y2)?;
    // Constants lie in the spline space, so shifting f₁ by c shifts every
    // coefficient by c.
    let f1_constant = -gamma1.mean();
    gamma1.add_scalar_mut(f1_constant);
    Ok(TrueCoefficients { gamma1, gamma2, f1_constant })
}

/// Simulate one dataset on stream 0 of `cfg.seed`.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    simulate_replicate(cfg, 0)
}

/// Simulate replicate `stream` of `cfg.seed`; replicates use independent
/// RNG streams.
pub fn simulate_replicate(cfg: &SimConfig, stream: u64) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let truth_coef = fit_true_coefficients(&spec.shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);

    let n = cfg.n_subjects;
    let q = spec.q_star();
    let target = spec.identity_target();

    let mut c: Vec<f64> = (0..n).map(|_| cfg.sigma_c * stats::std_normal(&mut rng)).collect();
    let c_mean = stats::mean(&c);
    c.iter_mut().for_each(|x| *x -= c_mean);

    let mut pi: Vec<f64> =
        (0..n).map(|_| stats::sample_beta(&mut rng, cfg.dirichlet_alpha, cfg.dirichlet_alpha)).collect();

    let sd_eta = cfg.sigma2_eta.sqrt();
    let eta = DMatrix::from_fn(n, q, |_, j| target.0[j] + sd_eta * stats::std_normal(&mut rng));
    let eta = warp::center_etas(&eta, &target);

    // Force the largest memberships to 1, then rescale to span [0, 1].
    let n_lab = cfg.n_labelled();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]).then(a.cmp(&b)));
    let mut labels = vec![Label::Free; n];
    for &i in &order[..n_lab] {
        pi[i] = 1.0;
        labels[i] = Label::Feature1;
    }
    match model::membership_rescale(&pi) {
        Ok(p) => pi = p,
        Err(e) => log::warn!("simulated memberships not rescaled: {e}"),
    }

    let state = ModelState {
        intercepts: c.clone(),
        memberships: pi.clone(),
        eta: eta.clone(),
        gamma1: truth_coef.gamma1.clone(),
        gamma2: truth_coef.gamma2.clone(),
        rho: cfg.rho,
        regression: DMatrix::zeros(0, q),
        sigma2_eps: cfg.sigma_eps.powi(2).max(f64::MIN_POSITIVE),
        sigma2_c: cfg.sigma_c.powi(2),
        sigma2_eta: cfg.sigma2_eta,
        lambda1: 1.0,
        lambda2: 1.0,
    };
    let times = linspace(0.0, 1.0, cfg.n_points);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let m = model::mean_curve(&state, i, &times, &spec)?;
        let values = m.iter().map(|&mu| mu + cfg.sigma_eps * stats::std_normal(&mut rng)).collect();
        subjects.push(Subject {
            id: format!("s{:03}", i + 1),
            times: times.clone(),
            values,
            covariates: Vec::new(),
            label: labels[i],
        });
    }
    let truth = GroundTruth {
        gamma1: truth_coef.gamma1.as_slice().to_vec(),
        gamma2: truth_coef.gamma2.as_slice().to_vec(),
        f1_constant: truth_coef.f1_constant,
        phi: (0..n).map(|i| state.warp_coefficients(i, &spec)).collect(),
        eta: (0..n).map(|i| eta.row(i).iter().copied().collect()).collect(),
        memberships: pi,
        intercepts: c,
        rho: cfg.rho,
        sigma_eps: cfg.sigma_eps,
        shape_interior_knots: cfg.shape_interior_knots,
        warp_interior_knots: cfg.warp_interior_knots,
    };
    Ok((Dataset { lo: 0.0, hi: 1.0, subjects }, truth))
}

impl GroundTruth {
    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::uniform(0.0, 1.0, self.shape_interior_knots, self.warp_interior_knots)
    }

    /// True shape `k ∈ {1, 2}` evaluated on `grid`.
    pub fn shape_on(&self, k: usize, grid: &[f64]) -> Result<Vec<f64>> {
        let spec = self.model_spec()?;
        let coef = if k == 1 { &self.gamma1 } else { &self.gamma2 };
        grid.iter().map(|&t| spec.shape.eval_spline(coef, t)).collect()
    }

    /// The generating parameters as a sampler state. Variance components
    /// not stored in the truth are set from the empirical spread of the
    /// simulated intercepts and warp parameters.
    pub fn state(&self) -> Result<ModelState> {
        let spec = self.model_spec()?;
        let (n, q) = (self.eta.len(), spec.q_star());
        if self.intercepts.len() != n || self.memberships.len() != n || self.eta.iter().any(|e| e.len() != q) {
            return Err(Error::invalid("ground truth dimensions are inconsistent"));
        }
        let target = spec.identity_target();
        let eta_dev: Vec<f64> = self.eta.iter().flat_map(|e| e.iter().zip(&target.0).map(|(a, b)| a - b)).collect();
        let spread = |xs: &[f64]| (xs.iter().map(|x| x * x).sum::<f64>() / xs.len().max(1) as f64).max(1e-6);
        Ok(ModelState {
            intercepts: self.intercepts.clone(),
            memberships: self.memberships.clone(),
            eta: DMatrix::from_fn(n, q, |r, j| self.eta[r][j]),
            gamma1: DVector::from_vec(self.gamma1.clone()),
            gamma2: DVector::from_vec(self.gamma2.clone()),
            rho: self.rho,
            regression: DMatrix::zeros(0, q),
            sigma2_eps: self.sigma_eps.powi(2).max(1e-8),
            sigma2_c: spread(&self.intercepts),
            sigma2_eta: spread(&eta_dev),
            lambda1: 1.0,
            lambda2: 1.0,
        })
    }

    /// Noise-free mean curve of subject `i` at `times`.
    pub fn mean_curve(&self, i: usize, times: &[f64]) -> Result<Vec<f64>> {
        model::mean_curve(&self.state()?, i, times, &self.model_spec()?)
    }

    /// True warp of subject `i` at `times`.
    pub fn warp_on(&self, i: usize, times: &[f64]) -> Result<Vec<f64>> {
        let spec = self.model_spec()?;
        let phi = warp::WarpCoefficients::new(self.phi[i].clone())?;
        times.iter().map(|&t| warp::warp_time(&spec.warp, &phi, t)).collect()
    }
}

/// `Σ (f − f̂)² / Σ f²`.
pub fn rmise(f_true: &[f64], f_hat: &[f64]) -> Result<f64> {
    if f_true.len() != f_hat.len() || f_true.is_empty() {
        return Err(Error::invalid("R-MISE needs two non-empty vectors of equal length"));
    }
    let den: f64 = f_true.iter().map(|f| f * f).sum();
    if den == 0.0 {
        return Err(Error::Degenerate("true function is identically zero".into()));
    }
    let num: f64 = f_true.iter().zip(f_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / den)
}

/// `(f − mean(f)) / sd(f)` with the `n − 1` divisor.
pub fn standardize_shape(f: &[f64]) -> Result<Vec<f64>> {
    if f.len() < 2 {
        return Err(Error::invalid("standardization needs at least two values"));
    }
    let m = stats::mean(f);
    let sd = stats::sample_sd(f);
    if !(sd > 0.0) {
        return Err(Error::Degenerate("cannot standardize a constant function".into()));
    }
    Ok(f.iter().map(|x| (x - m) / sd).collect())
}

/// Relative threshold below which the largest log-likelihood gap is not
/// considered a mode change.
pub const MODE_GAP_FRACTION: f64 = 0.05;

/// Indices (ascending) of runs in the high-likelihood mode.
///
/// Runs are ranked by median log-likelihood; the cut falls at the largest
/// consecutive drop, searched only among cuts that keep a majority of runs.
/// If that drop is below [`MODE_GAP_FRACTION`] of the total range, every run
/// is retained.
pub fn mode_filter(median_logliks: &[f64]) -> Vec<usize> {
    let n = median_logliks.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| median_logliks[b].total_cmp(&median_logliks[a]).then(a.cmp(&b)));
    if n < 2 {
        return order;
    }
    let sorted: Vec<f64> = order.iter().map(|&i| median_logliks[i]).collect();
    let range = sorted[0] - sorted[n - 1];
    let min_keep = n.div_ceil(2);
    let mut best = (0.0, n);
    for keep in min_keep..n {
        let drop = sorted[keep - 1] - sorted[keep];
        if drop > best.0 {
            best = (drop, keep);
        }
    }
    let keep = if range > 0.0 && best.0 >= MODE_GAP_FRACTION * range { best.1 } else { n };
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// Piecewise-linear interpolation of `(xs, ys)` at `t`, constant beyond
/// the end points. `xs` must be non-decreasing.
pub fn interpolate(xs: &[f64], ys: &[f64], t: f64) -> f64 {
    let n = xs.len();
    if t <= xs[0] {
        return ys[0];
    }
    if t >= xs[n - 1] {
        return ys[n - 1];
    }
    let j = xs.partition_point(|&x| x <= t);
    let (x0, x1) = (xs[j - 1], xs[j]);
    if x1 == x0 {
        return ys[j];
    }
    let w = (t - x0) / (x1 - x0);
    ys[j - 1] + w * (ys[j] - ys[j - 1])
}

/// Average pairwise L² distance between curves given as `(times, values)`,
/// each interpolated onto `grid` and integrated by the trapezoid rule.
pub fn mean_pairwise_l2(curves: &[(Vec<f64>, Vec<f64>)], grid: &[f64]) -> Result<f64> {
    if curves.len() < 2 || grid.len() < 2 {
        return Err(Error::invalid("pairwise distances need two curves and two grid points"));
    }
    let on_grid: Vec<Vec<f64>> = curves.iter().map(|(x, y)| grid.iter().map(|&t| interpolate(x, y, t)).collect()).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..on_grid.len() {
        for b in a + 1..on_grid.len() {
            let d2: Vec<f64> = on_grid[a].iter().zip(&on_grid[b]).map(|(u, v)| (u - v) * (u - v)).collect();
            let integral: f64 = (1..grid.len()).map(|j| 0.5 * (d2[j] + d2[j - 1]) * (grid[j] - grid[j - 1])).sum();
            total += integral.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Recovery metrics of one fit against its generating truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScore {
    /// R-MISE of the standardized shape estimates.
    pub rmise_f1: f64,
    pub rmise_f2: f64,
    /// R-MISE on the original scale.
    pub rmise_f1_raw: f64,
    pub rmise_f2_raw: f64,
    pub rho_median: f64,
    /// Posterior mean of `(ρ − ρ_true)²`.
    pub rho_mse: f64,
    pub median_loglik: f64,
    /// Mean pairwise L² distance between feature-1-labelled curves before
    /// and after registration; `None` with fewer than two such subjects.
    pub spread_raw: Option<f64>,
    pub spread_registered: Option<f64>,
}

/// Number of grid points used for the functional metrics.
pub const SCORE_GRID: usize = 101;

pub fn score_replicate(chain: &crate::sampler::ChainOutput, truth: &GroundTruth, data: &Dataset) -> Result<ReplicateScore> {
    use crate::posterior::{self, Feature};
    let grid = linspace(data.lo, data.hi, SCORE_GRID);
    let mut rm = [0.0; 2];
    let mut raw = [0.0; 2];
    for (k, feature) in [(1, Feature::One), (2, Feature::Two)] {
        let est = posterior::shape_estimate(chain, feature, &grid, 0.95)?.estimate;
        let f = truth.shape_on(k, &grid)?;
        rm[k - 1] = rmise(&standardize_shape(&f)?, &standardize_shape(&est)?)?;
        raw[k - 1] = rmise(&f, &est)?;
    }
    let rhos: Vec<f64> = chain.draws.iter().map(|d| d.rho).collect();
    let rho_mse = rhos.iter().map(|r| (r - truth.rho).powi(2)).sum::<f64>() / rhos.len() as f64;
    let labelled: Vec<usize> = (0..data.len()).filter(|&i| data.subjects[i].label == Label::Feature1).collect();
    let (spread_raw, spread_registered) = if labelled.len() >= 2 {
        let raw: Vec<_> = labelled.iter().map(|&i| (data.subjects[i].times.clone(), data.subjects[i].values.clone())).collect();
        let reg = labelled
            .iter()
            .map(|&i| {
                let s = &data.subjects[i];
                posterior::register_curve(chain, i, &s.times, &s.values, Feature::One)
            })
            .collect::<Result<Vec<_>>>()?;
        (Some(mean_pairwise_l2(&raw, &grid)?), Some(mean_pairwise_l2(&reg, &grid)?))
    } else {
        (None, None)
    };
    Ok(ReplicateScore {
        rmise_f1: rm[0],
        rmise_f2: rm[1],
        rmise_f1_raw: raw[0],
        rmise_f2_raw: raw[1],
        rho_median: stats::median(&rhos),
        rho_mse,
        median_loglik: posterior::median_loglik(chain)?,
        spread_raw,
        spread_registered,
    })
}
