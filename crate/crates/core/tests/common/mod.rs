#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use warpmix::model::{self, PriorTerms};
use warpmix::sampler::Sampler;
use warpmix::stats::{self, batch_means_se, ln_normal, std_normal};
use warpmix::*;

pub fn small_spec() -> ModelSpec {
    ModelSpec::uniform(0.0, 1.0, 5, 1).unwrap()
}

pub fn dataset(n: usize, points: usize, n_cov: usize) -> Dataset {
    let times = basis::linspace(0.0, 1.0, points);
    Dataset {
        lo: 0.0,
        hi: 1.0,
        subjects: (0..n)
            .map(|i| Subject {
                id: format!("s{i}"),
                times: times.clone(),
                values: times.iter().map(|t| (5.0 * t + 0.7 * i as f64).sin() + 0.1 * i as f64).collect(),
                covariates: (0..n_cov).map(|r| ((i * (r + 2)) % 5) as f64 - 2.0 + 0.3 * r as f64).collect(),
                label: Label::Free,
            })
            .collect(),
    }
}

fn state(n: usize, n_cov: usize, spec: &ModelSpec) -> ModelState {
    let k = spec.k();
    let q = spec.q_star();
    let target = spec.identity_target();
    ModelState {
        intercepts: (0..n).map(|i| 0.05 * i as f64 - 0.1).collect(),
        memberships: (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
        eta: DMatrix::from_fn(n, q, |i, j| target.0[j] + 0.4 * ((2 * i + j) as f64).cos()),
        gamma1: DVector::from_fn(k, |j, _| (0.8 * j as f64).sin()),
        gamma2: DVector::from_fn(k, |j, _| 0.3 - 0.08 * j as f64),
        rho: 0.6,
        regression: DMatrix::from_fn(n_cov, q, |r, j| 0.02 * (r as f64 + 1.0) - 0.01 * j as f64),
        sigma2_eps: 0.09,
        sigma2_c: 0.25,
        sigma2_eta: 0.35,
        lambda1: 1.3,
        lambda2: 0.7,
    }
}

pub struct Fixture {
    pub data: Dataset,
    pub spec: ModelSpec,
    pub hp: Hyperparameters,
    pub sampler: Sampler,
    pub state: ModelState,
    pub terms: PriorTerms,
}

pub fn fixture(regression: bool) -> Fixture {
    let n_cov = if regression { 2 } else { 0 };
    let (data, spec) = (dataset(7, 15, n_cov), small_spec());
    let hp = Hyperparameters { a_eps: 2.0, b_eps: 0.3, a_c: 1.5, b_c: 0.4, a_lambda: 2.5, b_lambda: 0.6, ..Default::default() };
    let cfg = ChainConfig { regression, ..Default::default() };
    let mut sampler = Sampler::new(data.clone(), spec.clone(), hp.clone(), cfg).unwrap();
    let state = state(7, n_cov, &spec);
    sampler.sync(&state);
    Fixture { data, spec, hp, sampler, state, terms: PriorTerms { rho_sampled: true, regression } }
}

impl Fixture {
    pub fn log_joint(&self, s: &ModelState) -> f64 {
        model::log_likelihood(s, &self.data, &self.spec).unwrap()
            + model::log_prior(s, &self.data, &self.spec, &self.hp, self.terms).unwrap()
    }
}

/// `max_i |exp((u_i − ln p_i) − (u_0 − ln p_0)) − 1|`.
pub fn proportionality_error(grid: &[f64], log_target: impl Fn(f64) -> f64, ln_density: impl Fn(f64) -> f64) -> f64 {
    let d: Vec<f64> = grid.iter().map(|&x| log_target(x) - ln_density(x)).collect();
    spread(&d)
}

fn spread(d: &[f64]) -> f64 {
    d.iter().map(|v| ((v - d[0]).exp() - 1.0).abs()).fold(0.0, f64::max)
}

fn grid_around(mean: f64, sd: f64) -> Vec<f64> {
    (0..41).map(|k| mean + sd * (k as f64 - 20.0) / 6.0).collect()
}

fn positive_grid(centre: f64) -> Vec<f64> {
    (1..=40).map(|k| centre * k as f64 / 16.0).collect()
}

pub fn intercept_errors(f: &Fixture) -> Vec<(String, f64)> {
    (0..f.state.n_subjects())
        .map(|i| {
            let c = f.sampler.intercept_conditional(&f.state, i);
            let err = proportionality_error(
                &grid_around(c.mean, c.var.sqrt()),
                |x| {
                    let mut s = f.state.clone();
                    s.intercepts[i] = x;
                    f.log_joint(&s)
                },
                |x| ln_normal(x, c.mean, c.var),
            );
            (format!("c_{i}"), err)
        })
        .collect()
}

pub fn variance_errors(f: &Fixture) -> Vec<(String, f64)> {
    let v = f.sampler.variance_conditionals(&f.state);
    let cases: [(&str, _, fn(&mut ModelState, f64)); 5] = [
        ("sigma2_eps", v.sigma2_eps, |s, x| s.sigma2_eps = x),
        ("sigma2_c", v.sigma2_c, |s, x| s.sigma2_c = x),
        ("sigma2_eta", v.sigma2_eta, |s, x| s.sigma2_eta = x),
        ("lambda1", v.lambda1, |s, x| s.lambda1 = x),
        ("lambda2", v.lambda2, |s, x| s.lambda2 = x),
    ];
    cases
        .into_iter()
        .map(|(name, cond, set)| {
            let err = proportionality_error(
                &positive_grid(cond.scale / (cond.shape + 1.0)),
                |x| {
                    let mut s = f.state.clone();
                    set(&mut s, x);
                    f.log_joint(&s)
                },
                |x| cond.ln_density(x),
            );
            (name.to_string(), err)
        })
        .collect()
}

/// Conditional of the coordinates `sub` of `N(mean, precision⁻¹)` given the
/// remaining coordinates at `x`: returns (mean, precision) of the block.
pub fn gaussian_block(
    mean: &DVector<f64>,
    precision: &DMatrix<f64>,
    x: &DVector<f64>,
    sub: &[usize],
) -> (DVector<f64>, DMatrix<f64>) {
    let rest: Vec<usize> = (0..mean.len()).filter(|j| !sub.contains(j)).collect();
    let p_ss = DMatrix::from_fn(sub.len(), sub.len(), |a, b| precision[(sub[a], sub[b])]);
    let shift = DVector::from_fn(sub.len(), |a, _| {
        rest.iter().map(|&r| precision[(sub[a], r)] * (x[r] - mean[r])).sum::<f64>()
    });
    let m_sub = DVector::from_fn(sub.len(), |a, _| mean[sub[a]]);
    let cond_mean = m_sub - p_ss.clone().try_inverse().unwrap() * shift;
    (cond_mean, p_ss)
}

fn ln_mvn(x: &DVector<f64>, mean: &DVector<f64>, precision: &DMatrix<f64>) -> f64 {
    let d = x - mean;
    let ln_det = precision.clone().cholesky().unwrap().l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * stats::LN_2PI - ln_det + (d.transpose() * precision * &d)[(0, 0)])
}

fn stacked(s: &ModelState) -> DVector<f64> {
    let k = s.gamma1.len();
    DVector::from_fn(2 * k, |j, _| if j < k { s.gamma1[j] } else { s.gamma2[j - k] })
}

fn unstack(s: &mut ModelState, j: usize, v: f64) {
    let k = s.gamma1.len();
    if j < k {
        s.gamma1[j] = v;
    } else {
        s.gamma2[j - k] = v;
    }
}

/// One-dimensional slices through every shape coefficient.
pub fn gamma_slice_errors(f: &Fixture) -> Vec<(String, f64)> {
    let cond = f.sampler.gamma_conditional(&f.state).unwrap();
    let x = stacked(&f.state);
    (0..x.len())
        .map(|j| {
            let (m, p) = gaussian_block(&cond.mean, &cond.precision, &x, &[j]);
            let sd = 1.0 / p[(0, 0)].sqrt();
            let err = proportionality_error(
                &grid_around(m[0], sd),
                |v| {
                    let mut s = f.state.clone();
                    unstack(&mut s, j, v);
                    f.log_joint(&s)
                },
                |v| ln_normal(v, m[0], sd * sd),
            );
            (format!("gamma[{j}]"), err)
        })
        .collect()
}

/// A two-dimensional slice coupling one coefficient of each shape.
pub fn gamma_plane_error(f: &Fixture) -> f64 {
    let cond = f.sampler.gamma_conditional(&f.state).unwrap();
    let x = stacked(&f.state);
    let k = f.spec.k();
    let sub = [2, k + 2];
    let (m, p) = gaussian_block(&cond.mean, &cond.precision, &x, &sub);
    let sd: Vec<f64> = (0..2).map(|a| 1.0 / p[(a, a)].sqrt()).collect();
    let mut d = Vec::new();
    for a in -5..=5 {
        for b in -5..=5 {
            let v = DVector::from_vec(vec![m[0] + 0.6 * a as f64 * sd[0], m[1] + 0.6 * b as f64 * sd[1]]);
            let mut s = f.state.clone();
            unstack(&mut s, sub[0], v[0]);
            unstack(&mut s, sub[1], v[1]);
            d.push(f.log_joint(&s) - ln_mvn(&v, &m, &p));
        }
    }
    spread(&d)
}

pub fn regression_errors(f: &Fixture) -> Vec<(String, f64)> {
    let cond = f.sampler.regression_conditional(&f.state);
    let (l, q) = cond.mean.shape();
    let col_prec = (&cond.row_cov * f.state.sigma2_eta).try_inverse().unwrap();
    let mut out = Vec::new();
    for r in 0..l {
        for j in 0..q {
            let col_mean = cond.mean.column(j).into_owned();
            let x = f.state.regression.column(j).into_owned();
            let (m, p) = gaussian_block(&col_mean, &col_prec, &x, &[r]);
            let sd = 1.0 / p[(0, 0)].sqrt();
            let err = proportionality_error(
                &grid_around(m[0], sd),
                |v| {
                    let mut s = f.state.clone();
                    s.regression[(r, j)] = v;
                    f.log_joint(&s)
                },
                |v| ln_normal(v, m[0], sd * sd),
            );
            out.push((format!("B[{r},{j}]"), err));
        }
    }
    out
}

/// Every grid-proportionality check, labelled.
pub fn all_conditional_errors() -> Vec<(String, f64)> {
    let plain = fixture(false);
    let reg = fixture(true);
    let mut out = intercept_errors(&plain);
    out.extend(variance_errors(&plain));
    out.extend(variance_errors(&reg).into_iter().map(|(n, e)| (format!("{n} (regression)"), e)));
    out.extend(gamma_slice_errors(&plain));
    out.push(("gamma plane".into(), gamma_plane_error(&plain)));
    out.extend(regression_errors(&reg));
    out
}

pub struct GewekeLine {
    pub name: &'static str,
    pub mean: f64,
    pub prior_mean: f64,
    pub se: f64,
}

impl GewekeLine {
    pub fn z(&self) -> f64 {
        (self.mean - self.prior_mean) / self.se
    }
}

fn regenerate(sampler: &mut Sampler, state: &ModelState, rng: &mut ChaCha8Rng) {
    let spec = sampler.spec().clone();
    for i in 0..state.n_subjects() {
        let times = sampler.data().subjects[i].times.clone();
        let mean = model::mean_curve(state, i, &times, &spec).unwrap();
        let sd = state.sigma2_eps.sqrt();
        for (y, m) in sampler.values_mut(i).iter_mut().zip(mean) {
            *y = m + sd * std_normal(rng);
        }
    }
}

/// Successive-conditional simulation on a small reduced model (no
/// projections, frozen proposal scales): alternate one sweep with a fresh
/// draw of the data given the parameters. Inverse-gamma shapes are large
/// enough for the tracked second moments to have finite variance.
pub fn geweke(burn: usize, cycles: usize, n_batches: usize, seed: u64) -> Vec<GewekeLine> {
    let spec = small_spec();
    let mut data = dataset(5, 10, 0);
    data.subjects.iter_mut().for_each(|s| s.values.iter_mut().for_each(|v| *v = 0.0));
    let hp = Hyperparameters {
        a_eps: 6.0,
        b_eps: 5.0,
        a_c: 6.0,
        b_c: 2.5,
        a_lambda: 6.0,
        b_lambda: 2.5,
        a_eta: 6.0,
        b_eta: 2.5,
        a_rho: 4.0,
        b_rho: 40.0,
        alpha: 0.5,
        dirichlet_scale: 20.0,
        ..Default::default()
    };
    let cfg = ChainConfig { project_constraints: false, initial_tau: 0.05, seed, ..Default::default() };
    let mut sampler = Sampler::new(data, spec.clone(), hp.clone(), cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut state = sampler.initial_state().unwrap();
    regenerate(&mut sampler, &state, &mut rng);

    let ig_mean = |a: f64, b: f64| b / (a - 1.0);
    let target = spec.identity_target().0;
    let tracked: [(&'static str, f64, fn(&ModelState) -> f64); 12] = [
        ("c_1", 0.0, |s| s.intercepts[0]),
        ("sigma2_eps", ig_mean(hp.a_eps, hp.b_eps), |s| s.sigma2_eps),
        ("pi_1", 0.5, |s| s.memberships[0]),
        ("gamma1_2", 0.0, |s| s.gamma1[2]),
        ("gamma2_6", 0.0, |s| s.gamma2[6]),
        ("eta_11", target[0], |s| s.eta[(0, 0)]),
        ("rho", hp.a_rho / hp.b_rho, |s| s.rho),
        ("sigma2_c", ig_mean(hp.a_c, hp.b_c), |s| s.sigma2_c),
        ("sigma2_eta", ig_mean(hp.a_eta, hp.b_eta), |s| s.sigma2_eta),
        ("lambda1", ig_mean(hp.a_lambda, hp.b_lambda), |s| s.lambda1),
        ("c_1^2", ig_mean(hp.a_c, hp.b_c), |s| s.intercepts[0].powi(2)),
        (
            "sigma2_eps^2",
            hp.b_eps.powi(2) / ((hp.a_eps - 1.0) * (hp.a_eps - 2.0)),
            |s| s.sigma2_eps.powi(2),
        ),
    ];
    let mut traces = vec![Vec::with_capacity(cycles); tracked.len()];
    for it in 1..=burn + cycles {
        sampler.sweep(&mut state, it, false).unwrap();
        regenerate(&mut sampler, &state, &mut rng);
        if it > burn {
            for (t, (_, _, get)) in traces.iter_mut().zip(&tracked) {
                t.push(get(&state));
            }
        }
    }
    tracked
        .iter()
        .zip(&traces)
        .map(|(&(name, prior_mean, _), xs)| GewekeLine {
            name,
            mean: stats::mean(xs),
            prior_mean,
            se: batch_means_se(xs, n_batches),
        })
        .collect()
}
