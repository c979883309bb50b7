//! Summaries of retained draws: fitted curves, warps, registration, shape
//! bands and the peak-location distribution.

use crate::error::{Error, Result};
use crate::model::{self, ModelState};
use crate::sampler::ChainOutput;
use crate::stats;
use crate::warp;

/// Pointwise posterior median and equal-tailed band on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSummary {
    pub grid: Vec<f64>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

impl FunctionalSummary {
    /// Summarize `curves[draw][point]` pointwise.
    pub fn from_draws(grid: &[f64], curves: &[Vec<f64>], level: f64) -> Result<Self> {
        check_level(level)?;
        if curves.is_empty() {
            return Err(Error::invalid("no draws to summarize"));
        }
        let tail = (1.0 - level) / 2.0;
        let mut out = Self {
            grid: grid.to_vec(),
            median: Vec::with_capacity(grid.len()),
            lower: Vec::with_capacity(grid.len()),
            upper: Vec::with_capacity(grid.len()),
            level,
        };
        let mut column = Vec::with_capacity(curves.len());
        for j in 0..grid.len() {
            column.clear();
            column.extend(curves.iter().map(|c| c[j]));
            column.sort_by(f64::total_cmp);
            out.median.push(stats::quantile_sorted(&column, 0.5));
            out.lower.push(stats::quantile_sorted(&column, tail));
            out.upper.push(stats::quantile_sorted(&column, 1.0 - tail));
        }
        Ok(out)
    }

    pub fn width(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }

    /// Fraction of grid points where `truth` lies inside the band.
    pub fn coverage(&self, truth: &[f64]) -> f64 {
        let inside = truth
            .iter()
            .enumerate()
            .filter(|&(j, &v)| self.lower[j] <= v && v <= self.upper[j])
            .count();
        inside as f64 / truth.len() as f64
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("credible level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

fn check_chain(chain: &ChainOutput) -> Result<()> {
    if chain.draws.is_empty() {
        return Err(Error::invalid("chain has no retained draws"));
    }
    Ok(())
}

fn check_subject(chain: &ChainOutput, i: usize) -> Result<()> {
    check_chain(chain)?;
    if i >= chain.draws[0].n_subjects() {
        return Err(Error::invalid(format!("subject index {i} out of range")));
    }
    Ok(())
}

/// Which feature's time scale a warp refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    One,
    Two,
}

impl Feature {
    pub fn from_index(k: usize) -> Result<Self> {
        match k {
            1 => Ok(Feature::One),
            2 => Ok(Feature::Two),
            _ => Err(Error::invalid(format!("feature must be 1 or 2, got {k}"))),
        }
    }
}

/// Posterior of subject `i`'s mean curve at `times`.
pub fn fitted_curve(chain: &ChainOutput, i: usize, times: &[f64], level: f64) -> Result<FunctionalSummary> {
    check_subject(chain, i)?;
    let curves = chain
        .draws
        .iter()
        .map(|d| model::mean_curve(d, i, times, &chain.spec))
        .collect::<Result<Vec<_>>>()?;
    FunctionalSummary::from_draws(times, &curves, level)
}

fn draw_warp(chain: &ChainOutput, draw: &ModelState, i: usize, times: &[f64], feature: Feature) -> Result<Vec<f64>> {
    let spec = &chain.spec;
    let phi = warp::WarpCoefficients::new(draw.warp_coefficients(i, spec))?;
    times
        .iter()
        .map(|&t| {
            let h = warp::warp_time(&spec.warp, &phi, t)?;
            match feature {
                Feature::One => Ok(h),
                Feature::Two => Ok(warp::scale_warp(h, t, draw.rho)?.clamp(spec.lo(), spec.hi())),
            }
        })
        .collect()
}

/// Posterior of subject `i`'s warp on the time scale of `feature`.
pub fn warp_summary_for(
    chain: &ChainOutput,
    i: usize,
    times: &[f64],
    level: f64,
    feature: Feature,
) -> Result<FunctionalSummary> {
    check_subject(chain, i)?;
    let curves = chain
        .draws
        .iter()
        .map(|d| draw_warp(chain, d, i, times, feature))
        .collect::<Result<Vec<_>>>()?;
    FunctionalSummary::from_draws(times, &curves, level)
}

/// Posterior of subject `i`'s warp `hᵢ`.
pub fn warp_summary(chain: &ChainOutput, i: usize, times: &[f64], level: f64) -> Result<FunctionalSummary> {
    warp_summary_for(chain, i, times, level, Feature::One)
}

/// Move subject `i`'s observations to the median warped times; values are
/// returned unchanged. Feature-1 registration yields strictly increasing
/// times; the feature-2 variant may tie or reorder when `ρ > 1`.
pub fn register_curve(
    chain: &ChainOutput,
    i: usize,
    times: &[f64],
    values: &[f64],
    feature: Feature,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if times.len() != values.len() {
        return Err(Error::invalid("times and values differ in length"));
    }
    let s = warp_summary_for(chain, i, times, 0.5, feature)?;
    Ok((s.median, values.to_vec()))
}

/// Shape posterior: plug-in curve from median coefficients and a pointwise
/// band from per-draw curves.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSummary {
    pub estimate: Vec<f64>,
    pub band: FunctionalSummary,
}

fn shape_coefficients(draw: &ModelState, feature: Feature) -> &[f64] {
    match feature {
        Feature::One => draw.gamma1.as_slice(),
        Feature::Two => draw.gamma2.as_slice(),
    }
}

pub fn shape_estimate(chain: &ChainOutput, feature: Feature, grid: &[f64], level: f64) -> Result<ShapeSummary> {
    check_chain(chain)?;
    let kv = &chain.spec.shape;
    let rows = grid.iter().map(|&t| kv.eval_row(t)).collect::<Result<Vec<_>>>()?;
    let k = kv.dim();
    let median_coef: Vec<f64> = (0..k)
        .map(|j| stats::median(&chain.draws.iter().map(|d| shape_coefficients(d, feature)[j]).collect::<Vec<_>>()))
        .collect();
    let estimate = rows.iter().map(|r| r.dot(&median_coef)).collect();
    let curves: Vec<Vec<f64>> = chain
        .draws
        .iter()
        .map(|d| {
            let g = shape_coefficients(d, feature);
            rows.iter().map(|r| r.dot(g)).collect()
        })
        .collect();
    Ok(ShapeSummary { estimate, band: FunctionalSummary::from_draws(grid, &curves, level)? })
}

/// Per-draw location of the maximum of `f₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct PafDistribution {
    pub values: Vec<f64>,
    /// Draws whose maximum is attained at more than one grid point.
    pub flat_draws: usize,
}

/// Relative tolerance under which two grid values count as the same maximum.
pub const FLAT_TOLERANCE: f64 = 1e-12;

pub fn paf_distribution(chain: &ChainOutput, grid: &[f64]) -> Result<PafDistribution> {
    if grid.is_empty() {
        return Err(Error::invalid("empty grid"));
    }
    let kv = &chain.spec.shape;
    let rows = grid.iter().map(|&t| kv.eval_row(t)).collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(chain.draws.len());
    let mut flat_draws = 0;
    for d in &chain.draws {
        let g = d.gamma1.as_slice();
        let f: Vec<f64> = rows.iter().map(|r| r.dot(g)).collect();
        let (best, max) = f
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        let tol = FLAT_TOLERANCE * max.abs().max(1.0);
        let first = f.iter().position(|&v| max - v <= tol).unwrap_or(best);
        if f.iter().enumerate().any(|(j, &v)| j != first && max - v <= tol) {
            flat_draws += 1;
        }
        values.push(grid[first]);
    }
    Ok(PafDistribution { values, flat_draws })
}

/// Median of the retained log-likelihood trace, used for mode filtering.
pub fn median_loglik(chain: &ChainOutput) -> Result<f64> {
    if chain.loglik.is_empty() {
        return Err(Error::invalid("chain has no retained draws"));
    }
    Ok(stats::median(&chain.loglik))
}
