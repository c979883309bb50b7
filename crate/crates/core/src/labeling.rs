//! Preprocessing of spectra and heuristic choice of semi-supervision labels.
//!
//! Subjects with the most prominent peak are labelled feature 1; subjects
//! whose curve is closest to a straight line inside a band are labelled
//! feature 2.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::model::{Dataset, Label};

/// Elementwise `ln(y + 1)`.
pub fn log_transform(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = values.iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::data(format!("log transform needs non-negative values, got {v}")));
    }
    Ok(values.iter().map(|v| v.ln_1p()).collect())
}

/// Prominence of the most prominent interior local maximum, or 0 if the
/// curve has none.
///
/// The base of a peak is the higher of the two minima reached walking left
/// and right until the curve exceeds the peak or ends.
pub fn peak_prominence(values: &[f64]) -> f64 {
    let n = values.len();
    let mut best: f64 = 0.0;
    let mut j = 1;
    while j + 1 < n {
        // Treat a plateau as one candidate starting at `j`.
        let mut end = j;
        while end + 1 < n && values[end + 1] == values[j] {
            end += 1;
        }
        let y = values[j];
        if end + 1 < n && values[j - 1] < y && values[end + 1] < y {
            let mut left_min = y;
            for &v in values[..j].iter().rev() {
                if v > y {
                    break;
                }
                left_min = left_min.min(v);
            }
            let mut right_min = y;
            for &v in &values[end + 1..] {
                if v > y {
                    break;
                }
                right_min = right_min.min(v);
            }
            best = best.max(y - left_min.max(right_min));
        }
        j = end + 1;
    }
    best
}

/// Residual sum of squares of a least-squares line fitted to the points with
/// `band.0 <= t <= band.1`.
pub fn band_rss(times: &[f64], values: &[f64], band: (f64, f64)) -> Result<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= band.0 && **t <= band.1)
        .map(|(&t, &y)| (t, y))
        .collect();
    if pts.len() < 3 {
        return Err(Error::data(format!(
            "band [{}, {}] holds {} observations; at least 3 are needed",
            band.0,
            band.1,
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(pts.iter().map(|p| (p.1 - ym - slope * (p.0 - tm)).powi(2)).sum())
}

/// Per-subject score used in a selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub id: String,
    pub value: f64,
}

fn ranked(mut scores: Vec<Score>, descending: bool) -> Vec<Score> {
    scores.sort_by(|a, b| {
        let ord = a.value.total_cmp(&b.value);
        let ord = if descending { ord.reverse() } else { ord };
        match ord {
            Ordering::Equal => a.id.cmp(&b.id),
            o => o,
        }
    });
    scores
}

pub fn peak_scores(data: &Dataset) -> Vec<Score> {
    let scores = data
        .subjects
        .iter()
        .map(|s| Score { id: s.id.clone(), value: peak_prominence(&s.values) })
        .collect();
    ranked(scores, true)
}

pub fn noise_scores(data: &Dataset, band: (f64, f64)) -> Result<Vec<Score>> {
    if !(band.0 < band.1) || band.1 < data.lo || band.0 > data.hi {
        return Err(Error::invalid(format!("band [{}, {}] does not overlap the domain", band.0, band.1)));
    }
    let scores = data
        .subjects
        .iter()
        .map(|s| Ok(Score { id: s.id.clone(), value: band_rss(&s.times, &s.values, band)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(ranked(scores, false))
}

/// The `count` subjects with the largest peak prominence.
pub fn select_peak_labels(data: &Dataset, count: usize) -> Vec<String> {
    peak_scores(data).into_iter().take(count).map(|s| s.id).collect()
}

/// The `count` subjects with the smallest in-band linear-fit RSS.
pub fn select_noise_labels(data: &Dataset, count: usize, band: (f64, f64)) -> Result<Vec<String>> {
    Ok(noise_scores(data, band)?.into_iter().take(count).map(|s| s.id).collect())
}

/// Disjoint label sets with the scores that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPlan {
    pub feature1_ids: Vec<String>,
    pub feature2_ids: Vec<String>,
    pub peak_scores: Vec<Score>,
    pub noise_scores: Vec<Score>,
    pub labeled_fraction: f64,
}

impl LabelPlan {
    /// Peak selection first; the noise selection skips subjects already
    /// chosen for feature 1.
    pub fn heuristic(data: &Dataset, peak_count: usize, noise_count: usize, band: (f64, f64)) -> Result<Self> {
        let peak = peak_scores(data);
        let noise = if noise_count > 0 { noise_scores(data, band)? } else { Vec::new() };
        let feature1_ids: Vec<String> = peak.iter().take(peak_count).map(|s| s.id.clone()).collect();
        let taken: HashSet<&str> = feature1_ids.iter().map(String::as_str).collect();
        let feature2_ids: Vec<String> = noise
            .iter()
            .filter(|s| !taken.contains(s.id.as_str()))
            .take(noise_count)
            .map(|s| s.id.clone())
            .collect();
        let labeled_fraction = (feature1_ids.len() + feature2_ids.len()) as f64 / data.len().max(1) as f64;
        Ok(Self { feature1_ids, feature2_ids, peak_scores: peak, noise_scores: noise, labeled_fraction })
    }

    /// Explicit id lists; they must be disjoint and present in `data`.
    pub fn explicit(data: &Dataset, feature1: Vec<String>, feature2: Vec<String>) -> Result<Self> {
        let known: HashSet<&str> = data.subjects.iter().map(|s| s.id.as_str()).collect();
        for id in feature1.iter().chain(&feature2) {
            if !known.contains(id.as_str()) {
                return Err(Error::data(format!("labelled subject {id} is not in the data")));
            }
        }
        if feature1.iter().any(|id| feature2.contains(id)) {
            return Err(Error::invalid("a subject is labelled with both features"));
        }
        let labeled_fraction = (feature1.len() + feature2.len()) as f64 / data.len().max(1) as f64;
        Ok(Self {
            feature1_ids: feature1,
            feature2_ids: feature2,
            peak_scores: Vec::new(),
            noise_scores: Vec::new(),
            labeled_fraction,
        })
    }

    /// Overwrite every subject's label from the plan.
    pub fn apply(&self, data: &mut Dataset) {
        for s in &mut data.subjects {
            s.label = if self.feature1_ids.contains(&s.id) {
                Label::Feature1
            } else if self.feature2_ids.contains(&s.id) {
                Label::Feature2
            } else {
                Label::Free
            };
        }
    }
}
