// SPDX-License-Identifier: MIT OR Apache-2.0

//! Least-squares fits of best probe accuracy against model size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    /// `acc = a + b ln(size)`
    Logarithmic,
    /// `acc = a + b size`
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub kind: ScalingKind,
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
    /// Accuracies had zero variance; `r_squared` is reported as 1.
    pub degenerate: bool,
}

impl ScalingFit {
    pub fn predict(&self, size: f64) -> f64 {
        let x = match self.kind {
            ScalingKind::Logarithmic => size.ln(),
            ScalingKind::Linear => size,
        };
        self.intercept + self.slope * x
    }
}

pub fn fit_scaling(sizes: &[f64], accuracies: &[f64], kind: ScalingKind) -> Result<ScalingFit> {
    if sizes.len() != accuracies.len() {
        return Err(Error::dims("accuracy count", sizes.len(), accuracies.len()));
    }
    let mut distinct = sizes.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("scaling fit needs at least two distinct sizes"));
    }
    if kind == ScalingKind::Logarithmic && sizes.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid("logarithmic fit needs positive sizes"));
    }
    let xs: Vec<f64> = sizes
        .iter()
        .map(|&s| match kind {
            ScalingKind::Logarithmic => s.ln(),
            ScalingKind::Linear => s,
        })
        .collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = accuracies.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(accuracies).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = accuracies.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(accuracies)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let degenerate = accuracies.iter().all(|&a| a == accuracies[0]);
    let r_squared = if degenerate { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(ScalingFit {
        kind,
        intercept,
        slope,
        r_squared,
        degenerate,
    })
}
