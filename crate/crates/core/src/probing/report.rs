// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat rows shared by the layer-sweep and memorisation reports.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::probing::{ProbeReport, SweepRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: usize,
    /// Number of principal components, or `All`.
    pub k: String,
    pub accuracy: Option<f64>,
    pub std_error: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub converged: Option<bool>,
}

impl From<&SweepRow> for ReportRow {
    fn from(r: &SweepRow) -> Self {
        Self {
            layer: r.layer,
            k: r.k.map_or_else(|| "All".to_string(), |k| k.to_string()),
            accuracy: r.accuracy,
            std_error: r.std_error,
            n_train: r.n_train,
            n_test: r.n_test,
            converged: r.converged,
        }
    }
}

impl ProbeReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.layers
            .iter()
            .map(|l| ReportRow {
                layer: l.layer,
                k: "All".into(),
                accuracy: Some(l.accuracy),
                std_error: Some(l.std_error),
                n_train: l.n_train,
                n_test: l.n_test,
                converged: Some(l.converged),
            })
            .collect()
    }
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}
