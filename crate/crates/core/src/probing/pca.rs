// SPDX-License-Identifier: MIT OR Apache-2.0

//! Principal components and the top-k probe sweep.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cache::ProbingDataset;
use crate::error::{Error, Result};
use crate::probing::{
    column_mean, eval_probe, pick, rows, std_error, stratified_split, train_probe, ProbeOptions,
};
use crate::scalar::Scalar;

pub const DEFAULT_K_LIST: [usize; 4] = [2, 10, 100, 1000];

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Array1<f64>,
    /// Row `i` is the `i`-th component (unit norm).
    pub components: Array2<f64>,
    /// Non-increasing.
    pub explained_variance: Vec<f64>,
}

/// Eigendecomposition of the sample covariance of `x`.
pub fn fit_pca<T: Scalar>(x: &Array2<T>) -> Result<PcaBasis> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two rows"));
    }
    let mean = column_mean(x);
    let centered = DMatrix::from_fn(n, d, |i, j| x[[i, j]].as_f64() - mean[j]);
    if centered.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("PCA input rows are all equal"));
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Array2::<f64>::zeros((d, d));
    for (row, &k) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        // Sign convention: largest-magnitude coordinate is positive.
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[row, j]] = sign * col[j];
        }
    }
    let explained_variance = order
        .iter()
        .map(|&k| eig.eigenvalues[k].max(0.0))
        .collect();
    Ok(PcaBasis {
        mean,
        components,
        explained_variance,
    })
}

/// `(x - mean) · components[..k]^T`.
pub fn project<T: Scalar>(x: &Array2<T>, basis: &PcaBasis, k: usize) -> Result<Array2<f64>> {
    let d = basis.components.ncols();
    if x.ncols() != d {
        return Err(Error::dims("PCA input width", d, x.ncols()));
    }
    if k > d {
        return Err(Error::invalid(format!("k = {k} exceeds dimension {d}")));
    }
    let centered = Array2::from_shape_fn(x.dim(), |(i, j)| x[[i, j]].as_f64() - basis.mean[j]);
    Ok(centered.dot(&basis.components.slice(ndarray::s![..k, ..]).t()))
}

/// One row of the memorisation table; `k == None` is the all-components
/// baseline trained on the raw activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub k: Option<usize>,
    pub accuracy: Option<f64>,
    pub std_error: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub converged: Option<bool>,
    pub note: Option<String>,
}

/// Retrains probes on the top-k principal components of every layer.
///
/// PCA is fitted on the training split only. Values of `k` above the
/// activation width are recorded as not applicable.
pub fn memorisation_sweep(
    ds: &ProbingDataset,
    k_list: &[usize],
    split_seed: u64,
    opts: &ProbeOptions,
) -> Result<Vec<SweepRow>> {
    let split = stratified_split(&ds.labels, split_seed)?;
    let z_train = pick(&ds.labels, &split.train);
    let z_test = pick(&ds.labels, &split.test);
    let (n_train, n_test) = (split.train.len(), split.test.len());
    let mut out = Vec::new();
    for (l, x) in ds.resid.iter().enumerate() {
        let x_train = rows(x, &split.train);
        let x_test = rows(x, &split.test);
        let base = train_probe(x_train.view(), &z_train, opts)?;
        let acc = eval_probe(&base, x_test.view(), &z_test)?;
        out.push(SweepRow {
            layer: l,
            k: None,
            accuracy: Some(acc),
            std_error: Some(std_error(acc, n_test)),
            n_train,
            n_test,
            converged: Some(base.converged),
            note: None,
        });
        let basis = fit_pca(&x_train)?;
        for &k in k_list {
            if k > x.ncols() {
                out.push(SweepRow {
                    layer: l,
                    k: Some(k),
                    accuracy: None,
                    std_error: None,
                    n_train,
                    n_test,
                    converged: None,
                    note: Some(format!("skipped: k exceeds width {}", x.ncols())),
                });
                continue;
            }
            let p_train = project(&x_train, &basis, k)?;
            let p_test = project(&x_test, &basis, k)?;
            let probe = train_probe(p_train.view(), &z_train, opts)?;
            let acc = eval_probe(&probe, p_test.view(), &z_test)?;
            out.push(SweepRow {
                layer: l,
                k: Some(k),
                accuracy: Some(acc),
                std_error: Some(std_error(acc, n_test)),
                n_train,
                n_test,
                converged: Some(probe.converged),
                note: None,
            });
        }
    }
    Ok(out)
}
