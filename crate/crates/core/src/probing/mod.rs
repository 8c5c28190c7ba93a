// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logistic-regression probes, layer sweeps, PCA and scaling fits.

pub mod lbfgs;
mod pca;
mod report;
mod scaling;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::ProbingDataset;
use crate::error::{Error, Result};
use crate::scalar::{softplus, Scalar};

pub use pca::{fit_pca, memorisation_sweep, project, PcaBasis, SweepRow, DEFAULT_K_LIST};
pub use report::{report_csv, ReportRow};
pub use scaling::{fit_scaling, ScalingFit, ScalingKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeOptions {
    /// Inverse L2 strength: the objective is `C * sum(logloss) + |W|^2 / 2`.
    pub c: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            c: 10.0,
            max_iter: 5000,
            seed: 0,
        }
    }
}

/// Linear classifier `sigma(W . a + b)` on one layer's activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub w: Vec<f64>,
    pub b: f64,
    pub layer: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl Probe {
    pub fn logit<T: Scalar>(&self, x: ArrayView1<T>) -> f64 {
        self.w
            .iter()
            .zip(x.iter())
            .map(|(w, v)| w * v.as_f64())
            .sum::<f64>()
            + self.b
    }

    /// Class 1 when `sigma(logit) >= 0.5`, i.e. `logit >= 0`.
    pub fn predict<T: Scalar>(&self, x: ArrayView1<T>) -> bool {
        self.logit(x) >= 0.0
    }
}

fn check_inputs<T: Scalar>(x: &ArrayView2<T>, z: &[bool]) -> Result<()> {
    if x.nrows() != z.len() {
        return Err(Error::dims("label count", x.nrows(), z.len()));
    }
    for ((r, c), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row: r, col: c });
        }
    }
    Ok(())
}

/// The probe objective `C * sum_i logloss_i + |w|^2 / 2` (bias unpenalised)
/// and its gradient; parameters are `[w.., b]`.
pub fn regularised_loss<T: Scalar>(
    x: ArrayView2<T>,
    z: &[bool],
    c: f64,
    params: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let d = x.ncols();
    let (w, b) = (&params[..d], params[d]);
    let mut loss = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let mut g = grad;
    if let Some(g) = g.as_deref_mut() {
        g[..d].copy_from_slice(w);
        g[d] = 0.0;
    }
    for (row, &label) in x.outer_iter().zip(z) {
        let m = row
            .iter()
            .zip(w)
            .map(|(v, w)| v.as_f64() * w)
            .sum::<f64>()
            + b;
        let y = if label { 1.0 } else { -1.0 };
        loss += c * softplus(-y * m);
        if let Some(g) = g.as_deref_mut() {
            // d/dm softplus(-y m) = -y * sigmoid(-y m)
            let coef = -c * y * crate::scalar::sigmoid(-y * m);
            for (gj, v) in g[..d].iter_mut().zip(row.iter()) {
                *gj += coef * v.as_f64();
            }
            g[d] += coef;
        }
    }
    loss
}

/// Fits an L2-regularised logistic-regression probe with L-BFGS.
///
/// Starts from zero, so the result does not depend on `opts.seed`; the seed
/// is kept for the record.
pub fn train_probe<T: Scalar>(
    x: ArrayView2<T>,
    z: &[bool],
    opts: &ProbeOptions,
) -> Result<Probe> {
    check_inputs(&x, z)?;
    let pos = z.iter().filter(|&&v| v).count();
    if pos < 2 || z.len() - pos < 2 {
        return Err(Error::SingleClass);
    }
    let d = x.ncols();
    let result = lbfgs::minimize(
        |p, g| regularised_loss(x, z, opts.c, p, Some(g)),
        vec![0.0; d + 1],
        &lbfgs::LbfgsOptions {
            max_iter: opts.max_iter,
            ..Default::default()
        },
    );
    if !result.f.is_finite() || result.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("probe parameters became non-finite".into()));
    }
    let mut w = result.x;
    let b = w.pop().expect("bias");
    Ok(Probe {
        w,
        b,
        layer: 0,
        iterations: result.iterations,
        converged: result.converged,
    })
}

/// Fraction of rows where the thresholded prediction equals the label.
pub fn eval_probe<T: Scalar>(probe: &Probe, x: ArrayView2<T>, z: &[bool]) -> Result<f64> {
    if x.ncols() != probe.w.len() {
        return Err(Error::dims("probe width", probe.w.len(), x.ncols()));
    }
    if x.nrows() != z.len() {
        return Err(Error::dims("label count", x.nrows(), z.len()));
    }
    if z.is_empty() {
        return Err(Error::invalid("no rows to evaluate"));
    }
    let correct = x
        .outer_iter()
        .zip(z)
        .filter(|(row, &label)| probe.predict(*row) == label)
        .count();
    Ok(correct as f64 / z.len() as f64)
}

/// Stratified train/test split: `test_fraction` of each class (rounded, at
/// least one) goes to the test side. Indices are sorted within each side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

pub const TEST_FRACTION: f64 = 0.2;

pub fn stratified_split(labels: &[bool], seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 3 {
            return Err(Error::invalid(format!(
                "stratified split needs at least 3 items per class, class {} has {}",
                class as u8,
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * TEST_FRACTION).round() as usize).clamp(1, idx.len() - 2);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test, seed })
}

pub(crate) fn rows<T: Scalar>(x: &Array2<T>, idx: &[usize]) -> Array2<T> {
    x.select(Axis(0), idx)
}

pub(crate) fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub accuracy: f64,
    /// Binomial standard error `sqrt(p (1 - p) / n_test)`.
    pub std_error: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub perspective: String,
    pub variation: String,
    pub layers: Vec<LayerResult>,
    pub best_layer: usize,
    pub best_accuracy: f64,
    pub split: String,
    pub split_seed: u64,
    pub c: f64,
    /// Residual activations are read after each block (layer 0: embeddings).
    pub capture_point: String,
    pub warnings: Vec<String>,
}

pub(crate) fn std_error(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n.max(1) as f64).sqrt()
}

/// One probe per residual layer on a shared stratified split.
pub fn layer_sweep(ds: &ProbingDataset, split_seed: u64, opts: &ProbeOptions) -> Result<ProbeReport> {
    let split = stratified_split(&ds.labels, split_seed)?;
    let z_train = pick(&ds.labels, &split.train);
    let z_test = pick(&ds.labels, &split.test);
    let mut layers = Vec::with_capacity(ds.resid.len());
    for (l, x) in ds.resid.iter().enumerate() {
        let mut probe = train_probe(rows(x, &split.train).view(), &z_train, opts)?;
        probe.layer = l;
        let accuracy = eval_probe(&probe, rows(x, &split.test).view(), &z_test)?;
        layers.push(LayerResult {
            layer: l,
            accuracy,
            std_error: std_error(accuracy, split.test.len()),
            n_train: split.train.len(),
            n_test: split.test.len(),
            converged: probe.converged,
        });
    }
    let best = layers
        .iter()
        .fold(&layers[0], |b, r| if r.accuracy > b.accuracy { r } else { b });
    let mut warnings = Vec::new();
    if ds.is_imbalanced() {
        warnings.push(format!(
            "labels are imbalanced: {:.1}% positive",
            100.0 * ds.positive_rate()
        ));
    }
    Ok(ProbeReport {
        perspective: ds.perspective.as_str().into(),
        variation: ds.variation.as_str().into(),
        best_layer: best.layer,
        best_accuracy: best.accuracy,
        layers,
        split: format!("stratified {:.0}/{:.0}", 100.0 * (1.0 - TEST_FRACTION), 100.0 * TEST_FRACTION),
        split_seed,
        c: opts.c,
        capture_point: "post-block".into(),
        warnings,
    })
}

/// Mean of the columns.
pub(crate) fn column_mean<T: Scalar>(x: &Array2<T>) -> Array1<f64> {
    let n = x.nrows() as f64;
    let mut m = Array1::<f64>::zeros(x.ncols());
    for row in x.outer_iter() {
        for (acc, v) in m.iter_mut().zip(row.iter()) {
            *acc += v.as_f64();
        }
    }
    m / n
}
