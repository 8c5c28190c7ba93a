// SPDX-License-Identifier: MIT OR Apache-2.0

//! Final-token activations of probing prompts, per layer and per head.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorArchive};
use crate::error::{Error, Result};
use crate::model::{forward_with_hooks, ModelWeights};
use crate::scalar::Scalar;
use crate::taskgen::{probe_prompt, BeliefItem, Perspective, VariationKind};
use crate::tokenizer::{Vocab, BOS_ID};

/// Labelled activation matrices for one perspective and variation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingDataset {
    /// `resid[l]` is `n_items × d_model`, `l = 0..=n_layers`.
    pub resid: Vec<Array2<f32>>,
    /// `heads[l][h]` is `n_items × d_head`; empty when heads were not kept.
    pub heads: Vec<Vec<Array2<f32>>>,
    pub labels: Vec<bool>,
    pub perspective: Perspective,
    pub variation: VariationKind,
    pub model_fingerprint: String,
    /// Template id of each row, in row order.
    pub template_ids: Vec<usize>,
    /// Items skipped because their prompt did not fit.
    pub skipped: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    labels: Vec<bool>,
    perspective: Perspective,
    variation: VariationKind,
    model_fingerprint: String,
    template_ids: Vec<usize>,
    skipped: Vec<usize>,
    n_layers: usize,
    n_heads: usize,
}

impl ProbingDataset {
    pub fn n_items(&self) -> usize {
        self.labels.len()
    }

    pub fn n_layers(&self) -> usize {
        self.resid.len()
    }

    /// Fraction of positive labels.
    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().filter(|&&z| z).count() as f64 / self.labels.len().max(1) as f64
    }

    /// Labels outside the 45–55% band.
    pub fn is_imbalanced(&self) -> bool {
        let r = self.positive_rate();
        !(0.45..=0.55).contains(&r)
    }

    /// Same activations with the other perspective's labels.
    pub fn relabel(&self, items: &[BeliefItem], perspective: Perspective) -> Result<Self> {
        let kept: Vec<&BeliefItem> = items
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.skipped.contains(i))
            .map(|(_, it)| it)
            .collect();
        if kept.len() != self.n_items() {
            return Err(Error::dims("relabel items", self.n_items(), kept.len()));
        }
        Ok(Self {
            labels: kept.iter().map(|it| it.label(perspective)).collect(),
            perspective,
            ..self.clone()
        })
    }

    /// Returns a warning when the dataset came from different weights.
    pub fn check_fingerprint(&self, fingerprint: &str) -> Option<String> {
        (self.model_fingerprint != fingerprint).then(|| {
            format!(
                "dataset was cached with model {} but the current model is {}",
                short(&self.model_fingerprint),
                short(fingerprint)
            )
        })
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

/// Token ids for a probing prompt (with a leading `<bos>`).
pub fn encode_prompt(vocab: &Vocab, text: &str) -> Vec<u32> {
    let mut ids = vec![BOS_ID];
    ids.extend(vocab.encode(text));
    ids
}

/// Runs every item's probing prompt and keeps the final-token activations.
///
/// Prompts longer than `max_seq` are skipped and listed in `skipped`; the
/// remaining rows keep item order.
pub fn cache_activations<T: Scalar>(
    weights: &ModelWeights<T>,
    vocab: &Vocab,
    items: &[BeliefItem],
    perspective: Perspective,
    keep_heads: bool,
) -> Result<ProbingDataset> {
    if items.is_empty() {
        return Err(Error::invalid("no items to cache"));
    }
    let cfg = &weights.config;
    let n_resid = cfg.n_layers + 1;
    let mut resid_rows: Vec<Vec<f32>> = vec![Vec::new(); n_resid];
    let mut head_rows: Vec<Vec<Vec<f32>>> = if keep_heads {
        vec![vec![Vec::new(); cfg.n_heads]; cfg.n_layers]
    } else {
        Vec::new()
    };
    let mut labels = Vec::new();
    let mut template_ids = Vec::new();
    let mut skipped = Vec::new();
    let mut variation = None;
    for (i, item) in items.iter().enumerate() {
        let tokens = encode_prompt(vocab, &probe_prompt(item));
        if tokens.len() > cfg.max_seq {
            log::warn!(
                "item {i}: prompt of {} tokens exceeds max_seq {}; skipped",
                tokens.len(),
                cfg.max_seq
            );
            skipped.push(i);
            continue;
        }
        let kind = item.variation.kind();
        if *variation.get_or_insert(kind) != kind {
            return Err(Error::invalid("items mix several prompt variations"));
        }
        let (_, trace) = forward_with_hooks(weights, &tokens, &[])?;
        let last = tokens.len() - 1;
        for (l, r) in trace.resid.iter().enumerate() {
            resid_rows[l].extend(r.row(last).iter().map(|v| v.as_f32()));
        }
        if keep_heads {
            for (l, heads) in trace.head_out.iter().enumerate() {
                for (h, m) in heads.iter().enumerate() {
                    head_rows[l][h].extend(m.row(last).iter().map(|v| v.as_f32()));
                }
            }
        }
        labels.push(item.label(perspective));
        template_ids.push(item.template_id);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::invalid("every prompt exceeded max_seq"));
    }
    let to_matrix = |rows: Vec<f32>, width: usize| {
        Array2::from_shape_vec((n, width), rows).expect("row-major rows")
    };
    Ok(ProbingDataset {
        resid: resid_rows
            .into_iter()
            .map(|r| to_matrix(r, cfg.d_model))
            .collect(),
        heads: head_rows
            .into_iter()
            .map(|hs| hs.into_iter().map(|r| to_matrix(r, cfg.d_head())).collect())
            .collect(),
        labels,
        perspective,
        variation: variation.unwrap_or(VariationKind::Original),
        model_fingerprint: weights.fingerprint(),
        template_ids,
        skipped,
    })
}

pub fn dataset_to_archive(ds: &ProbingDataset) -> Result<TensorArchive> {
    if ds.n_items() == 0 {
        return Err(Error::invalid("refusing to save an empty dataset"));
    }
    let meta = DatasetMeta {
        labels: ds.labels.clone(),
        perspective: ds.perspective,
        variation: ds.variation,
        model_fingerprint: ds.model_fingerprint.clone(),
        template_ids: ds.template_ids.clone(),
        skipped: ds.skipped.clone(),
        n_layers: ds.resid.len(),
        n_heads: ds.heads.first().map_or(0, Vec::len),
    };
    let mut archive = TensorArchive::default();
    archive.meta.insert("kind".into(), "probing_dataset".into());
    archive.meta.insert("dataset".into(), serde_json::to_value(meta)?);
    for (l, m) in ds.resid.iter().enumerate() {
        archive.push(matrix_tensor(format!("resid/L{l}"), m));
    }
    for (l, heads) in ds.heads.iter().enumerate() {
        for (h, m) in heads.iter().enumerate() {
            archive.push(matrix_tensor(format!("head/L{l}/H{h}"), m));
        }
    }
    Ok(archive)
}

pub(crate) fn matrix_tensor(name: String, m: &Array2<f32>) -> Tensor {
    Tensor {
        name,
        shape: vec![m.nrows(), m.ncols()],
        data: m.iter().copied().collect(),
    }
}

pub(crate) fn tensor_matrix(t: &Tensor) -> Result<Array2<f32>> {
    match t.shape.as_slice() {
        &[r, c] => Ok(Array2::from_shape_vec((r, c), t.data.clone()).expect("validated shape")),
        other => Err(Error::MalformedArchive(format!(
            "`{}` should be a matrix, has shape {other:?}",
            t.name
        ))),
    }
}

pub fn dataset_from_archive(archive: &TensorArchive) -> Result<ProbingDataset> {
    let meta: DatasetMeta = serde_json::from_value(
        archive
            .meta
            .get("dataset")
            .cloned()
            .ok_or_else(|| Error::MalformedArchive("missing dataset metadata".into()))?,
    )
    .map_err(|e| Error::MalformedArchive(format!("dataset metadata: {e}")))?;
    let n = meta.labels.len();
    let mut resid = Vec::with_capacity(meta.n_layers);
    for l in 0..meta.n_layers {
        let name = format!("resid/L{l}");
        let t = archive
            .get(&name)
            .ok_or_else(|| Error::MalformedArchive(format!("missing `{name}`")))?;
        let m = tensor_matrix(t)?;
        if m.nrows() != n {
            return Err(Error::dims(name, n, m.nrows()));
        }
        resid.push(m);
    }
    let mut heads = Vec::new();
    if meta.n_heads > 0 {
        for l in 0..meta.n_layers - 1 {
            let mut row = Vec::with_capacity(meta.n_heads);
            for h in 0..meta.n_heads {
                let name = format!("head/L{l}/H{h}");
                let t = archive
                    .get(&name)
                    .ok_or_else(|| Error::MalformedArchive(format!("missing `{name}`")))?;
                row.push(tensor_matrix(t)?);
            }
            heads.push(row);
        }
    }
    Ok(ProbingDataset {
        resid,
        heads,
        labels: meta.labels,
        perspective: meta.perspective,
        variation: meta.variation,
        model_fingerprint: meta.model_fingerprint,
        template_ids: meta.template_ids,
        skipped: meta.skipped,
    })
}

pub fn save_dataset(ds: &ProbingDataset, path: impl AsRef<Path>) -> Result<()> {
    dataset_to_archive(ds)?.save(path)
}

/// Loads a dataset; when `expected_fingerprint` is given and differs, the
/// warning is returned alongside the data.
pub fn load_dataset(
    path: impl AsRef<Path>,
    expected_fingerprint: Option<&str>,
) -> Result<(ProbingDataset, Option<String>)> {
    let ds = dataset_from_archive(&TensorArchive::load(path)?)?;
    let warning = expected_fingerprint.and_then(|fp| ds.check_fingerprint(fp));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok((ds, warning))
}
