// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive activation addition (CAA) and inference-time intervention
//! (ITI), both installed as additive hooks on answer positions only.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorArchive};
use crate::cache::ProbingDataset;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::model::{forward_with_hooks, score_answers, HookSite, HookSpec, ModelWeights, PositionMask};
use crate::probing::{eval_probe, pick, rows, stratified_split, train_probe, ProbeOptions};
use crate::scalar::Scalar;

/// Default CAA coefficients.
pub const CAA_ALPHAS: [f64; 3] = [1.0, 1.5, 2.0];
/// Default ITI coefficients.
pub const ITI_ALPHAS: [f64; 4] = [0.0, 10.0, 15.0, 20.0];
pub const DEFAULT_ITI_K: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub prompt: Vec<u32>,
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    /// Residual layer (0 = embeddings, n_layers = final stream).
    pub layer: usize,
    pub v: Vec<f64>,
    pub source_fingerprint: String,
    pub n_pairs: usize,
    /// Indices of pairs whose sequences did not fit.
    pub skipped: Vec<usize>,
}

/// Neumaier-compensated running sum, so the mean does not depend on
/// accumulated rounding in long pair lists.
#[derive(Debug, Clone)]
struct CompensatedSum {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl CompensatedSum {
    fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            comp: vec![0.0; n],
        }
    }

    fn add(&mut self, xs: impl Iterator<Item = f64>) {
        for ((s, c), x) in self.sum.iter_mut().zip(&mut self.comp).zip(xs) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
    }

    fn mean(&self, n: usize) -> Vec<f64> {
        self.sum
            .iter()
            .zip(&self.comp)
            .map(|(s, c)| (s + c) / n as f64)
            .collect()
    }
}

fn pairs_fingerprint(pairs: &[ContrastPair]) -> String {
    let bytes = serde_json::to_vec(pairs).expect("pairs serialise");
    sha256_hex(&bytes)
}

fn final_resid<T: Scalar>(
    weights: &ModelWeights<T>,
    prompt: &[u32],
    completion: &[u32],
) -> Result<Vec<Vec<f64>>> {
    let tokens: Vec<u32> = prompt.iter().chain(completion).copied().collect();
    let (_, trace) = forward_with_hooks(weights, &tokens, &[])?;
    let last = tokens.len() - 1;
    Ok(trace
        .resid
        .iter()
        .map(|m| m.row(last).iter().map(|v| v.as_f64()).collect())
        .collect())
}

/// Mean positive-minus-negative final-token residual for every layer at
/// once (index = residual layer).
pub fn compute_caa_all_layers<T: Scalar>(
    weights: &ModelWeights<T>,
    pairs: &[ContrastPair],
) -> Result<Vec<SteeringVector>> {
    if pairs.is_empty() {
        return Err(Error::invalid("CAA needs at least one contrast pair"));
    }
    let cfg = &weights.config;
    let n_resid = cfg.n_layers + 1;
    let mut acc: Vec<CompensatedSum> = (0..n_resid).map(|_| CompensatedSum::new(cfg.d_model)).collect();
    let mut used = 0;
    let mut skipped = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let longest = pair.prompt.len() + pair.positive.len().max(pair.negative.len());
        if longest > cfg.max_seq || pair.positive.is_empty() || pair.negative.is_empty() {
            log::warn!("contrast pair {i} skipped ({longest} tokens)");
            skipped.push(i);
            continue;
        }
        let pos = final_resid(weights, &pair.prompt, &pair.positive)?;
        let neg = final_resid(weights, &pair.prompt, &pair.negative)?;
        for (l, a) in acc.iter_mut().enumerate() {
            a.add(pos[l].iter().zip(&neg[l]).map(|(p, n)| p - n));
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("no usable contrast pairs"));
    }
    let fp = pairs_fingerprint(pairs);
    Ok(acc
        .iter()
        .enumerate()
        .map(|(layer, a)| SteeringVector {
            layer,
            v: a.mean(used),
            source_fingerprint: fp.clone(),
            n_pairs: used,
            skipped: skipped.clone(),
        })
        .collect())
}

pub fn compute_caa<T: Scalar>(
    weights: &ModelWeights<T>,
    pairs: &[ContrastPair],
    layer: usize,
) -> Result<SteeringVector> {
    if layer > weights.config.n_layers {
        return Err(Error::HookOutOfBounds(format!(
            "residual layer {layer} > n_layers {}",
            weights.config.n_layers
        )));
    }
    Ok(compute_caa_all_layers(weights, pairs)?.swap_remove(layer))
}

/// Chosen answer and every candidate's score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub index: usize,
    pub scores: Vec<f64>,
}

fn rank_with<T: Scalar>(
    weights: &ModelWeights<T>,
    prompt: &[u32],
    candidates: &[Vec<u32>],
    hooks: &[HookSpec<T>],
) -> Result<Ranked> {
    if candidates.len() < 2 {
        return Err(Error::invalid("ranking needs at least two candidates"));
    }
    let scores = score_answers(weights, prompt, candidates, hooks)?;
    Ok(Ranked {
        index: crate::model::argmax_first(&scores),
        scores,
    })
}

/// Hooks adding `alpha * v` to the residual stream after the prompt.
pub fn caa_hooks<T: Scalar>(
    weights: &ModelWeights<T>,
    sv: &SteeringVector,
    alpha: f64,
    prompt_len: usize,
) -> Result<Vec<HookSpec<T>>> {
    if !alpha.is_finite() {
        return Err(Error::invalid("steering coefficient must be finite"));
    }
    if sv.v.len() != weights.config.d_model {
        return Err(Error::dims("steering vector", weights.config.d_model, sv.v.len()));
    }
    Ok(vec![HookSpec::add(
        HookSite::Residual { layer: sv.layer },
        sv.v.iter().map(|&x| T::of(x)).collect(),
        T::of(alpha),
        PositionMask::From(prompt_len),
    )])
}

pub fn apply_caa<T: Scalar>(
    weights: &ModelWeights<T>,
    prompt: &[u32],
    candidates: &[Vec<u32>],
    sv: &SteeringVector,
    alpha: f64,
) -> Result<Ranked> {
    let hooks = caa_hooks(weights, sv, alpha, prompt.len())?;
    rank_with(weights, prompt, candidates, &hooks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItiHead {
    pub layer: usize,
    pub head: usize,
    /// Held-out accuracy of the head's probe.
    pub accuracy: f64,
    pub sigma: f64,
    /// Unit-norm probe direction.
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItiPlan {
    pub heads: Vec<ItiHead>,
    pub alpha: f64,
    pub k: usize,
    pub split_seed: u64,
    /// Heads left out of the ranking, with the reason.
    pub excluded: Vec<(usize, usize, String)>,
}

impl ItiPlan {
    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    pub fn empty(alpha: f64) -> Self {
        Self {
            heads: Vec::new(),
            alpha,
            k: 0,
            split_seed: 0,
            excluded: Vec::new(),
        }
    }
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Probes every head, keeps the `k` with the best held-out accuracy.
///
/// Ties in accuracy are broken by (layer, head) order.
pub fn prepare_iti(
    heads: &[Vec<Array2<f32>>],
    labels: &[bool],
    k: usize,
    alpha: f64,
    split_seed: u64,
    opts: &ProbeOptions,
) -> Result<ItiPlan> {
    let total: usize = heads.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::invalid("no head activations; cache with heads enabled"));
    }
    if k > total {
        return Err(Error::invalid(format!("k = {k} exceeds the {total} available heads")));
    }
    let split = stratified_split(labels, split_seed)?;
    let z_train = pick(labels, &split.train);
    let z_test = pick(labels, &split.test);
    let mut ranked = Vec::new();
    let mut excluded = Vec::new();
    for (l, layer) in heads.iter().enumerate() {
        for (h, x) in layer.iter().enumerate() {
            if x.nrows() != labels.len() {
                return Err(Error::dims(format!("head ({l}, {h}) rows"), labels.len(), x.nrows()));
            }
            let x_train = rows(x, &split.train);
            let varies = x_train
                .columns()
                .into_iter()
                .any(|c| c.iter().any(|v| *v != c[0]));
            if !varies {
                excluded.push((l, h, "zero variance".to_string()));
                continue;
            }
            let probe = train_probe(x_train.view(), &z_train, opts)?;
            let norm = probe.w.iter().map(|w| w * w).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                excluded.push((l, h, "zero probe direction".to_string()));
                continue;
            }
            let theta: Vec<f64> = probe.w.iter().map(|w| w / norm).collect();
            let accuracy = eval_probe(&probe, rows(x, &split.test).view(), &z_test)?;
            let proj: Vec<f64> = x_train
                .outer_iter()
                .map(|r| r.iter().zip(&theta).map(|(v, t)| *v as f64 * t).sum())
                .collect();
            ranked.push(ItiHead {
                layer: l,
                head: h,
                accuracy,
                sigma: population_std(&proj),
                theta,
            });
        }
    }
    if ranked.len() < k {
        return Err(Error::invalid(format!(
            "only {} heads are usable but k = {k}",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then((a.layer, a.head).cmp(&(b.layer, b.head)))
    });
    ranked.truncate(k);
    Ok(ItiPlan {
        heads: ranked,
        alpha,
        k,
        split_seed,
        excluded,
    })
}

/// Convenience wrapper taking the head matrices from a cached dataset.
pub fn prepare_iti_from_dataset(
    ds: &ProbingDataset,
    k: usize,
    alpha: f64,
    split_seed: u64,
    opts: &ProbeOptions,
) -> Result<ItiPlan> {
    prepare_iti(&ds.heads, &ds.labels, k, alpha, split_seed, opts)
}

/// Hooks adding `alpha * sigma * theta` to each selected head's output
/// after the prompt.
pub fn iti_hooks<T: Scalar>(
    weights: &ModelWeights<T>,
    plan: &ItiPlan,
    prompt_len: usize,
) -> Result<Vec<HookSpec<T>>> {
    if !plan.alpha.is_finite() {
        return Err(Error::invalid("ITI coefficient must be finite"));
    }
    let dh = weights.config.d_head();
    plan.heads
        .iter()
        .map(|h| {
            if h.theta.len() != dh {
                return Err(Error::dims("ITI direction", dh, h.theta.len()));
            }
            Ok(HookSpec::add(
                HookSite::Head {
                    layer: h.layer,
                    head: h.head,
                },
                h.theta.iter().map(|&t| T::of(t)).collect(),
                T::of(plan.alpha * h.sigma),
                PositionMask::From(prompt_len),
            ))
        })
        .collect()
}

pub fn apply_iti<T: Scalar>(
    weights: &ModelWeights<T>,
    prompt: &[u32],
    candidates: &[Vec<u32>],
    plan: &ItiPlan,
) -> Result<Ranked> {
    let hooks = iti_hooks(weights, plan, prompt.len())?;
    rank_with(weights, prompt, candidates, &hooks)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Stores steering vectors (one tensor `caa/L{layer}` each).
pub fn save_steering_vectors(vectors: &[SteeringVector], path: impl AsRef<Path>) -> Result<()> {
    let mut a = TensorArchive::default();
    a.meta.insert("kind".into(), "steering_vectors".into());
    let meta: Vec<serde_json::Value> = vectors
        .iter()
        .map(|s| {
            serde_json::json!({
                "layer": s.layer,
                "source_fingerprint": s.source_fingerprint,
                "n_pairs": s.n_pairs,
                "skipped": s.skipped,
            })
        })
        .collect();
    a.meta.insert("vectors".into(), meta.into());
    for s in vectors {
        a.push(Tensor::new(format!("caa/L{}", s.layer), vec![s.v.len()], to_f32(&s.v))?);
    }
    a.save(path)
}

pub fn load_steering_vectors(path: impl AsRef<Path>) -> Result<Vec<SteeringVector>> {
    let a = TensorArchive::load(path)?;
    let meta = a
        .meta
        .get("vectors")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::MalformedArchive("missing steering metadata".into()))?;
    meta.iter()
        .map(|m| {
            let layer = m["layer"].as_u64().unwrap_or(0) as usize;
            let t = a
                .get(&format!("caa/L{layer}"))
                .ok_or_else(|| Error::MalformedArchive(format!("missing caa/L{layer}")))?;
            Ok(SteeringVector {
                layer,
                v: t.data.iter().map(|&x| x as f64).collect(),
                source_fingerprint: m["source_fingerprint"].as_str().unwrap_or("").into(),
                n_pairs: m["n_pairs"].as_u64().unwrap_or(0) as usize,
                skipped: serde_json::from_value(m["skipped"].clone()).unwrap_or_default(),
            })
        })
        .collect()
}

/// Stores an ITI plan: directions as tensors, everything else in the header.
pub fn save_iti_plan(plan: &ItiPlan, path: impl AsRef<Path>) -> Result<()> {
    let mut a = TensorArchive::default();
    a.meta.insert("kind".into(), "iti_plan".into());
    let mut header = plan.clone();
    for h in &mut header.heads {
        h.theta.clear();
    }
    a.meta.insert("plan".into(), serde_json::to_value(&header)?);
    for h in &plan.heads {
        a.push(Tensor::new(
            format!("iti/L{}/H{}", h.layer, h.head),
            vec![h.theta.len()],
            to_f32(&h.theta),
        )?);
    }
    a.save(path)
}

pub fn load_iti_plan(path: impl AsRef<Path>) -> Result<ItiPlan> {
    let a = TensorArchive::load(path)?;
    let mut plan: ItiPlan = serde_json::from_value(
        a.meta
            .get("plan")
            .cloned()
            .ok_or_else(|| Error::MalformedArchive("missing ITI metadata".into()))?,
    )?;
    for h in &mut plan.heads {
        let name = format!("iti/L{}/H{}", h.layer, h.head);
        let t = a
            .get(&name)
            .ok_or_else(|| Error::MalformedArchive(format!("missing {name}")))?;
        h.theta = t.data.iter().map(|&x| x as f64).collect();
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::new(1);
        s.add([1e16].into_iter());
        for _ in 0..10 {
            s.add([1.0].into_iter());
        }
        s.add([-1e16].into_iter());
        assert_eq!(s.mean(1)[0], 10.0);
    }

    #[test]
    fn population_std_of_symmetric_pair() {
        assert_eq!(population_std(&[-1.0, 1.0, -1.0, 1.0]), 1.0);
    }

    #[test]
    fn planted_head_ranks_first() {
        let n = 40;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let noise = |i: usize, j: usize| (((i * 31 + j * 17) % 13) as f32 - 6.0) / 6.0;
        let make = |planted: bool| {
            Array2::from_shape_fn((n, 3), |(i, j)| {
                if planted && j == 1 {
                    if labels[i] { 1.0 } else { -1.0 }
                } else {
                    noise(i, j + if planted { 0 } else { 5 })
                }
            })
        };
        let heads = vec![vec![make(false), make(false)], vec![make(true), make(false)]];
        let plan = prepare_iti(&heads, &labels, 4, 10.0, 0, &ProbeOptions::default()).unwrap();
        assert_eq!((plan.heads[0].layer, plan.heads[0].head), (1, 0));
        assert_eq!(plan.heads.len(), 4);
        for h in &plan.heads {
            let norm: f64 = h.theta.iter().map(|t| t * t).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert!(h.sigma >= 0.0);
        }
        assert!(plan.heads.windows(2).all(|w| w[0].accuracy >= w[1].accuracy));
    }

    #[test]
    fn degenerate_heads_excluded() {
        let labels: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let flat = Array2::<f32>::ones((20, 2));
        let live = Array2::from_shape_fn((20, 2), |(i, j)| (i * (j + 1)) as f32 % 7.0);
        let heads = vec![vec![flat, live]];
        let plan = prepare_iti(&heads, &labels, 1, 1.0, 0, &ProbeOptions::default()).unwrap();
        assert_eq!(plan.excluded.len(), 1);
        assert_eq!(plan.heads[0].head, 1);
        assert!(prepare_iti(&heads, &labels, 2, 1.0, 0, &ProbeOptions::default()).is_err());
    }
}
