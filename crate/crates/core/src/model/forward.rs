// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hooked forward pass.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! resid[0]   = embed(tokens) + pos                       (+ residual(0) adds)
//! mid        = resid[l] + attn(ln1(resid[l]))
//! resid[l+1] = mid + mlp(ln2(mid))                        (+ residual(l+1) adds)
//! logits     = ln_f(resid[L]) · unembed
//! ```
//!
//! Head hooks act on each head's attention output before that head's slice
//! of the output projection.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Where a hook attaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HookSite {
    /// Residual stream entering block `layer` (`layer == n_layers` is the
    /// stream entering the final norm; 0 is the embedding output).
    Residual { layer: usize },
    /// Output of one attention head, before its output projection.
    Head { layer: usize, head: usize },
}

/// Token positions an additive hook applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PositionMask {
    All,
    /// Every position `>= start`.
    From(usize),
    Only(Vec<usize>),
}

impl PositionMask {
    pub fn contains(&self, pos: usize) -> bool {
        match self {
            PositionMask::All => true,
            PositionMask::From(start) => pos >= *start,
            PositionMask::Only(list) => list.contains(&pos),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HookAction<T> {
    /// Observation only; the trace always records every site.
    Capture,
    /// Adds `coefficient * vector` at masked positions.
    Add {
        vector: Vec<T>,
        coefficient: T,
        mask: PositionMask,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HookSpec<T> {
    pub site: HookSite,
    pub action: HookAction<T>,
}

impl<T: Scalar> HookSpec<T> {
    pub fn capture(site: HookSite) -> Self {
        Self {
            site,
            action: HookAction::Capture,
        }
    }

    pub fn add(site: HookSite, vector: Vec<T>, coefficient: T, mask: PositionMask) -> Self {
        Self {
            site,
            action: HookAction::Add {
                vector,
                coefficient,
                mask,
            },
        }
    }
}

/// Activations recorded during one forward pass. Recorded values include
/// the effect of any additive hooks at that site.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    /// `resid[l]` is `[token][d_model]`, `l = 0..=n_layers`.
    pub resid: Vec<Array2<T>>,
    /// `head_out[l][h]` is `[token][d_head]`.
    pub head_out: Vec<Vec<Array2<T>>>,
    pub attn_block_out: Vec<Array2<T>>,
    pub mlp_block_out: Vec<Array2<T>>,
}

pub(crate) struct NormCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Vec<T>,
    pub out: Array2<T>,
}

pub(crate) struct LayerCache<T> {
    pub x_in: Array2<T>,
    pub ln1: NormCache<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub probs: Vec<Array2<T>>,
    pub z: Array2<T>,
    pub attn_out: Array2<T>,
    pub ln2: NormCache<T>,
    pub pre: Array2<T>,
    pub act: Array2<T>,
    pub mlp_out: Array2<T>,
}

pub(crate) struct ForwardCache<T> {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerCache<T>>,
    pub x_final: Array2<T>,
    pub final_ln: NormCache<T>,
    pub logits: Array2<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &Array2<T>,
    gain: &Array1<T>,
    bias: &Array1<T>,
) -> NormCache<T> {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Vec::with_capacity(n);
    for (row, mut out) in x.outer_iter().zip(xhat.outer_iter_mut()) {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in out.iter_mut().zip(row) {
            *o = T::of((v.as_f64() - mean) * r);
        }
        rstd.push(T::of(r));
    }
    let out = &xhat * gain + bias;
    NormCache { xhat, rstd, out }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row `i` may attend to columns `0..=offset + i`.
fn softmax_causal_rows<T: Scalar>(scores: &mut Array2<T>, offset: usize) {
    let n = scores.nrows();
    for i in 0..n {
        let visible = offset + i + 1;
        let mut row = scores.row_mut(i);
        let max = row
            .iter()
            .take(visible)
            .fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut sum = 0.0f64;
        for (j, v) in row.iter_mut().enumerate() {
            if j < visible {
                let e = (v.as_f64() - max).exp();
                sum += e;
                *v = T::of(e);
            } else {
                *v = T::zero();
            }
        }
        for v in row.iter_mut().take(visible) {
            *v = T::of(v.as_f64() / sum);
        }
    }
}

fn validate_hooks<T: Scalar>(weights: &ModelWeights<T>, hooks: &[HookSpec<T>]) -> Result<()> {
    let cfg = &weights.config;
    for hook in hooks {
        let width = match hook.site {
            HookSite::Residual { layer } => {
                if layer > cfg.n_layers {
                    return Err(Error::HookOutOfBounds(format!(
                        "residual layer {layer} > n_layers {}",
                        cfg.n_layers
                    )));
                }
                cfg.d_model
            }
            HookSite::Head { layer, head } => {
                if layer >= cfg.n_layers || head >= cfg.n_heads {
                    return Err(Error::HookOutOfBounds(format!(
                        "head ({layer}, {head}) outside {} layers x {} heads",
                        cfg.n_layers, cfg.n_heads
                    )));
                }
                cfg.d_head()
            }
        };
        if let HookAction::Add { vector, .. } = &hook.action {
            if vector.len() != width {
                return Err(Error::dims("hook vector", width, vector.len()));
            }
        }
    }
    Ok(())
}

pub(crate) fn validate_tokens<T: Scalar>(weights: &ModelWeights<T>, tokens: &[u32]) -> Result<()> {
    let cfg = &weights.config;
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_seq: cfg.max_seq,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Applies every additive hook at `site` to the rows of `x` (or, for head
/// sites, to the column block `cols`). Row `i` sits at absolute position
/// `offset + i`.
fn apply_adds<T: Scalar>(
    x: &mut Array2<T>,
    hooks: &[HookSpec<T>],
    site: HookSite,
    cols: std::ops::Range<usize>,
    offset: usize,
) {
    for hook in hooks.iter().filter(|h| h.site == site) {
        let HookAction::Add {
            vector,
            coefficient,
            mask,
        } = &hook.action
        else {
            continue;
        };
        let scaled: Vec<T> = vector.iter().map(|v| *v * *coefficient).collect();
        if scaled.iter().all(|v| *v == T::zero()) {
            continue;
        }
        for (pos, mut row) in x.outer_iter_mut().enumerate() {
            if !mask.contains(offset + pos) {
                continue;
            }
            let mut seg = row.slice_mut(s![cols.clone()]);
            for (dst, add) in seg.iter_mut().zip(&scaled) {
                *dst += *add;
            }
        }
    }
}

pub(crate) fn forward_cached<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[u32],
    hooks: &[HookSpec<T>],
) -> Result<ForwardCache<T>> {
    validate_tokens(weights, tokens)?;
    validate_hooks(weights, hooks)?;
    let cfg = &weights.config;
    let n = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let mut x = Array2::<T>::zeros((n, d));
    for (t, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(t);
        row.assign(&weights.token_embed.row(tok as usize));
        row += &weights.pos_embed.row(t);
    }
    apply_adds(&mut x, hooks, HookSite::Residual { layer: 0 }, 0..d, 0);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lw) in weights.layers.iter().enumerate() {
        let ln1 = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias);
        let q = ln1.out.dot(&lw.w_query);
        let k = ln1.out.dot(&lw.w_key);
        let v = ln1.out.dot(&lw.w_value);
        let mut z = Array2::<T>::zeros((n, d));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut p = qh.dot(&kh.t());
            p.mapv_inplace(|s| s * scale);
            softmax_causal_rows(&mut p, 0);
            z.slice_mut(s![.., cols.clone()]).assign(&p.dot(&vh));
            apply_adds(&mut z, hooks, HookSite::Head { layer: l, head: h }, cols, 0);
            probs.push(p);
        }
        let attn_out = z.dot(&lw.w_out);
        let mid = &x + &attn_out;
        let ln2 = layer_norm(&mid, &lw.ln2_gain, &lw.ln2_bias);
        let pre = ln2.out.dot(&lw.w_mlp_in) + &lw.b_mlp_in;
        let act = pre.mapv(|v| T::of(gelu(v.as_f64())));
        let mlp_out = act.dot(&lw.w_mlp_out) + &lw.b_mlp_out;
        let mut next = &mid + &mlp_out;
        apply_adds(&mut next, hooks, HookSite::Residual { layer: l + 1 }, 0..d, 0);
        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, next),
            ln1,
            q,
            k,
            v,
            probs,
            z,
            attn_out,
            ln2,
            pre,
            act,
            mlp_out,
        });
    }
    let final_ln = layer_norm(&x, &weights.final_ln_gain, &weights.final_ln_bias);
    let logits = final_ln.out.dot(&weights.unembed);
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        x_final: x,
        final_ln,
        logits,
    })
}

impl<T: Scalar> ForwardCache<T> {
    pub(crate) fn trace(&self, n_heads: usize) -> ActivationTrace<T> {
        let mut resid: Vec<Array2<T>> = self.layers.iter().map(|l| l.x_in.clone()).collect();
        resid.push(self.x_final.clone());
        let head_out = self
            .layers
            .iter()
            .map(|l| {
                let dh = l.z.ncols() / n_heads;
                (0..n_heads)
                    .map(|h| l.z.slice(s![.., h * dh..(h + 1) * dh]).to_owned())
                    .collect()
            })
            .collect();
        ActivationTrace {
            resid,
            head_out,
            attn_block_out: self.layers.iter().map(|l| l.attn_out.clone()).collect(),
            mlp_block_out: self.layers.iter().map(|l| l.mlp_out.clone()).collect(),
        }
    }
}

/// Runs the model, returning `[token][vocab]` logits and the full trace.
pub fn forward_with_hooks<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[u32],
    hooks: &[HookSpec<T>],
) -> Result<(Array2<T>, ActivationTrace<T>)> {
    let cache = forward_cached(weights, tokens, hooks)?;
    let trace = cache.trace(weights.config.n_heads);
    Ok((cache.logits, trace))
}

/// Logits only; skips copying the trace.
pub fn forward_logits<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[u32],
    hooks: &[HookSpec<T>],
) -> Result<Array2<T>> {
    Ok(forward_cached(weights, tokens, hooks)?.logits)
}

/// Keys, values and final logits of an unhooked prompt, reused when
/// scoring several continuations of it.
pub(crate) struct PrefixState<T> {
    keys: Vec<Array2<T>>,
    values: Vec<Array2<T>>,
    pub last_logits: Array1<T>,
    pub len: usize,
}

pub(crate) fn forward_prefix<T: Scalar>(weights: &ModelWeights<T>, tokens: &[u32]) -> Result<PrefixState<T>> {
    let cache = forward_cached(weights, tokens, &[])?;
    let last = tokens.len() - 1;
    Ok(PrefixState {
        last_logits: cache.logits.row(last).to_owned(),
        len: tokens.len(),
        keys: cache.layers.iter().map(|l| l.k.clone()).collect(),
        values: cache.layers.iter().map(|l| l.v.clone()).collect(),
    })
}

/// Logits for `suffix` continuing an already computed prefix. Hooks see
/// absolute positions.
pub(crate) fn forward_suffix<T: Scalar>(
    weights: &ModelWeights<T>,
    prefix: &PrefixState<T>,
    suffix: &[u32],
    hooks: &[HookSpec<T>],
) -> Result<Array2<T>> {
    let cfg = &weights.config;
    let p = prefix.len;
    let full: Vec<u32> = std::iter::repeat(0).take(p).chain(suffix.iter().copied()).collect();
    validate_tokens(weights, &full)?;
    validate_hooks(weights, hooks)?;
    let m = suffix.len();
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let mut x = Array2::<T>::zeros((m, d));
    for (i, &tok) in suffix.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&weights.token_embed.row(tok as usize));
        row += &weights.pos_embed.row(p + i);
    }
    apply_adds(&mut x, hooks, HookSite::Residual { layer: 0 }, 0..d, p);
    for (l, lw) in weights.layers.iter().enumerate() {
        let ln1 = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias);
        let q = ln1.out.dot(&lw.w_query);
        let keys = ndarray::concatenate(Axis(0), &[prefix.keys[l].view(), ln1.out.dot(&lw.w_key).view()])
            .expect("matching widths");
        let values = ndarray::concatenate(Axis(0), &[prefix.values[l].view(), ln1.out.dot(&lw.w_value).view()])
            .expect("matching widths");
        let mut z = Array2::<T>::zeros((m, d));
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let mut sc = q.slice(s![.., cols.clone()]).dot(&keys.slice(s![.., cols.clone()]).t());
            sc.mapv_inplace(|v| v * scale);
            softmax_causal_rows(&mut sc, p);
            z.slice_mut(s![.., cols.clone()]).assign(&sc.dot(&values.slice(s![.., cols.clone()])));
            apply_adds(&mut z, hooks, HookSite::Head { layer: l, head: h }, cols, p);
        }
        let mid = &x + &z.dot(&lw.w_out);
        let ln2 = layer_norm(&mid, &lw.ln2_gain, &lw.ln2_bias);
        let pre = ln2.out.dot(&lw.w_mlp_in) + &lw.b_mlp_in;
        let act = pre.mapv(|v| T::of(gelu(v.as_f64())));
        x = &mid + &(act.dot(&lw.w_mlp_out) + &lw.b_mlp_out);
        apply_adds(&mut x, hooks, HookSite::Residual { layer: l + 1 }, 0..d, p);
    }
    let final_ln = layer_norm(&x, &weights.final_ln_gain, &weights.final_ln_bias);
    Ok(final_ln.out.dot(&weights.unembed))
}

/// `ln softmax(row)[index]`, accumulated in f64.
pub fn log_softmax_at<T: Scalar>(row: ArrayView1<T>, index: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row[index].as_f64() - lse
}

/// Column sums, used by a few callers for bias gradients.
pub(crate) fn col_sum<T: Scalar>(a: &Array2<T>) -> Array1<T> {
    a.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn tiny() -> ModelWeights<f64> {
        build_model(&ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 13,
            max_seq: 16,
            d_mlp: Some(16),
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn residual_decomposition_holds() {
        let w = tiny();
        let (_, trace) = forward_with_hooks(&w, &[1, 4, 2, 9, 0], &[]).unwrap();
        for l in 0..2 {
            let rebuilt = &trace.resid[l] + &trace.attn_block_out[l] + &trace.mlp_block_out[l];
            for (a, b) in rebuilt.iter().zip(trace.resid[l + 1].iter()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn out_of_range_token_rejected() {
        let w = tiny();
        assert!(matches!(
            forward_with_hooks(&w, &[1, 13], &[]),
            Err(Error::TokenOutOfRange { token: 13, .. })
        ));
    }

    #[test]
    fn hook_bounds_checked() {
        let w = tiny();
        let bad = HookSpec::capture(HookSite::Residual { layer: 3 });
        assert!(forward_with_hooks(&w, &[1], &[bad]).is_err());
        let bad = HookSpec::capture(HookSite::Head { layer: 0, head: 2 });
        assert!(forward_with_hooks(&w, &[1], &[bad]).is_err());
        let wrong_width = HookSpec::add(
            HookSite::Head { layer: 0, head: 0 },
            vec![1.0; 8],
            1.0,
            PositionMask::All,
        );
        assert!(matches!(
            forward_with_hooks(&w, &[1], &[wrong_width]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn too_long_sequence_rejected() {
        let w = tiny();
        let toks = vec![1u32; 17];
        assert!(matches!(
            forward_logits(&w, &toks, &[]),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn causal_masking_prefix_logits_unchanged() {
        let w = tiny();
        let a = forward_logits(&w, &[1, 2, 3], &[]).unwrap();
        let b = forward_logits(&w, &[1, 2, 3, 7, 8], &[]).unwrap();
        for t in 0..3 {
            for v in 0..13 {
                assert!((a[[t, v]] - b[[t, v]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-7);
        }
    }
}
