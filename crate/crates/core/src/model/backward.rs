// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients of the next-token cross-entropy.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::forward::{col_sum, forward_cached, gelu_grad, ForwardCache, NormCache};
use crate::model::ModelWeights;
use crate::scalar::Scalar;

fn add_assign<T: Scalar>(dst: &mut ndarray::Array1<T>, src: &ndarray::Array1<T>) {
    *dst += src;
}

/// Backprop through `out = xhat * gain + bias`, accumulating gain/bias
/// gradients and returning the gradient with respect to the norm input.
fn norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gain: &ndarray::Array1<T>,
    d_out: &Array2<T>,
    d_gain: &mut ndarray::Array1<T>,
    d_bias: &mut ndarray::Array1<T>,
) -> Array2<T> {
    add_assign(d_gain, &(d_out * &cache.xhat).sum_axis(Axis(0)));
    add_assign(d_bias, &col_sum(d_out));
    let d = d_out.ncols() as f64;
    let mut dx = Array2::zeros(d_out.raw_dim());
    for (i, ((dy, xh), mut out)) in d_out
        .outer_iter()
        .zip(cache.xhat.outer_iter())
        .zip(dx.outer_iter_mut())
        .enumerate()
    {
        let dxhat: Vec<f64> = dy
            .iter()
            .zip(gain)
            .map(|(a, g)| a.as_f64() * g.as_f64())
            .collect();
        let mean_d = dxhat.iter().sum::<f64>() / d;
        let mean_dx = dxhat
            .iter()
            .zip(xh)
            .map(|(a, x)| a * x.as_f64())
            .sum::<f64>()
            / d;
        let r = cache.rstd[i].as_f64();
        for ((o, g), x) in out.iter_mut().zip(&dxhat).zip(xh) {
            *o = T::of(r * (g - mean_d - x.as_f64() * mean_dx));
        }
    }
    dx
}

/// Accumulates parameter gradients for one cached forward pass, given the
/// gradient of the objective with respect to the logits.
pub(crate) fn backward<T: Scalar>(
    weights: &ModelWeights<T>,
    cache: &ForwardCache<T>,
    d_logits: &Array2<T>,
    grads: &mut ModelWeights<T>,
) {
    let cfg = &weights.config;
    let dh = cfg.d_head();
    let scale = T::of(1.0 / (dh as f64).sqrt());

    grads.unembed += &cache.final_ln.out.t().dot(d_logits);
    let d_hf = d_logits.dot(&weights.unembed.t());
    let mut dx = norm_backward(
        &cache.final_ln,
        &weights.final_ln_gain,
        &d_hf,
        &mut grads.final_ln_gain,
        &mut grads.final_ln_bias,
    );

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let lw = &weights.layers[l];
        let gw = &mut grads.layers[l];

        // MLP
        gw.w_mlp_out += &lc.act.t().dot(&dx);
        gw.b_mlp_out += &col_sum(&dx);
        let d_act = dx.dot(&lw.w_mlp_out.t());
        let mut d_pre = d_act;
        for (g, p) in d_pre.iter_mut().zip(lc.pre.iter()) {
            *g = T::of(g.as_f64() * gelu_grad(p.as_f64()));
        }
        gw.w_mlp_in += &lc.ln2.out.t().dot(&d_pre);
        gw.b_mlp_in += &col_sum(&d_pre);
        let d_h2 = d_pre.dot(&lw.w_mlp_in.t());
        let d_mid = &dx
            + &norm_backward(
                &lc.ln2,
                &lw.ln2_gain,
                &d_h2,
                &mut gw.ln2_gain,
                &mut gw.ln2_bias,
            );

        // Attention
        gw.w_out += &lc.z.t().dot(&d_mid);
        let dz = d_mid.dot(&lw.w_out.t());
        let n = dz.nrows();
        let mut dq = Array2::<T>::zeros((n, cfg.d_model));
        let mut dk = Array2::<T>::zeros((n, cfg.d_model));
        let mut dv = Array2::<T>::zeros((n, cfg.d_model));
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &lc.probs[h];
            let dzh = dz.slice(s![.., cols.clone()]);
            let qh = lc.q.slice(s![.., cols.clone()]);
            let kh = lc.k.slice(s![.., cols.clone()]);
            let vh = lc.v.slice(s![.., cols.clone()]);
            let d_p = dzh.dot(&vh.t());
            dv.slice_mut(s![.., cols.clone()]).assign(&p.t().dot(&dzh));
            let mut d_scores = Array2::<T>::zeros((n, n));
            for i in 0..n {
                let dot: f64 = (0..=i)
                    .map(|j| d_p[[i, j]].as_f64() * p[[i, j]].as_f64())
                    .sum();
                for j in 0..=i {
                    d_scores[[i, j]] =
                        T::of(p[[i, j]].as_f64() * (d_p[[i, j]].as_f64() - dot)) * scale;
                }
            }
            dq.slice_mut(s![.., cols.clone()]).assign(&d_scores.dot(&kh));
            dk.slice_mut(s![.., cols.clone()]).assign(&d_scores.t().dot(&qh));
        }
        let h1 = &lc.ln1.out;
        gw.w_query += &h1.t().dot(&dq);
        gw.w_key += &h1.t().dot(&dk);
        gw.w_value += &h1.t().dot(&dv);
        let d_h1 = dq.dot(&lw.w_query.t()) + dk.dot(&lw.w_key.t()) + dv.dot(&lw.w_value.t());
        dx = &d_mid
            + &norm_backward(
                &lc.ln1,
                &lw.ln1_gain,
                &d_h1,
                &mut gw.ln1_gain,
                &mut gw.ln1_bias,
            );
    }

    for (t, &tok) in cache.tokens.iter().enumerate() {
        let row = dx.row(t);
        let mut te = grads.token_embed.row_mut(tok as usize);
        te += &row;
        let mut pe = grads.pos_embed.row_mut(t);
        pe += &row;
    }
}

/// Number of next-token targets in a batch.
pub fn target_count(batch: &[Vec<u32>]) -> usize {
    batch.iter().map(|s| s.len().saturating_sub(1)).sum()
}

/// Mean next-token cross-entropy over every target in `batch` and its
/// gradient with respect to all parameters.
pub fn loss_and_grad<T: Scalar>(
    weights: &ModelWeights<T>,
    batch: &[Vec<u32>],
) -> Result<(f64, ModelWeights<T>)> {
    let total = target_count(batch);
    if total == 0 {
        return Err(Error::invalid("batch has no next-token targets"));
    }
    let inv = 1.0 / total as f64;
    let mut grads = ModelWeights::zeros_like(&weights.config);
    let mut loss = 0.0f64;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let cache = forward_cached(weights, seq, &[])?;
        let vocab = weights.config.vocab_size;
        let mut d_logits = Array2::<T>::zeros((seq.len(), vocab));
        for t in 0..seq.len() - 1 {
            let row = cache.logits.row(t);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let target = seq[t + 1] as usize;
            loss -= (exps[target] / sum).ln() * inv;
            for (j, e) in exps.iter().enumerate() {
                let p = e / sum;
                let g = if j == target { p - 1.0 } else { p };
                d_logits[[t, j]] = T::of(g * inv);
            }
        }
        backward(weights, &cache, &d_logits, &mut grads);
    }
    Ok((loss, grads))
}

/// Mean next-token cross-entropy without gradients.
pub fn mean_loss<T: Scalar>(weights: &ModelWeights<T>, batch: &[Vec<u32>]) -> Result<f64> {
    let total = target_count(batch);
    if total == 0 {
        return Err(Error::invalid("batch has no next-token targets"));
    }
    let mut loss = 0.0;
    for seq in batch.iter().filter(|s| s.len() >= 2) {
        let logits = crate::model::forward_logits(weights, seq, &[])?;
        for t in 0..seq.len() - 1 {
            loss -= crate::model::forward::log_softmax_at(logits.row(t), seq[t + 1] as usize);
        }
    }
    Ok(loss / total as f64)
}
