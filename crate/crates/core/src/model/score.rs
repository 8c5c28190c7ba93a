// SPDX-License-Identifier: MIT OR Apache-2.0

//! Answer scoring by conditional log-probability.

use crate::error::{Error, Result};
use crate::model::forward::{forward_logits, forward_prefix, forward_suffix, log_softmax_at};
use crate::model::{HookAction, HookSpec, ModelWeights, PositionMask};
use crate::scalar::Scalar;

/// `sum_i ln p(answer_i | prompt, answer_<i)`; no length normalisation.
///
/// Hooks see absolute positions in the concatenated `prompt ++ answer`.
pub fn score_completion<T: Scalar>(
    weights: &ModelWeights<T>,
    prompt: &[u32],
    answer: &[u32],
    hooks: &[HookSpec<T>],
) -> Result<f64> {
    if answer.is_empty() {
        return Err(Error::EmptyAnswer);
    }
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must contain at least one token"));
    }
    let mut tokens = Vec::with_capacity(prompt.len() + answer.len());
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(answer);
    let logits = forward_logits(weights, &tokens, hooks)?;
    let start = prompt.len();
    Ok(answer
        .iter()
        .enumerate()
        .map(|(i, &tok)| log_softmax_at(logits.row(start + i - 1), tok as usize))
        .sum())
}

/// True when no additive hook reaches a position before `prompt_len`.
fn prompt_untouched<T: Scalar>(hooks: &[HookSpec<T>], prompt_len: usize) -> bool {
    hooks.iter().all(|h| match &h.action {
        HookAction::Capture => true,
        HookAction::Add { mask, .. } => match mask {
            PositionMask::All => false,
            PositionMask::From(start) => *start >= prompt_len,
            PositionMask::Only(list) => list.iter().all(|&p| p >= prompt_len),
        },
    })
}

/// Scores every answer and returns them in input order.
///
/// When the hooks leave the prompt untouched, the prompt is run once and
/// only the answer tokens are recomputed per candidate.
pub fn score_answers<T: Scalar>(
    weights: &ModelWeights<T>,
    question: &[u32],
    answers: &[Vec<u32>],
    hooks: &[HookSpec<T>],
) -> Result<Vec<f64>> {
    if question.is_empty() || !prompt_untouched(hooks, question.len()) {
        return answers
            .iter()
            .map(|a| score_completion(weights, question, a, hooks))
            .collect();
    }
    let prefix = forward_prefix(weights, question)?;
    answers
        .iter()
        .map(|a| {
            let first = *a.first().ok_or(Error::EmptyAnswer)?;
            let mut total = log_softmax_at(prefix.last_logits.view(), first as usize);
            if a.len() > 1 {
                let logits = forward_suffix(weights, &prefix, &a[..a.len() - 1], hooks)?;
                total += a[1..]
                    .iter()
                    .enumerate()
                    .map(|(i, &tok)| log_softmax_at(logits.row(i), tok as usize))
                    .sum::<f64>();
            }
            Ok(total)
        })
        .collect()
}

/// Index of the highest-scoring answer; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn rank_answers<T: Scalar>(
    weights: &ModelWeights<T>,
    question: &[u32],
    answers: &[Vec<u32>],
    hooks: &[HookSpec<T>],
) -> Result<usize> {
    if answers.len() < 2 {
        return Err(Error::invalid("rank_answers needs at least two answers"));
    }
    Ok(argmax_first(&score_answers(weights, question, answers, hooks)?))
}
