// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::backward::loss_and_grad;
use crate::model::ModelWeights;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// Momentum-free gradient descent.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Linear warm-up length before cosine decay.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 0.1,
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::Sgd,
            warmup_steps: 0,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    /// Learning rate at `step` (linear warm-up then cosine decay to zero).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Per-step record of training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// Mean of the last `window` losses.
    pub fn tail_mean(&self, window: usize) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let w = window.clamp(1, self.losses.len());
        let tail = &self.losses[self.losses.len() - w..];
        Some(tail.iter().sum::<f64>() / w as f64)
    }
}

/// Next-token training on `corpus`. Deterministic for a given seed.
pub fn train_lm<T: Scalar>(
    mut weights: ModelWeights<T>,
    corpus: &[Vec<u32>],
    config: &TrainConfig,
) -> Result<(ModelWeights<T>, LossCurve)> {
    if config.steps == 0 {
        return Ok((weights, LossCurve::default()));
    }
    let vocab = weights.config.vocab_size;
    let max_seq = weights.config.max_seq;
    for seq in corpus {
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab_size: vocab,
            });
        }
        if seq.len() > max_seq {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max_seq,
            });
        }
    }
    let usable: Vec<&Vec<u32>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid("corpus has no sequence with at least two tokens"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_params = weights.n_params();
    let (mut m1, mut m2) = match config.optimizer {
        Optimizer::Adam { .. } => (vec![0.0f64; n_params], vec![0.0f64; n_params]),
        Optimizer::Sgd => (Vec::new(), Vec::new()),
    };
    let mut curve = LossCurve::default();

    for step in 0..config.steps {
        let batch: Vec<Vec<u32>> = (0..config.batch_size)
            .map(|_| usable[rng.gen_range(0..usable.len())].clone())
            .collect();
        let (loss, mut grads) = loss_and_grad(&weights, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        curve.losses.push(loss);

        let mut gscale = 1.0;
        if let Some(clip) = config.grad_clip {
            let norm = grads
                .named_params()
                .iter()
                .flat_map(|(_, _, g)| g.iter())
                .map(|g| g.as_f64() * g.as_f64())
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence { step, loss: norm });
            }
            if norm > clip {
                gscale = clip / norm;
            }
        }

        let lr = config.lr_at(step);
        let mut idx = 0usize;
        for (p, g) in weights.params_mut().into_iter().zip(grads.params_mut()) {
            match config.optimizer {
                Optimizer::Sgd => {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv = T::of(pv.as_f64() - lr * gscale * gv.as_f64());
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let t = (step + 1) as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        let gr = gv.as_f64() * gscale;
                        m1[idx] = beta1 * m1[idx] + (1.0 - beta1) * gr;
                        m2[idx] = beta2 * m2[idx] + (1.0 - beta2) * gr * gr;
                        let update = (m1[idx] / bc1) / ((m2[idx] / bc2).sqrt() + eps);
                        *pv = T::of(pv.as_f64() - lr * update);
                        idx += 1;
                    }
                }
            }
        }
        if !weights.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: f64::NAN,
            });
        }
        if step % 100 == 0 {
            log::debug!("step {step} loss {loss:.4} lr {lr:.5}");
        }
    }
    Ok((weights, curve))
}
