// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::{Tensor, TensorArchive};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::model::ModelConfig;
use crate::scalar::Scalar;

/// Parameters of one transformer block.
///
/// Query/key/value matrices are `d_model × d_model` with head `h` owning
/// columns `h*d_head..(h+1)*d_head`; the output projection owns the matching
/// rows, so each head has its own input projection and output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub w_query: Array2<T>,
    pub w_key: Array2<T>,
    pub w_value: Array2<T>,
    pub w_out: Array2<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
    pub w_mlp_in: Array2<T>,
    pub b_mlp_in: Array1<T>,
    pub w_mlp_out: Array2<T>,
    pub b_mlp_out: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub token_embed: Array2<T>,
    pub pos_embed: Array2<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_ln_gain: Array1<T>,
    pub final_ln_bias: Array1<T>,
    pub unembed: Array2<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<T> {
        let normal = Normal::new(0.0, std).expect("finite std");
        Array2::from_shape_fn((rows, cols), |_| T::of(normal.sample(&mut self.rng)))
    }
}

impl<T: Scalar> LayerWeights<T> {
    fn zeros(d: usize, m: usize) -> Self {
        Self {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w_query: Array2::zeros((d, d)),
            w_key: Array2::zeros((d, d)),
            w_value: Array2::zeros((d, d)),
            w_out: Array2::zeros((d, d)),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w_mlp_in: Array2::zeros((d, m)),
            b_mlp_in: Array1::zeros(m),
            w_mlp_out: Array2::zeros((m, d)),
            b_mlp_out: Array1::zeros(d),
        }
    }
}

/// Initialises weights deterministically from `config.seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<ModelWeights<T>> {
    config.validate()?;
    let d = config.d_model;
    let m = config.mlp_width();
    let v = config.vocab_size;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let token_embed = init.matrix(v, d, 0.1);
    let pos_embed = init.matrix(config.max_seq, d, 0.1);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let in_std = 1.0 / (d as f64).sqrt();
        layers.push(LayerWeights {
            ln1_gain: Array1::ones(d),
            ln1_bias: Array1::zeros(d),
            w_query: init.matrix(d, d, in_std),
            w_key: init.matrix(d, d, in_std),
            w_value: init.matrix(d, d, in_std),
            w_out: init.matrix(d, d, in_std * residual_scale),
            ln2_gain: Array1::ones(d),
            ln2_bias: Array1::zeros(d),
            w_mlp_in: init.matrix(d, m, in_std),
            b_mlp_in: Array1::zeros(m),
            w_mlp_out: init.matrix(m, d, residual_scale / (m as f64).sqrt()),
            b_mlp_out: Array1::zeros(d),
        });
    }
    let unembed = init.matrix(d, v, 1.0 / (d as f64).sqrt());
    Ok(ModelWeights {
        config: config.clone(),
        token_embed,
        pos_embed,
        layers,
        final_ln_gain: Array1::ones(d),
        final_ln_bias: Array1::zeros(d),
        unembed,
    })
}

impl<T: Scalar> ModelWeights<T> {
    /// All-zero parameters with this config's shapes (used as a gradient buffer).
    pub fn zeros_like(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let m = config.mlp_width();
        Self {
            config: config.clone(),
            token_embed: Array2::zeros((config.vocab_size, d)),
            pos_embed: Array2::zeros((config.max_seq, d)),
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(d, m)).collect(),
            final_ln_gain: Array1::zeros(d),
            final_ln_bias: Array1::zeros(d),
            unembed: Array2::zeros((d, config.vocab_size)),
        }
    }

    /// Named parameter slices in archive (manifest) order.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        fn m2<'a, T>(out: &mut Vec<(String, Vec<usize>, &'a [T])>, name: String, a: &'a Array2<T>) {
            out.push((name, a.shape().to_vec(), a.as_slice().expect("standard layout")));
        }
        fn m1<'a, T>(out: &mut Vec<(String, Vec<usize>, &'a [T])>, name: String, a: &'a Array1<T>) {
            out.push((name, a.shape().to_vec(), a.as_slice().expect("standard layout")));
        }
        m2(&mut out, "embed.token".into(), &self.token_embed);
        m2(&mut out, "embed.position".into(), &self.pos_embed);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("blocks.{l}");
            m1(&mut out, format!("{p}.ln1.gain"), &layer.ln1_gain);
            m1(&mut out, format!("{p}.ln1.bias"), &layer.ln1_bias);
            m2(&mut out, format!("{p}.attn.query"), &layer.w_query);
            m2(&mut out, format!("{p}.attn.key"), &layer.w_key);
            m2(&mut out, format!("{p}.attn.value"), &layer.w_value);
            m2(&mut out, format!("{p}.attn.out"), &layer.w_out);
            m1(&mut out, format!("{p}.ln2.gain"), &layer.ln2_gain);
            m1(&mut out, format!("{p}.ln2.bias"), &layer.ln2_bias);
            m2(&mut out, format!("{p}.mlp.in"), &layer.w_mlp_in);
            m1(&mut out, format!("{p}.mlp.in_bias"), &layer.b_mlp_in);
            m2(&mut out, format!("{p}.mlp.out"), &layer.w_mlp_out);
            m1(&mut out, format!("{p}.mlp.out_bias"), &layer.b_mlp_out);
        }
        m1(&mut out, "final_ln.gain".into(), &self.final_ln_gain);
        m1(&mut out, "final_ln.bias".into(), &self.final_ln_bias);
        m2(&mut out, "unembed".into(), &self.unembed);
        out
    }

    /// Mutable parameter slices, same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            self.token_embed.as_slice_mut().expect("standard layout"),
            self.pos_embed.as_slice_mut().expect("standard layout"),
        ];
        for layer in &mut self.layers {
            out.push(layer.ln1_gain.as_slice_mut().expect("standard layout"));
            out.push(layer.ln1_bias.as_slice_mut().expect("standard layout"));
            out.push(layer.w_query.as_slice_mut().expect("standard layout"));
            out.push(layer.w_key.as_slice_mut().expect("standard layout"));
            out.push(layer.w_value.as_slice_mut().expect("standard layout"));
            out.push(layer.w_out.as_slice_mut().expect("standard layout"));
            out.push(layer.ln2_gain.as_slice_mut().expect("standard layout"));
            out.push(layer.ln2_bias.as_slice_mut().expect("standard layout"));
            out.push(layer.w_mlp_in.as_slice_mut().expect("standard layout"));
            out.push(layer.b_mlp_in.as_slice_mut().expect("standard layout"));
            out.push(layer.w_mlp_out.as_slice_mut().expect("standard layout"));
            out.push(layer.b_mlp_out.as_slice_mut().expect("standard layout"));
        }
        out.push(self.final_ln_gain.as_slice_mut().expect("standard layout"));
        out.push(self.final_ln_bias.as_slice_mut().expect("standard layout"));
        out.push(self.unembed.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, _, s)| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params()
            .iter()
            .all(|(_, _, s)| s.iter().all(|v| v.is_finite()))
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::of(v.as_f64()));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::of(v.as_f64()));
        ModelWeights {
            config: self.config.clone(),
            token_embed: c2(&self.token_embed),
            pos_embed: c2(&self.pos_embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gain: c1(&l.ln1_gain),
                    ln1_bias: c1(&l.ln1_bias),
                    w_query: c2(&l.w_query),
                    w_key: c2(&l.w_key),
                    w_value: c2(&l.w_value),
                    w_out: c2(&l.w_out),
                    ln2_gain: c1(&l.ln2_gain),
                    ln2_bias: c1(&l.ln2_bias),
                    w_mlp_in: c2(&l.w_mlp_in),
                    b_mlp_in: c1(&l.b_mlp_in),
                    w_mlp_out: c2(&l.w_mlp_out),
                    b_mlp_out: c1(&l.b_mlp_out),
                })
                .collect(),
            final_ln_gain: c1(&self.final_ln_gain),
            final_ln_bias: c1(&self.final_ln_bias),
            unembed: c2(&self.unembed),
        }
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive {
            config: Some(self.config.clone()),
            ..Default::default()
        };
        for (name, shape, data) in self.named_params() {
            archive.push(Tensor::new(name, shape, data.iter().map(|v| v.as_f32()).collect())?);
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let config = archive
            .config
            .clone()
            .ok_or_else(|| Error::MalformedArchive("weights archive has no model config".into()))?;
        config.validate()?;
        let mut weights = Self::zeros_like(&config);
        let expected: Vec<(String, Vec<usize>)> = weights
            .named_params()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if archive.tensors.len() != expected.len() {
            return Err(Error::MalformedArchive(format!(
                "expected {} tensors, found {}",
                expected.len(),
                archive.tensors.len()
            )));
        }
        for ((name, shape), dst) in expected.iter().zip(weights.params_mut()) {
            let t = archive.expect(name, shape)?;
            for (d, s) in dst.iter_mut().zip(&t.data) {
                *d = T::of(*s as f64);
            }
        }
        Ok(weights)
    }

    /// Content hash over the config and every parameter (as f32 bytes).
    pub fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.config).expect("config serialises");
        for (name, _, data) in self.named_params() {
            bytes.extend_from_slice(name.as_bytes());
            for v in data {
                bytes.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

pub fn save_weights<T: Scalar>(weights: &ModelWeights<T>, path: impl AsRef<Path>) -> Result<()> {
    weights.to_archive()?.save(path)
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelWeights<T>> {
    ModelWeights::from_archive(&TensorArchive::load(path)?)
}
