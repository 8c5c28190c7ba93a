// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a pre-norm decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Hidden width of the MLP. Defaults to `4 * d_model`.
    #[serde(default)]
    pub d_mlp: Option<usize>,
    pub seed: u64,
}

impl ModelConfig {
    /// The default desk-scale model: 4 layers, `d_model` 128, 4 heads.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            vocab_size,
            max_seq: 192,
            d_mlp: Some(256),
            seed: 0,
        }
    }

    /// Pythia-70m geometry: `d_model` 512, 6 layers, 8 heads.
    pub fn pythia_70m() -> Self {
        Self {
            n_layers: 6,
            d_model: 512,
            n_heads: 8,
            vocab_size: 50_304,
            max_seq: 2048,
            d_mlp: Some(2048),
            seed: 0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_width(&self) -> usize {
        self.d_mlp.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("d_mlp", self.mlp_width()),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::InvalidConfig("vocab_size exceeds u32 range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_dividing_heads() {
        let mut c = ModelConfig::toy(50);
        c.d_model = 64;
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_zero_dims() {
        let mut c = ModelConfig::toy(50);
        c.n_layers = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(50);
        c.vocab_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pythia_preset_geometry() {
        let c = ModelConfig::pythia_70m();
        c.validate().unwrap();
        assert_eq!((c.d_model, c.n_layers, c.d_head()), (512, 6, 64));
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"n_layers":1,"d_model":8,"n_heads":2,"vocab_size":5,"max_seq":4,"seed":0,"extra":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(bad).is_err());
    }
}
