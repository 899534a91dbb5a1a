use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::params::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SmoothL1,
    L1,
    CrossEntropy,
    HybridHmp,
}

/// Optimization and architecture knobs shared by all baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Weight of the geographic term in the hybrid mobility loss.
    pub geo_weight: f64,
    pub dropout_p: f64,
    /// Hidden widths of the feed-forward regressors.
    pub mlp_hidden: Vec<usize>,
    /// Hidden layers (0-based) followed by dropout.
    pub dropout_after: Vec<usize>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub attention_heads: usize,
    pub causal_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            loss: LossKind::SmoothL1,
            geo_weight: 0.7,
            dropout_p: 0.2,
            mlp_hidden: vec![50, 100, 50],
            dropout_after: vec![1],
            lstm_hidden: 128,
            lstm_layers: 2,
            attention_heads: 4,
            causal_attention: true,
        }
    }
}

impl TrainConfig {
    pub fn regression() -> Self {
        Self::default()
    }

    pub fn intensity() -> Self {
        Self {
            loss: LossKind::L1,
            ..Self::default()
        }
    }

    pub fn tte() -> Self {
        Self {
            loss: LossKind::L1,
            ..Self::default()
        }
    }

    pub fn hmp() -> Self {
        Self {
            loss: LossKind::HybridHmp,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NnError::InvalidConfig(msg));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.geo_weight) {
            return bad(format!("geo_weight must be in [0,1], got {}", self.geo_weight));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0,1), got {}", self.dropout_p));
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return bad("lstm_hidden and lstm_layers must be >= 1".into());
        }
        if self.attention_heads == 0 || self.lstm_hidden % self.attention_heads != 0 {
            return bad(format!(
                "lstm_hidden {} not divisible by attention_heads {}",
                self.lstm_hidden, self.attention_heads
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
