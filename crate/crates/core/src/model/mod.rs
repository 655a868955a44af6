//! PhenoFormer-style backbone: linear encoder, two transformer encoder
//! layers over the series plus one learnt token per species, and a linear
//! decoder on the token outputs. Also hosts the adversarial discriminator
//! and the hybrid layer normalization used for target-domain inference.

mod checkpoint;
mod layers;
mod phenoformer;

pub use checkpoint::{BatchNormState, Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{
    batch_vector_stats, BatchNorm, LayerNorm, Linear, Mlp, MultiHeadAttention, Observation, RunningStats,
    TransformerLayer, LN_EPS,
};
pub use phenoformer::{sinusoidal_positions, Forward, PhenoFormer, Standardizer, T1Output};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a normalization layer treats its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Per-vector statistics; hybrid layers record running source statistics.
    SourceTrain,
    /// Per-vector statistics, nothing recorded.
    SourceEval,
    /// Hybrid layers normalize with the recorded source statistics; standard
    /// layers behave as in `SourceEval`.
    TargetEval,
}

/// Which transformer layers use hybrid layer normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HybridPlacement {
    None,
    #[default]
    SecondLayer,
    BothLayers,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    /// One `D -> 1` map applied to every species token.
    #[default]
    Shared,
    /// A separate `D -> 1` map per species token.
    PerSpecies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input channels C.
    pub channels: usize,
    /// Series length T in days.
    pub seq_len: usize,
    /// Species count S (one learnt token each).
    pub species: usize,
    /// Embedding width D.
    pub dim: usize,
    /// Discriminator hidden width F.
    pub disc_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Running-statistics momentum m of hybrid normalization.
    pub momentum: f64,
    /// Days averaged into one encoder time step (1 keeps daily resolution).
    pub pool: usize,
    pub decoder: DecoderKind,
    pub hybrid: HybridPlacement,
    /// Output width of the discriminator MLP; `None` builds no discriminator.
    pub discriminator_out: Option<usize>,
    /// Batch normalization in front of the decoder (AdaBN baseline).
    pub decoder_batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 7,
            seq_len: 365,
            species: 5,
            dim: 64,
            disc_dim: 128,
            heads: 4,
            ffn_dim: 128,
            momentum: 0.1,
            pool: 1,
            decoder: DecoderKind::Shared,
            hybrid: HybridPlacement::SecondLayer,
            discriminator_out: None,
            decoder_batch_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("channels", self.channels),
            ("seq_len", self.seq_len),
            ("species", self.species),
            ("dim", self.dim),
            ("disc_dim", self.disc_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("pool", self.pool),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.dim ({}) must be divisible by model.heads ({})",
                self.dim, self.heads
            )));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!("model.momentum must be in (0, 1], got {}", self.momentum)));
        }
        if self.pool > self.seq_len {
            return Err(Error::Config("model.pool exceeds model.seq_len".into()));
        }
        if self.discriminator_out == Some(0) {
            return Err(Error::Config("model.discriminator_out must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of encoder time steps after pooling.
    pub fn steps(&self) -> usize {
        self.seq_len.div_ceil(self.pool)
    }

    /// Closed-form learnable parameter count.
    pub fn parameter_count(&self) -> usize {
        let (c, s, d, f, h) = (self.channels, self.species, self.dim, self.disc_dim, self.ffn_dim);
        let encoder = c * d + d;
        let tokens = s * d;
        let layer = 4 * (d * d + d) + 2 * d + (d * h + h) + (h * d + d) + 2 * d;
        let decoder = match self.decoder {
            DecoderKind::Shared => d + 1,
            DecoderKind::PerSpecies => s * d + s,
        };
        let bn = if self.decoder_batch_norm { 2 * d } else { 0 };
        let disc = self
            .discriminator_out
            .map_or(0, |o| (s * d) * f + f + f * f + f + f * o + o);
        encoder + tokens + 2 * layer + decoder + bn + disc
    }
}
