//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// LayerNorm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_voxels: usize,
    pub n_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub head_hidden: usize,
    pub head_out: usize,
    /// CASA projection width `C`.
    pub casa_dim: usize,
    /// Teacher CASA call reuses the student's weights when set; otherwise it
    /// uses an EMA copy.
    pub casa_shared: bool,
}

impl ModelConfig {
    /// The smallest configuration that exercises every code path:
    /// 4 tokens of 8 voxels, `D = 8`, one block per stack.
    pub fn micro() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                patch_voxels: 8,
                n_tokens: 4,
            },
            dec_dim: 4,
            dec_depth: 1,
            dec_heads: 1,
            head_hidden: 8,
            head_out: 8,
            casa_dim: 8,
            casa_shared: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let positive = [
            ("embed_dim", e.embed_dim),
            ("depth", e.depth),
            ("heads", e.heads),
            ("mlp_ratio", e.mlp_ratio),
            ("patch_voxels", e.patch_voxels),
            ("n_tokens", e.n_tokens),
            ("dec_dim", self.dec_dim),
            ("dec_depth", self.dec_depth),
            ("dec_heads", self.dec_heads),
            ("head_hidden", self.head_hidden),
            ("head_out", self.head_out),
            ("casa_dim", self.casa_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !e.embed_dim.is_multiple_of(e.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                e.embed_dim, e.heads
            )));
        }
        if !self.dec_dim.is_multiple_of(self.dec_heads) {
            return Err(Error::Config(format!(
                "dec_dim {} not divisible by dec_heads {}",
                self.dec_dim, self.dec_heads
            )));
        }
        Ok(())
    }

    /// Whether parameter `name` has an EMA copy in the target branch.
    pub fn is_target_key(&self, name: &str) -> bool {
        name.starts_with("enc.") || name.starts_with("head.") || (!self.casa_shared && name.starts_with("casa."))
    }
}
