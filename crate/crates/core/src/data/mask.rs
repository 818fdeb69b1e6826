//! Random token masking.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

/// Partition of `0..n_tokens` into masked and visible tokens, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub n_tokens: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskSpec {
    pub fn none(n_tokens: usize) -> Self {
        MaskSpec {
            n_tokens,
            masked: Vec::new(),
            visible: (0..n_tokens).collect(),
        }
    }

    pub fn from_masked(n_tokens: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= n_tokens) {
            return Err(Error::invalid("masked index out of range"));
        }
        let visible = (0..n_tokens).filter(|t| masked.binary_search(t).is_err()).collect();
        Ok(MaskSpec {
            n_tokens,
            masked,
            visible,
        })
    }

    pub fn n_masked(&self) -> usize {
        self.masked.len()
    }

    /// Position of each token in the `[visible..., masked...]` ordering.
    pub fn restore_order(&self) -> Vec<usize> {
        let mut pos = vec![0; self.n_tokens];
        for (i, &t) in self.visible.iter().chain(&self.masked).enumerate() {
            pos[t] = i;
        }
        pos
    }
}

/// `round_half_up(ratio * n)`
pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    (ratio * n_tokens as f64 + 0.5).floor() as usize
}

/// Masks a uniformly random subset of `round(ratio * n_tokens)` tokens.
pub fn mask_random(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n_m = masked_count(n_tokens, ratio).min(n_tokens);
    let mut order: Vec<usize> = (0..n_tokens).collect();
    order.shuffle(&mut seed::rng(seed));
    order.truncate(n_m);
    MaskSpec::from_masked(n_tokens, order)
}
