//! Affine FLOPs cost model for an encoder with prunable FFN filters.
//!
//! Only GEMM-type multiply-adds are counted (2 FLOPs each). Per layer and
//! sequence of length `s` with hidden size `d`:
//!
//! * attention: `8·d²·s` for the Q, K, V and output projections plus
//!   `4·d·s²` for the score and value products;
//! * each FFN filter: `4·d·s` (one column of `W1` and one row of `W2` per
//!   token).
//!
//! Layer norms, softmax, bias adds and embeddings are ignored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub seq_len: usize,
    pub num_layers: usize,
    pub num_filters: usize,
    /// Attention FLOPs per layer.
    pub attention: u64,
    /// FLOPs per retained FFN filter.
    pub per_filter: u64,
}

impl FlopsModel {
    pub fn new(config: &ModelConfig, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Validation("FLOPs model needs seq_len ≥ 1".into()));
        }
        let d = config.hidden_dim as u64;
        let s = seq_len as u64;
        Ok(Self {
            seq_len,
            num_layers: config.num_layers,
            num_filters: config.num_filters,
            attention: 8 * d * d * s + 4 * d * s * s,
            per_filter: 4 * d * s,
        })
    }

    /// FLOPs of the unpruned model.
    pub fn dense(&self) -> u64 {
        self.num_layers as u64 * (self.attention + self.num_filters as u64 * self.per_filter)
    }

    /// FLOPs with every FFN removed.
    pub fn floor(&self) -> u64 {
        self.num_layers as u64 * self.attention
    }

    /// FLOPs for `total` retained filters, however they are spread.
    pub fn with_total(&self, total: usize) -> u64 {
        self.floor() + total as u64 * self.per_filter
    }

    pub fn of(&self, retained: &[usize]) -> Result<u64> {
        if retained.len() != self.num_layers {
            return Err(Error::Validation(format!(
                "{} retained counts for {} layers",
                retained.len(),
                self.num_layers
            )));
        }
        if let Some((l, &n)) = retained.iter().enumerate().find(|(_, &n)| n > self.num_filters) {
            return Err(Error::Validation(format!(
                "layer {l} retains {n} filters but has only {}",
                self.num_filters
            )));
        }
        Ok(self.with_total(retained.iter().sum()))
    }

    pub fn relative(&self, retained: &[usize]) -> Result<f64> {
        Ok(self.of(retained)? as f64 / self.dense() as f64)
    }

    /// Whether `total` filters fit in `budget · dense`.
    pub fn fits(&self, total: usize, budget: f64) -> bool {
        self.with_total(total) as f64 <= budget * self.dense() as f64
    }

    /// Largest total filter count `k ≤ L·N` whose FLOPs fit the budget.
    pub fn budget_to_k(&self, budget: f64) -> Result<usize> {
        if !(budget > 0.0 && budget <= 1.0) {
            return Err(Error::Validation(format!("FLOPs budget {budget} outside (0, 1]")));
        }
        let max_k = self.num_layers * self.num_filters;
        if !self.fits(0, budget) {
            return Err(Error::InfeasibleBudget {
                budget,
                floor: self.floor(),
                floor_fraction: self.floor() as f64 / self.dense() as f64,
            });
        }
        let slack = budget * self.dense() as f64 - self.floor() as f64;
        let mut k = ((slack / self.per_filter as f64).floor().max(0.0) as usize).min(max_k);
        // settle rounding at the boundary against the exact predicate
        while k > 0 && !self.fits(k, budget) {
            k -= 1;
        }
        while k < max_k && self.fits(k + 1, budget) {
            k += 1;
        }
        Ok(k)
    }
}

/// FLOPs of a model retaining `retained[ℓ]` filters in layer `ℓ`.
pub fn flops_of(config: &ModelConfig, retained: &[usize], seq_len: usize) -> Result<u64> {
    FlopsModel::new(config, seq_len)?.of(retained)
}

/// Total filter budget for a FLOPs fraction `budget` of the dense model.
pub fn budget_to_k(config: &ModelConfig, seq_len: usize, budget: f64) -> Result<usize> {
    FlopsModel::new(config, seq_len)?.budget_to_k(budget)
}
