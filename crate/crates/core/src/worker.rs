//! The untrusted side of the split pipeline: all heavy math, no secrets.
//!
//! The worker owns only shuffled weights. It answers three requests: embed a
//! batch of k-hot vocabulary rows, run the trunk on an authorized (already
//! shuffled) activation, and run a plain forward for callers with no enclave
//! at all. The last one exists to show what the shuffled weights are worth
//! on their own.

use crate::error::{CoreError, Result};
use crate::model::{self, PlainModel};
use crate::obfuscate::ObfModel;
use crate::tensor::{self, Matrix, SparseRows};

pub struct Worker {
    model: ObfModel,
}

impl Worker {
    pub fn new(model: ObfModel) -> Self {
        Worker { model }
    }

    pub fn fingerprint(&self) -> u64 {
        self.model.fingerprint
    }

    pub fn config(&self) -> &crate::model::ModelConfig {
        &self.model.inner.config
    }

    /// Multiply k-hot rows into the embedding table: `rows * W_emb`.
    /// Positional rows are not added here; that happens on the authorized
    /// activation so the enclave's offset subtraction stays exact.
    pub fn embed_sparse(&self, rows: &SparseRows) -> Result<Matrix> {
        rows.validate()?;
        let cfg = &self.model.inner.config;
        if rows.rows.len() > cfg.max_seq_len as usize {
            return Err(CoreError::ShapeMismatch {
                op: "embed_sparse",
                detail: format!(
                    "{} positions exceed max {}",
                    rows.rows.len(),
                    cfg.max_seq_len
                ),
            });
        }
        tensor::sparse_gather_sum(rows, &self.model.inner.w_emb)
    }

    /// Trunk pass over an authorized activation: add positional rows, run
    /// every block, project to logits. Logits come out in plain vocabulary
    /// order; the hidden-axis shuffle cancels inside the classifier.
    pub fn forward_authorized(&self, x: &Matrix) -> Result<Matrix> {
        let cfg = &self.model.inner.config;
        if x.cols() != cfg.model_dim as usize
            || x.rows() > cfg.max_seq_len as usize
            || x.rows() == 0
        {
            return Err(CoreError::ShapeMismatch {
                op: "forward_authorized",
                detail: format!(
                    "{}x{} activation for d={} max_seq={}",
                    x.rows(),
                    x.cols(),
                    cfg.model_dim,
                    cfg.max_seq_len
                ),
            });
        }
        let mut x = x.clone();
        if let Some(pos) = &self.model.inner.pos_emb {
            let mut p = pos.clone();
            p.truncate_rows(x.rows());
            x = tensor::add(&x, &p)?;
        }
        model::trunk_forward(cfg, &self.model.inner.blocks, &self.model.inner.w_cls, x)
    }

    /// What a caller without an enclave gets: the shuffled weights driven
    /// like an ordinary model.
    pub fn forward_unauthorized(&self, ids: &[u32]) -> Result<Matrix> {
        model::forward(&self.model.inner, ids)
    }

    /// Direct access for evaluation and distillation tooling.
    pub fn inner(&self) -> &PlainModel {
        &self.model.inner
    }
}
