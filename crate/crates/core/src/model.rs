//! Transformer model: configuration, initialization and the forward pass.
//!
//! The architecture is a stack of identical single-head post-norm blocks.
//! For input rows `x` (one per token):
//!
//! ```text
//! Q = x Wq    K = x Wk    V = x Wv
//! u = softmax(Q K^T / sqrt(s)) V Wo
//! v = norm(u + x; gamma1, beta1)
//! z = (silu(v W1) .* (v W3)) W2
//! y = norm(z + v; gamma2, beta2)
//! ```
//!
//! Attention is bidirectional (no causal mask) and `s` is the attention
//! scale, which defaults to the model width. Logits are `y Wcls` at every
//! position; task readout uses the last position only.

use crate::error::{CoreError, Result};
use crate::tensor::{self, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Which row normalization the blocks use. Beta parameters are carried but
/// ignored under `RmsNorm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: u32,
    pub model_dim: u32,
    pub ffn_dim: u32,
    pub num_layers: u32,
    pub max_seq_len: u32,
    #[serde(default = "default_norm")]
    pub norm_kind: NormKind,
    /// Attention scale; `None` means "use `model_dim`".
    #[serde(default)]
    pub attn_scale: Option<u32>,
    #[serde(default)]
    pub use_positional: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_norm() -> NormKind {
    NormKind::LayerNorm
}

impl ModelConfig {
    pub fn attn_scale(&self) -> u32 {
        self.attn_scale.unwrap_or(self.model_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_layers", self.num_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.attn_scale == Some(0) {
            return Err(CoreError::InvalidConfig(
                "attn_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of one block, in the order they appear on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_1: Matrix,
    pub w_3: Matrix,
    pub w_2: Matrix,
    pub gamma1: Vec<f64>,
    pub beta1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub beta2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlainModel {
    pub config: ModelConfig,
    pub w_emb: Matrix,
    pub pos_emb: Option<Matrix>,
    pub blocks: Vec<BlockWeights>,
    pub w_cls: Matrix,
}

/// Draw a fresh model. All matrices are i.i.d. Gaussian with standard
/// deviation `1/sqrt(model_dim)`; gammas start at one, betas at zero. The
/// draw order is fixed (embedding, positional, blocks front to back with
/// each block's matrices in declaration order, classifier) so a seed pins
/// every weight.
pub fn init_model(config: &ModelConfig) -> Result<PlainModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sd = 1.0 / (config.model_dim as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("valid normal");
    let mut draw = |rows: usize, cols: usize| -> Matrix {
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized buffer")
    };

    let (v, d, m) = (
        config.vocab_size as usize,
        config.model_dim as usize,
        config.ffn_dim as usize,
    );
    let w_emb = draw(v, d);
    let pos_emb = config
        .use_positional
        .then(|| draw(config.max_seq_len as usize, d));
    let mut blocks = Vec::with_capacity(config.num_layers as usize);
    for _ in 0..config.num_layers {
        blocks.push(BlockWeights {
            w_q: draw(d, d),
            w_k: draw(d, d),
            w_v: draw(d, d),
            w_o: draw(d, d),
            w_1: draw(d, m),
            w_3: draw(d, m),
            w_2: draw(m, d),
            gamma1: vec![1.0; d],
            beta1: vec![0.0; d],
            gamma2: vec![1.0; d],
            beta2: vec![0.0; d],
        });
    }
    let w_cls = draw(d, v);
    Ok(PlainModel {
        config: config.clone(),
        w_emb,
        pos_emb,
        blocks,
        w_cls,
    })
}

pub(crate) fn norm(kind: NormKind, x: &Matrix, gamma: &[f64], beta: &[f64]) -> Result<Matrix> {
    match kind {
        NormKind::LayerNorm => tensor::layernorm(x, gamma, beta, NORM_EPS),
        NormKind::RmsNorm => tensor::rmsnorm(x, gamma, NORM_EPS),
    }
}

/// One block applied to `x` (`seq_len` x `d`).
pub(crate) fn block_forward(cfg: &ModelConfig, b: &BlockWeights, x: &Matrix) -> Result<Matrix> {
    let q = tensor::matmul(x, &b.w_q)?;
    let k = tensor::matmul(x, &b.w_k)?;
    let v = tensor::matmul(x, &b.w_v)?;
    let scores = tensor::matmul(&q, &tensor::transpose(&k))?;
    let attn = tensor::softmax_rows(&scores, (cfg.attn_scale() as f64).sqrt());
    let u = tensor::matmul(&tensor::matmul(&attn, &v)?, &b.w_o)?;
    let r1 = tensor::add(&u, x)?;
    let vn = norm(cfg.norm_kind, &r1, &b.gamma1, &b.beta1)?;
    let gate = tensor::silu(&tensor::matmul(&vn, &b.w_1)?);
    let lin = tensor::matmul(&vn, &b.w_3)?;
    let z = tensor::matmul(&tensor::mul_elem(&gate, &lin)?, &b.w_2)?;
    let r2 = tensor::add(&z, &vn)?;
    norm(cfg.norm_kind, &r2, &b.gamma2, &b.beta2)
}

/// Look up embedding rows for `ids` and add positional rows when enabled.
pub(crate) fn embed(model: &PlainModel, ids: &[u32]) -> Result<Matrix> {
    let cfg = &model.config;
    if ids.len() > cfg.max_seq_len as usize {
        return Err(CoreError::ShapeMismatch {
            op: "embed",
            detail: format!("sequence {} exceeds max {}", ids.len(), cfg.max_seq_len),
        });
    }
    let d = cfg.model_dim as usize;
    let mut x = Matrix::zeros(ids.len(), d);
    for (t, &id) in ids.iter().enumerate() {
        if id >= cfg.vocab_size {
            return Err(CoreError::IdOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        x.row_mut(t).copy_from_slice(model.w_emb.row(id as usize));
    }
    if let Some(pos) = &model.pos_emb {
        let mut p = pos.clone();
        p.truncate_rows(ids.len());
        x = tensor::add(&x, &p)?;
    }
    Ok(x)
}

/// Run the stacked blocks and classifier on embedded input rows.
pub(crate) fn trunk_forward(
    cfg: &ModelConfig,
    blocks: &[BlockWeights],
    w_cls: &Matrix,
    mut x: Matrix,
) -> Result<Matrix> {
    for b in blocks {
        x = block_forward(cfg, b, &x)?;
    }
    tensor::matmul(&x, w_cls)
}

/// Full forward pass: logits for every position, `seq_len` x `vocab_size`.
pub fn forward(model: &PlainModel, ids: &[u32]) -> Result<Matrix> {
    let x = embed(model, ids)?;
    trunk_forward(&model.config, &model.blocks, &model.w_cls, x)
}

/// Logits at the last position only.
pub fn forward_last(model: &PlainModel, ids: &[u32]) -> Result<Vec<f64>> {
    let logits = forward(model, ids)?;
    Ok(logits.row(logits.rows() - 1).to_vec())
}
