//! Analytic operation counts and the instrumented counter that checks them.
//!
//! One accounting policy everywhere: a multiply-accumulate is 2 operations,
//! so a (a x b) by (b x c) product costs `2abc`; elementwise maps cost 1 per
//! element; a softmax row of width w costs `5w` (max, shift, exp, sum,
//! divide); a normalization row of width w costs `6w`; gathers, transposes
//! and permutations cost 0; a sparse k-hot embedding costs `nnz * d`.
//!
//! The closed forms below are derived by walking the forward pass kernel by
//! kernel under that policy, and the instrumented interpreter (the same
//! kernels, counting as they go) must agree with them to the last operation.
//! On top of the full forward cost, each deployment scheme pins a different
//! slice of the work inside the trusted enclave; those slices are computed
//! here too, per sequence and scaled to a token budget.

use crate::error::Result;
use crate::model::{ModelConfig, NormKind, PlainModel};
use crate::obfuscate::min_hot_count;
use crate::tensor;
use serde::{Deserialize, Serialize};

// ============================================================
// Closed forms
// ============================================================

/// One transformer block on `n` positions:
/// `8nd^2 + 4n^2 d + 5n^2 + 14nd + 6ndm + 2nm`.
///
/// Breakdown: QKV and output projections `8nd^2`; score and context products
/// `4n^2 d`; softmax `5n^2`; two residual adds and two norms `14nd`; the two
/// FFN up-projections and the down-projection `6ndm`; SiLU and gating `2nm`.
pub fn block_flops(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.model_dim as u64;
    let m = cfg.ffn_dim as u64;
    8 * n * d * d + 4 * n * n * d + 5 * n * n + 14 * n * d + 6 * n * d * m + 2 * n * m
}

/// Full forward pass on `n` positions: positional add (when present), all
/// blocks, classifier.
pub fn forward_flops(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.model_dim as u64;
    let v = cfg.vocab_size as u64;
    let l = cfg.num_layers as u64;
    let pos = if cfg.use_positional { n * d } else { 0 };
    pos + l * block_flops(cfg, n) + 2 * n * d * v
}

/// Sequences needed to push `token_count` tokens through at `n` per pass.
pub fn sequences_for(token_count: u64, n: u64) -> u64 {
    token_count.div_ceil(n)
}

// ============================================================
// Enclave-resident shares per deployment scheme
// ============================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeeScheme {
    /// First block runs inside the enclave.
    Serdab,
    /// Last block and the classifier run inside the enclave.
    Darknetz,
    /// Every nonlinearity (softmax, norms, activation gating) runs inside.
    Shadownet,
    /// Only pad authorization and offset removal run inside.
    Distillock,
}

impl TeeScheme {
    pub const ALL: [TeeScheme; 4] = [
        TeeScheme::Serdab,
        TeeScheme::Darknetz,
        TeeScheme::Shadownet,
        TeeScheme::Distillock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TeeScheme::Serdab => "serdab",
            TeeScheme::Darknetz => "darknetz",
            TeeScheme::Shadownet => "shadownet",
            TeeScheme::Distillock => "distillock",
        }
    }
}

/// Enclave-resident operations for one sequence of `n` positions. `hot` is
/// the per-position pad weight count (only the last scheme uses it).
pub fn tee_flops(scheme: TeeScheme, cfg: &ModelConfig, n: u64, hot: u64) -> u64 {
    let d = cfg.model_dim as u64;
    let m = cfg.ffn_dim as u64;
    let v = cfg.vocab_size as u64;
    let l = cfg.num_layers as u64;
    match scheme {
        TeeScheme::Serdab => block_flops(cfg, n),
        TeeScheme::Darknetz => block_flops(cfg, n) + 2 * n * d * v,
        TeeScheme::Shadownet => l * (5 * n * n + 12 * n * d + 2 * n * m),
        TeeScheme::Distillock => n * (hot + 1) + n * d,
    }
}

// ============================================================
// Instrumented measurement
// ============================================================

/// Run a forward pass with the kernel counter on and return its exact
/// operation count next to the logits. Counting is per thread, so parallel
/// callers do not disturb each other; the pass itself must be invoked from
/// the measuring thread (which it is, since kernels report on the caller's
/// thread even when their inner loops fan out).
pub fn measured_forward(model: &PlainModel, ids: &[u32]) -> Result<(u64, tensor::Matrix)> {
    tensor::tally_start();
    let result = crate::model::forward(model, ids);
    let ops = tensor::tally_stop();
    Ok((ops, result?))
}

// ============================================================
// Reporting
// ============================================================

#[derive(Debug, Clone, PartialEq)]
pub struct TeeRow {
    pub scheme: TeeScheme,
    /// Enclave-resident operations for one sequence.
    pub per_seq: u64,
    /// Enclave-resident operations across the whole token budget.
    pub total: u128,
    /// Share of the full forward cost that stays inside the enclave.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeeReport {
    pub seq_len: u64,
    pub hot: u64,
    pub token_count: u64,
    pub sequences: u64,
    pub forward_per_seq: u64,
    pub forward_total: u128,
    pub rows: Vec<TeeRow>,
}

/// Compare every scheme's enclave-resident share on one model shape and
/// token budget. `hot` defaults to the vocabulary's minimum pad weight.
pub fn tee_report(cfg: &ModelConfig, n: u64, hot: Option<u64>, token_count: u64) -> TeeReport {
    let hot = hot.unwrap_or_else(|| min_hot_count(cfg.vocab_size) as u64);
    let seqs = sequences_for(token_count, n);
    let fwd = forward_flops(cfg, n);
    let fwd_total = fwd as u128 * seqs as u128;
    let rows = TeeScheme::ALL
        .iter()
        .map(|&scheme| {
            let per_seq = tee_flops(scheme, cfg, n, hot);
            TeeRow {
                scheme,
                per_seq,
                total: per_seq as u128 * seqs as u128,
                fraction: per_seq as f64 / fwd as f64,
            }
        })
        .collect();
    TeeReport {
        seq_len: n,
        hot,
        token_count,
        sequences: seqs,
        forward_per_seq: fwd,
        forward_total: fwd_total,
        rows,
    }
}

/// Production-scale shapes used by the built-in comparison presets. These
/// exist purely for arithmetic; nothing this size is ever allocated.
pub fn reference_configs() -> Vec<(&'static str, ModelConfig)> {
    let shape = |v: u32, d: u32, m: u32, l: u32| ModelConfig {
        vocab_size: v,
        model_dim: d,
        ffn_dim: m,
        num_layers: l,
        max_seq_len: 4096,
        norm_kind: NormKind::RmsNorm,
        attn_scale: None,
        use_positional: false,
        seed: 0,
    };
    vec![
        ("llama-3.2-3b-shape", shape(128_256, 3072, 8192, 28)),
        ("qwen-2.5-1.5b-shape", shape(151_936, 1536, 8960, 28)),
    ]
}

// ============================================================
// Tests
// ============================================================
