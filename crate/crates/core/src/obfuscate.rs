//! Weight obfuscation: permutation secrets, the shuffled model, one-time
//! pads for input authorization, and the brute-force search-space math.
//!
//! Two permutations make up a secret: `pi_emb` over the vocabulary axis and
//! `pi` over the hidden axis. Shuffling every weight consistently with them
//! preserves the network's function on inputs that were permuted to match,
//! while leaving the raw weights useless on plain inputs. Row shuffles are
//! gathers (`out[i] = w[perm[i]]`) and column shuffles mirror them, so the
//! two cancel wherever a shuffled activation meets a shuffled weight.

use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, PlainModel};
use crate::tensor::{self, Matrix, PermIndex, SparseRows};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pairs a secret (or a secret holder) with the exact model file it was cut
/// for: FNV-1a over the model's init seed and the two permuted axis sizes.
pub fn model_fingerprint(cfg: &ModelConfig) -> u64 {
    let mut bytes = Vec::with_capacity(16);
    bytes.extend_from_slice(&cfg.seed.to_le_bytes());
    bytes.extend_from_slice(&cfg.vocab_size.to_le_bytes());
    bytes.extend_from_slice(&cfg.model_dim.to_le_bytes());
    fnv1a64(&bytes)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

// ============================================================
// Permutation secret
// ============================================================

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSecret {
    /// Vocabulary-axis permutation (length V).
    pub pi_emb: PermIndex,
    /// Hidden-axis permutation (length d).
    pub pi: PermIndex,
    /// Inverse of `pi_emb`, stored so token ids remap in O(1).
    pub pi_emb_inv: PermIndex,
    /// Inverse of `pi`.
    pub pi_inv: PermIndex,
    /// Fingerprint of the model this secret belongs to.
    pub fingerprint: u64,
}

/// Draw a fresh secret for `cfg`: first the vocabulary permutation, then the
/// hidden one, from a ChaCha8 stream seeded with `secret_seed`.
pub fn gen_secret(cfg: &ModelConfig, secret_seed: u64) -> PermutationSecret {
    let mut rng = ChaCha8Rng::seed_from_u64(secret_seed);
    let pi_emb = PermIndex::random(cfg.vocab_size as usize, &mut rng);
    let pi = PermIndex::random(cfg.model_dim as usize, &mut rng);
    let pi_emb_inv = pi_emb.inverse();
    let pi_inv = pi.inverse();
    PermutationSecret {
        pi_emb,
        pi,
        pi_emb_inv,
        pi_inv,
        fingerprint: model_fingerprint(cfg),
    }
}

impl PermutationSecret {
    /// Rebuild the inverses after loading the forward permutations from disk.
    pub fn from_parts(pi_emb: PermIndex, pi: PermIndex, fingerprint: u64) -> Self {
        let pi_emb_inv = pi_emb.inverse();
        let pi_inv = pi.inverse();
        PermutationSecret {
            pi_emb,
            pi,
            pi_emb_inv,
            pi_inv,
            fingerprint,
        }
    }
}

// ============================================================
// Obfuscated model
// ============================================================

/// A model whose weights have been shuffled under a [`PermutationSecret`].
/// The weights alone look like any other model of the same shape; the
/// fingerprint records which secret restores (and authorizes) it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObfModel {
    pub inner: PlainModel,
    pub fingerprint: u64,
}

/// Shuffle every weight of `model` under `secret`.
///
/// Tensors that consume activations have their input rows gathered by the
/// matching permutation; tensors that produce activations have their output
/// columns gathered; per-coordinate norm parameters follow the hidden axis.
pub fn obfuscate_model(model: &PlainModel, secret: &PermutationSecret) -> Result<ObfModel> {
    let cfg = &model.config;
    if secret.pi_emb.len() != cfg.vocab_size as usize || secret.pi.len() != cfg.model_dim as usize {
        return Err(CoreError::InvalidConfig(format!(
            "secret axes {}x{} do not fit model {}x{}",
            secret.pi_emb.len(),
            secret.pi.len(),
            cfg.vocab_size,
            cfg.model_dim
        )));
    }
    if secret.fingerprint != model_fingerprint(cfg) {
        return Err(CoreError::FingerprintMismatch {
            secret: secret.fingerprint,
            model: model_fingerprint(cfg),
        });
    }

    let pi_emb = &secret.pi_emb;
    let pi = &secret.pi;
    let mut out = model.clone();
    out.w_emb = tensor::apply_rows(&model.w_emb, pi_emb)?;
    if let Some(p) = &model.pos_emb {
        out.pos_emb = Some(tensor::apply_cols(p, pi)?);
    }
    for (dst, src) in out.blocks.iter_mut().zip(&model.blocks) {
        dst.w_q = tensor::apply_rows(&src.w_q, pi)?;
        dst.w_k = tensor::apply_rows(&src.w_k, pi)?;
        dst.w_v = tensor::apply_rows(&src.w_v, pi)?;
        dst.w_o = tensor::apply_cols(&src.w_o, pi)?;
        dst.w_1 = tensor::apply_rows(&src.w_1, pi)?;
        dst.w_3 = tensor::apply_rows(&src.w_3, pi)?;
        dst.w_2 = tensor::apply_cols(&src.w_2, pi)?;
        dst.gamma1 = tensor::apply_vec(&src.gamma1, pi)?;
        dst.beta1 = tensor::apply_vec(&src.beta1, pi)?;
        dst.gamma2 = tensor::apply_vec(&src.gamma2, pi)?;
        dst.beta2 = tensor::apply_vec(&src.beta2, pi)?;
    }
    out.w_cls = tensor::apply_rows(&model.w_cls, pi)?;
    Ok(ObfModel {
        inner: out,
        fingerprint: secret.fingerprint,
    })
}

// ============================================================
// One-time pads
// ============================================================

/// A single-use input pad: a k-hot mask over the vocabulary for each
/// sequence position, plus its dense embedding `mask * W_emb` precomputed at
/// provisioning time so online finalization is one subtraction.
#[derive(Debug, Clone, PartialEq)]
pub struct OtpPad {
    pub pad_id: u64,
    /// seq_len rows over the vocabulary, `hot` entries of 1.0 each.
    pub mask: SparseRows,
    /// seq_len x d dense offset, `mask * W_emb` in the plain basis.
    pub mask_emb: Matrix,
}

/// Draw one pad: per position, `hot` distinct vocabulary indices set to 1.0.
/// `w_emb` must be the plain (unshuffled) embedding table.
pub fn gen_otp(
    w_emb: &Matrix,
    seq_len: u32,
    hot: u32,
    rng: &mut ChaCha8Rng,
    pad_id: u64,
) -> Result<OtpPad> {
    let vocab = w_emb.rows();
    if hot == 0 || hot as usize > vocab {
        return Err(CoreError::InvalidConfig(format!(
            "pad hot count {} out of range for vocabulary {}",
            hot, vocab
        )));
    }
    let mut rows = Vec::with_capacity(seq_len as usize);
    for _ in 0..seq_len {
        let mut idx: Vec<u32> = rand::seq::index::sample(rng, vocab, hot as usize)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        idx.sort_unstable();
        rows.push(idx.into_iter().map(|i| (i, 1.0)).collect());
    }
    let mask = SparseRows::new(vocab as u32, rows)?;
    let mask_emb = tensor::sparse_gather_sum(&mask, w_emb)?;
    Ok(OtpPad {
        pad_id,
        mask,
        mask_emb,
    })
}

/// Seed a pad stream so pad `pad_id` is reproducible without storing it:
/// one ChaCha8 stream per pad, keyed inside a provisioning seed.
pub fn otp_rng(pads_seed: u64, pad_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(pads_seed);
    rng.set_stream(pad_id);
    rng
}

// ============================================================
// Search-space math
// ============================================================

/// Natural log of n!.
pub fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

fn factorial_u128(n: u64) -> u128 {
    (2..=n as u128).product()
}

/// Probability that a uniformly random guess recovers the hidden-axis
/// permutation: `1 / d!`. Exact integer arithmetic while d! fits in u128
/// (d <= 34), log-domain evaluation beyond that.
pub fn guess_probability(d: u64) -> f64 {
    if d <= 34 {
        1.0 / factorial_u128(d) as f64
    } else {
        (-ln_factorial(d)).exp()
    }
}

/// Smallest per-position hot count that keeps the pad search space at least
/// as large as the vocabulary's bit budget: `ceil(V / log2(V))`.
pub fn min_hot_count(vocab: u32) -> u32 {
    assert!(vocab >= 2, "min_hot_count needs a vocabulary of at least 2");
    let v = vocab as f64;
    (v / v.log2()).ceil() as u32
}

// ============================================================
// Tests
// ============================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, trunk_forward, ModelConfig, NormKind};
    use crate::tensor::apply_cols;
    use rand::Rng;

    fn cfg(norm: NormKind) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            model_dim: 6,
            ffn_dim: 8,
            num_layers: 2,
            max_seq_len: 7,
            norm_kind: norm,
            attn_scale: None,
            use_positional: true,
            seed: 77,
        }
    }

    #[test]
    fn secret_generation_is_deterministic() {
        let c = cfg(NormKind::LayerNorm);
        let a = gen_secret(&c, 9);
        let b = gen_secret(&c, 9);
        assert_eq!(a, b);
        let c2 = gen_secret(&c, 10);
        assert_ne!(a.pi_emb, c2.pi_emb);
    }

    #[test]
    fn inverses_invert() {
        let c = cfg(NormKind::LayerNorm);
        let s = gen_secret(&c, 1);
        for i in 0..s.pi.len() {
            assert_eq!(s.pi_inv.as_slice()[s.pi.as_slice()[i] as usize], i as u32);
        }
        for i in 0..s.pi_emb.len() {
            assert_eq!(
                s.pi_emb_inv.as_slice()[s.pi_emb.as_slice()[i] as usize],
                i as u32
            );
        }
    }

    #[test]
    fn fingerprint_tracks_seed_and_axes() {
        let base = cfg(NormKind::LayerNorm);
        let f0 = model_fingerprint(&base);
        let mut c = base.clone();
        c.seed = 78;
        assert_ne!(model_fingerprint(&c), f0);
        c = base.clone();
        c.vocab_size = 13;
        assert_ne!(model_fingerprint(&c), f0);
        c = base.clone();
        c.model_dim = 7;
        assert_ne!(model_fingerprint(&c), f0);
        c = base.clone();
        c.num_layers = 3;
        assert_eq!(
            model_fingerprint(&c),
            f0,
            "layer count is not part of the binding"
        );
    }

    /// The trunk is equivariant under the hidden-axis shuffle: running the
    /// shuffled weights on a column-shuffled activation gives the plain
    /// logits back untouched.
    fn trunk_cancellation(norm: NormKind) {
        let c = cfg(norm);
        let model = init_model(&c).unwrap();
        let secret = gen_secret(&c, 5);
        let obf = obfuscate_model(&model, &secret).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let mut x = Matrix::zeros(4, c.model_dim as usize);
            for v in x.as_mut_slice() {
                *v = rng.random_range(-2.0..2.0);
            }
            let plain = trunk_forward(&c, &model.blocks, &model.w_cls, x.clone()).unwrap();
            let xp = apply_cols(&x, &secret.pi).unwrap();
            let via_obf = trunk_forward(&c, &obf.inner.blocks, &obf.inner.w_cls, xp).unwrap();
            assert!(
                plain.max_abs_diff(&via_obf) < 1e-9,
                "trunk equivariance broke under {:?}",
                norm
            );
        }
    }

    #[test]
    fn obfuscated_trunk_matches_plain_on_shuffled_input_layernorm() {
        trunk_cancellation(NormKind::LayerNorm);
    }

    #[test]
    fn obfuscated_trunk_matches_plain_on_shuffled_input_rmsnorm() {
        trunk_cancellation(NormKind::RmsNorm);
    }

    #[test]
    fn norm_params_follow_the_hidden_axis() {
        // norm(x P^T; gamma P^T, beta P^T) == norm(x; gamma, beta) P^T
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [NormKind::LayerNorm, NormKind::RmsNorm] {
            for _ in 0..50 {
                let d = 9;
                let mut x = Matrix::zeros(3, d);
                for v in x.as_mut_slice() {
                    *v = rng.random_range(-3.0..3.0);
                }
                let gamma: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
                let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
                let p = PermIndex::random(d, &mut rng);
                let lhs = crate::model::norm(
                    kind,
                    &apply_cols(&x, &p).unwrap(),
                    &tensor::apply_vec(&gamma, &p).unwrap(),
                    &tensor::apply_vec(&beta, &p).unwrap(),
                )
                .unwrap();
                let rhs =
                    apply_cols(&crate::model::norm(kind, &x, &gamma, &beta).unwrap(), &p).unwrap();
                assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            }
        }
    }

    #[test]
    fn obfuscation_rejects_foreign_secret() {
        let c = cfg(NormKind::LayerNorm);
        let model = init_model(&c).unwrap();
        let mut other = c.clone();
        other.seed = 1234;
        let secret = gen_secret(&other, 5);
        assert!(matches!(
            obfuscate_model(&model, &secret),
            Err(CoreError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn pads_have_exact_hot_counts_and_dense_oracle_offset() {
        let c = cfg(NormKind::LayerNorm);
        let model = init_model(&c).unwrap();
        let mut rng = otp_rng(99, 0);
        let pad = gen_otp(&model.w_emb, 5, 3, &mut rng, 0).unwrap();
        assert_eq!(pad.mask.rows.len(), 5);
        for row in &pad.mask.rows {
            assert_eq!(row.len(), 3);
            assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            assert!(row.iter().all(|&(_, v)| v == 1.0));
        }
        // Oracle: dense mask times embedding, triple loop.
        let dense = pad.mask.to_dense();
        let mut oracle = Matrix::zeros(5, c.model_dim as usize);
        for i in 0..5 {
            for k in 0..c.vocab_size as usize {
                for j in 0..c.model_dim as usize {
                    let add = dense.get(i, k) * model.w_emb.get(k, j);
                    oracle.set(i, j, oracle.get(i, j) + add);
                }
            }
        }
        assert!(pad.mask_emb.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn pad_streams_are_independent_per_id() {
        let c = cfg(NormKind::LayerNorm);
        let model = init_model(&c).unwrap();
        let a = gen_otp(&model.w_emb, 4, 2, &mut otp_rng(7, 0), 0).unwrap();
        let a2 = gen_otp(&model.w_emb, 4, 2, &mut otp_rng(7, 0), 0).unwrap();
        let b = gen_otp(&model.w_emb, 4, 2, &mut otp_rng(7, 1), 1).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a.mask, b.mask);
    }

    #[test]
    fn factorial_math_matches_frozen_values() {
        assert_eq!(guess_probability(1), 1.0);
        assert_eq!(guess_probability(2), 0.5);
        assert_eq!(guess_probability(5), 1.0 / 120.0);
        assert_eq!(guess_probability(20), 1.0 / 2_432_902_008_176_640_000.0);
        assert!((ln_factorial(20) - 42.335616460753485).abs() < 1e-12);
        // Hand-off between the exact and log-domain paths stays smooth.
        let exact34 = guess_probability(34);
        let log34 = (-ln_factorial(34)).exp();
        assert!((exact34 - log34).abs() / exact34 < 1e-12);
        assert!(guess_probability(170) > 0.0);
        assert!(guess_probability(170) < 1e-300);
    }

    #[test]
    fn min_hot_count_matches_frozen_values() {
        for (v, want) in [
            (2u32, 2u32),
            (3, 2),
            (4, 2),
            (16, 4),
            (63, 11),
            (64, 11),
            (100, 16),
            (256, 32),
            (1000, 101),
            (65536, 4096),
            (100000, 6021),
            (131072, 7711),
        ] {
            assert_eq!(min_hot_count(v), want, "V = {}", v);
        }
    }
}
