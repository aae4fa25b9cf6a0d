//! The trusted side of the split pipeline.
//!
//! The enclave holds the permutation secret and a source of one-time pads.
//! Authorizing a request means hiding the token ids inside a k-hot mask and
//! remapping every index into the shuffled vocabulary, so the worker can
//! embed the batch without learning which entries are real. Finalizing takes
//! the worker's embedding sum, strips the mask's contribution and rotates
//! the result into the shuffled hidden basis the worker's trunk expects.
//!
//! Online work is deliberately tiny: `seq_len * (hot + 1)` scalar merges at
//! authorization plus one `seq_len * d` subtraction at finalization. Index
//! remaps and column shuffles move data without arithmetic and count as
//! zero, matching the cost accounting in [`crate::flops`].

use crate::error::{CoreError, Result};
use crate::obfuscate::{gen_otp, otp_rng, OtpPad, PermutationSecret};
use crate::tensor::{self, Matrix, SparseRows};
use std::collections::{HashMap, HashSet};

/// Where sessions draw their pads from.
pub enum PadSource {
    /// Pregenerated pads, consumed front to back, each at most once.
    Pool(Vec<OtpPad>),
    /// Derive the pad for session `s` from stream `s` of a seeded generator.
    /// Keeps a plain copy of the embedding table for the offsets.
    Seeded {
        pads_seed: u64,
        hot: u32,
        w_emb: Matrix,
    },
}

enum SessionState {
    AwaitingEmbed { mask_emb: Matrix },
    Finalized,
}

pub struct Enclave {
    secret: PermutationSecret,
    pads: PadSource,
    pool_cursor: usize,
    used_pads: HashSet<u64>,
    sessions: HashMap<u64, SessionState>,
    online_flops: u64,
}

impl Enclave {
    pub fn new(secret: PermutationSecret, pads: PadSource) -> Self {
        Enclave {
            secret,
            pads,
            pool_cursor: 0,
            used_pads: HashSet::new(),
            sessions: HashMap::new(),
            online_flops: 0,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.secret.fingerprint
    }

    /// Scalar operations spent on authorization so far.
    pub fn online_flops(&self) -> u64 {
        self.online_flops
    }

    fn take_pad(&mut self, session_id: u64, seq_len: usize) -> Result<OtpPad> {
        let pad = match &mut self.pads {
            PadSource::Pool(pool) => {
                if self.pool_cursor >= pool.len() {
                    return Err(CoreError::PadExhausted);
                }
                let pad = pool[self.pool_cursor].clone();
                self.pool_cursor += 1;
                pad
            }
            PadSource::Seeded {
                pads_seed,
                hot,
                w_emb,
            } => {
                let mut rng = otp_rng(*pads_seed, session_id);
                gen_otp(w_emb, seq_len as u32, *hot, &mut rng, session_id)?
            }
        };
        if !self.used_pads.insert(pad.pad_id) {
            return Err(CoreError::PadReuse(pad.pad_id));
        }
        Ok(pad)
    }

    /// Open a session: merge the token ids into a fresh pad, remap every
    /// index into the shuffled vocabulary and hand back the k-hot rows the
    /// worker should embed. A token colliding with a mask entry doubles that
    /// entry instead of adding a new one.
    pub fn authorize(&mut self, session_id: u64, ids: &[u32]) -> Result<SparseRows> {
        if self.sessions.contains_key(&session_id) {
            return Err(CoreError::BadSessionState(session_id));
        }
        if ids.is_empty() {
            return Err(CoreError::InvalidConfig("empty token sequence".into()));
        }
        let vocab = self.secret.pi_emb.len() as u32;
        for &id in ids {
            if id >= vocab {
                return Err(CoreError::IdOutOfRange { id, vocab });
            }
        }
        let pad = self.take_pad(session_id, ids.len())?;
        if pad.mask.rows.len() < ids.len() {
            return Err(CoreError::InvalidConfig(format!(
                "pad covers {} positions, request has {}",
                pad.mask.rows.len(),
                ids.len()
            )));
        }

        let inv = self.secret.pi_emb_inv.as_slice();
        let mut out_rows = Vec::with_capacity(ids.len());
        for (t, &tok) in ids.iter().enumerate() {
            let mask_row = &pad.mask.rows[t];
            let mut row: Vec<(u32, f64)> = Vec::with_capacity(mask_row.len() + 1);
            let mut collided = false;
            for &(i, v) in mask_row {
                if i == tok {
                    row.push((i, v + 1.0));
                    collided = true;
                } else {
                    row.push((i, v));
                }
            }
            if !collided {
                let at = row.partition_point(|&(i, _)| i < tok);
                row.insert(at, (tok, 1.0));
            }
            // Remap into the shuffled vocabulary; values move untouched.
            for (i, _) in row.iter_mut() {
                *i = inv[*i as usize];
            }
            row.sort_unstable_by_key(|&(i, _)| i);
            out_rows.push(row);
        }
        // k mask merges plus one token bump per position.
        let hot = pad.mask.rows[0].len() as u64;
        self.online_flops += ids.len() as u64 * (hot + 1);

        let mut mask_emb = pad.mask_emb;
        mask_emb.truncate_rows(ids.len());
        self.sessions
            .insert(session_id, SessionState::AwaitingEmbed { mask_emb });
        SparseRows::new(vocab, out_rows)
    }

    /// Close a session: subtract the pad's embedding offset from the
    /// worker's reply and rotate the rows into the shuffled hidden basis.
    pub fn finalize(&mut self, session_id: u64, embed_reply: &Matrix) -> Result<Matrix> {
        let state = self
            .sessions
            .get(&session_id)
            .ok_or(CoreError::BadSessionState(session_id))?;
        let mask_emb = match state {
            SessionState::Finalized => return Err(CoreError::BadSessionState(session_id)),
            SessionState::AwaitingEmbed { mask_emb } => mask_emb,
        };
        if embed_reply.rows() != mask_emb.rows() || embed_reply.cols() != mask_emb.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "finalize",
                detail: format!(
                    "reply {}x{} vs expected {}x{}",
                    embed_reply.rows(),
                    embed_reply.cols(),
                    mask_emb.rows(),
                    mask_emb.cols()
                ),
            });
        }
        let plain = tensor::sub(embed_reply, mask_emb)?;
        let authorized = tensor::apply_cols(&plain, &self.secret.pi)?;
        self.online_flops += (plain.rows() * plain.cols()) as u64;
        self.sessions.insert(session_id, SessionState::Finalized);
        Ok(authorized)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig, NormKind};
    use crate::obfuscate::gen_secret;
    use crate::tensor::apply_cols;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 24,
            model_dim: 6,
            ffn_dim: 8,
            num_layers: 2,
            max_seq_len: 7,
            norm_kind: NormKind::LayerNorm,
            attn_scale: None,
            use_positional: true,
            seed: 11,
        }
    }

    fn seeded_enclave(hot: u32) -> (Enclave, crate::model::PlainModel) {
        let c = cfg();
        let model = init_model(&c).unwrap();
        let secret = gen_secret(&c, 5);
        let enclave = Enclave::new(
            secret,
            PadSource::Seeded {
                pads_seed: 1,
                hot,
                w_emb: model.w_emb.clone(),
            },
        );
        (enclave, model)
    }

    #[test]
    fn authorized_rows_carry_mask_plus_token() {
        let (mut enclave, _model) = seeded_enclave(4);
        let ids = vec![3u32, 17, 0, 3];
        let rows = enclave.authorize(9, &ids).unwrap();
        rows.validate().unwrap();
        assert_eq!(rows.rows.len(), 4);
        for row in &rows.rows {
            let total: f64 = row.iter().map(|&(_, v)| v).sum();
            assert_eq!(total, 5.0, "mask weight 4 plus token weight 1");
            assert!(row.len() == 5 || row.len() == 4);
            if row.len() == 4 {
                assert!(
                    row.iter().any(|&(_, v)| v == 2.0),
                    "collision doubles the entry"
                );
            }
        }
    }

    #[test]
    fn remap_is_an_exact_shuffle() {
        let (mut enclave, model) = seeded_enclave(4);
        let secret = gen_secret(&cfg(), 5);
        let ids = vec![1u32, 2, 3];
        let rows = enclave.authorize(1, &ids).unwrap();

        // Rebuild (h + m) densely in the plain vocabulary, shuffle its
        // columns, and require bit equality with the sparse output.
        let pad = gen_otp(&model.w_emb, 3, 4, &mut otp_rng(1, 1), 1).unwrap();
        let mut dense = pad.mask.to_dense();
        for (t, &tok) in ids.iter().enumerate() {
            dense.set(t, tok as usize, dense.get(t, tok as usize) + 1.0);
        }
        let expect = apply_cols(&dense, &secret.pi_emb).unwrap();
        let got = rows.to_dense();
        assert_eq!(got, expect, "remapped rows must be a bitwise shuffle");
    }

    #[test]
    fn finalize_recovers_shuffled_plain_embedding() {
        let (mut enclave, model) = seeded_enclave(4);
        let secret = gen_secret(&cfg(), 5);
        let ids = vec![5u32, 6];
        let rows = enclave.authorize(2, &ids).unwrap();
        // Stand in for the worker with the dense oracle on shuffled weights.
        let w_emb_obf = crate::tensor::apply_rows(&model.w_emb, &secret.pi_emb).unwrap();
        let reply = crate::tensor::sparse_gather_sum(&rows, &w_emb_obf).unwrap();
        let x = enclave.finalize(2, &reply).unwrap();

        let mut plain = Matrix::zeros(2, 6);
        plain.row_mut(0).copy_from_slice(model.w_emb.row(5));
        plain.row_mut(1).copy_from_slice(model.w_emb.row(6));
        let expect = apply_cols(&plain, &secret.pi).unwrap();
        assert!(x.max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn online_cost_matches_closed_form() {
        let (mut enclave, model) = seeded_enclave(4);
        let n = 5usize;
        let d = model.config.model_dim as usize;
        let ids: Vec<u32> = (0..n as u32).collect();
        let rows = enclave.authorize(3, &ids).unwrap();
        let w_emb_obf =
            crate::tensor::apply_rows(&model.w_emb, &gen_secret(&cfg(), 5).pi_emb).unwrap();
        let reply = crate::tensor::sparse_gather_sum(&rows, &w_emb_obf).unwrap();
        enclave.finalize(3, &reply).unwrap();
        assert_eq!(enclave.online_flops(), (n * (4 + 1) + n * d) as u64);
    }

    #[test]
    fn session_and_pad_misuse_is_rejected() {
        let (mut enclave, model) = seeded_enclave(3);
        let ids = vec![1u32, 2];
        let rows = enclave.authorize(7, &ids).unwrap();
        // Same session id again: its pad is gone.
        assert!(matches!(
            enclave.authorize(7, &ids),
            Err(CoreError::BadSessionState(7))
        ));
        // Finalize with the wrong shape.
        let bad = Matrix::zeros(3, model.config.model_dim as usize);
        assert!(matches!(
            enclave.finalize(7, &bad),
            Err(CoreError::ShapeMismatch { .. })
        ));
        // Finalize an unknown session.
        let ok = Matrix::zeros(2, model.config.model_dim as usize);
        assert!(matches!(
            enclave.finalize(99, &ok),
            Err(CoreError::BadSessionState(99))
        ));
        // Proper finalize once, then again.
        let w_emb_obf =
            crate::tensor::apply_rows(&model.w_emb, &gen_secret(&cfg(), 5).pi_emb).unwrap();
        let reply = crate::tensor::sparse_gather_sum(&rows, &w_emb_obf).unwrap();
        enclave.finalize(7, &reply).unwrap();
        assert!(matches!(
            enclave.finalize(7, &reply),
            Err(CoreError::BadSessionState(7))
        ));
        // Out-of-range token.
        assert!(matches!(
            enclave.authorize(8, &[999]),
            Err(CoreError::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn pool_pads_are_single_use_and_exhaustible() {
        let c = cfg();
        let model = init_model(&c).unwrap();
        let secret = gen_secret(&c, 5);
        let pads: Vec<OtpPad> = (0..2)
            .map(|i| gen_otp(&model.w_emb, 4, 3, &mut otp_rng(42, i), i).unwrap())
            .collect();
        let mut dup = pads.clone();
        dup[1].pad_id = 0;
        let mut enclave = Enclave::new(secret.clone(), PadSource::Pool(dup));
        enclave.authorize(1, &[1, 2]).unwrap();
        assert!(matches!(
            enclave.authorize(2, &[1, 2]),
            Err(CoreError::PadReuse(0))
        ));

        let mut enclave = Enclave::new(secret, PadSource::Pool(pads));
        enclave.authorize(1, &[1, 2]).unwrap();
        enclave.authorize(2, &[3, 4]).unwrap();
        assert!(matches!(
            enclave.authorize(3, &[5]),
            Err(CoreError::PadExhausted)
        ));
    }
}
