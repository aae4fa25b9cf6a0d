//! Binary file formats for models, secrets and pad pools.
//!
//! All integers are little-endian. Model tensors are stored as f32, so a
//! save/load round trip quantizes weights to f32 precision; every consumer
//! that needs byte-stable comparisons (tests, the CLI verify command) works
//! from saved files on both sides for exactly that reason. Pad offsets are
//! stored as f64 because finalization subtracts them exactly.
//!
//! Model file (`DLCK`): magic, version u16, obfuscated u8, then
//! vocab/model/ffn/layers/max_seq u32s, attention scale u32 (0 = default),
//! norm kind u8, positional flag u8, init seed u64, tensors as f32 rows in a
//! fixed order, and a trailing fingerprint u64 only when obfuscated.
//!
//! Secret file (`DLSK`): magic, version u16, vocab u32, dim u32,
//! fingerprint u64, vocabulary permutation as u32s, hidden permutation as
//! u32s.
//!
//! Pad file (`DLPD`): magic, version u16, vocab u32, dim u32, positions u32,
//! pad count u32, then per pad: id u64 and per position a u32 entry count
//! followed by (index u32, value f64) pairs, then the positions x dim f64
//! offset matrix.

use crate::error::{CoreError, Result};
use crate::model::{BlockWeights, ModelConfig, NormKind, PlainModel};
use crate::obfuscate::{ObfModel, OtpPad, PermutationSecret};
use crate::tensor::{Matrix, PermIndex, SparseRows};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MODEL_MAGIC: &[u8; 4] = b"DLCK";
const SECRET_MAGIC: &[u8; 4] = b"DLSK";
const PADS_MAGIC: &[u8; 4] = b"DLPD";
const FORMAT_VERSION: u16 = 1;

// ============================================================
// Primitives
// ============================================================

fn bad(detail: impl Into<String>) -> CoreError {
    CoreError::FileFormat(detail.into())
}

fn read_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            bad("unexpected end of file")
        } else {
            CoreError::Io(e)
        }
    })?;
    Ok(buf)
}

fn r_u16(r: &mut impl Read) -> Result<u16> {
    Ok(u16::from_le_bytes(read_bytes(r)?))
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r)?))
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(r)?))
}

fn r_u8(r: &mut impl Read) -> Result<u8> {
    Ok(read_bytes::<1>(r)?[0])
}

fn r_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_bytes(r)?))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let got = read_bytes::<4>(r)?;
    if &got != magic {
        return Err(bad(format!("not a {} file (magic {:02x?})", what, got)));
    }
    let version = r_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported {} version {}", what, version)));
    }
    Ok(())
}

fn expect_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(bad(format!("trailing bytes after {}", what))),
    }
}

fn write_mat_f32(w: &mut impl Write, m: &Matrix) -> Result<()> {
    for &v in m.as_slice() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_mat_f32(r: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(f32::from_le_bytes(read_bytes(r)?) as f64);
    }
    Matrix::from_vec(rows, cols, data)
}

fn write_vec_f32(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for &x in v {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_vec_f32(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(f32::from_le_bytes(read_bytes(r)?) as f64);
    }
    Ok(out)
}

/// Round every weight through f32, exactly what a save/load round trip does.
/// Comparisons against logits produced from a saved file must run the
/// in-memory side through this first.
pub fn quantize_weights(model: &mut PlainModel) {
    for slice in crate::grad::param_slices_mut(model) {
        for v in slice {
            *v = *v as f32 as f64;
        }
    }
}

// ============================================================
// Model files
// ============================================================

/// Write a model; pass the fingerprint for obfuscated weights, `None` for
/// plain ones.
pub fn write_model(path: &Path, model: &PlainModel, fingerprint: Option<u64>) -> Result<()> {
    let cfg = &model.config;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[fingerprint.is_some() as u8])?;
    for v in [
        cfg.vocab_size,
        cfg.model_dim,
        cfg.ffn_dim,
        cfg.num_layers,
        cfg.max_seq_len,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&cfg.attn_scale.unwrap_or(0).to_le_bytes())?;
    w.write_all(&[match cfg.norm_kind {
        NormKind::LayerNorm => 0u8,
        NormKind::RmsNorm => 1u8,
    }])?;
    w.write_all(&[cfg.use_positional as u8])?;
    w.write_all(&cfg.seed.to_le_bytes())?;

    write_mat_f32(&mut w, &model.w_emb)?;
    if let Some(p) = &model.pos_emb {
        write_mat_f32(&mut w, p)?;
    }
    for b in &model.blocks {
        write_mat_f32(&mut w, &b.w_q)?;
        write_mat_f32(&mut w, &b.w_k)?;
        write_mat_f32(&mut w, &b.w_v)?;
        write_mat_f32(&mut w, &b.w_o)?;
        write_mat_f32(&mut w, &b.w_1)?;
        write_mat_f32(&mut w, &b.w_3)?;
        write_mat_f32(&mut w, &b.w_2)?;
        write_vec_f32(&mut w, &b.gamma1)?;
        write_vec_f32(&mut w, &b.beta1)?;
        write_vec_f32(&mut w, &b.gamma2)?;
        write_vec_f32(&mut w, &b.beta2)?;
    }
    write_mat_f32(&mut w, &model.w_cls)?;
    if let Some(f) = fingerprint {
        w.write_all(&f.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a model and, when it is obfuscated, its fingerprint.
pub fn read_model(path: &Path) -> Result<(PlainModel, Option<u64>)> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, MODEL_MAGIC, "model")?;
    let obfuscated = match r_u8(&mut r)? {
        0 => false,
        1 => true,
        x => return Err(bad(format!("obfuscation flag {} is not 0 or 1", x))),
    };
    let vocab_size = r_u32(&mut r)?;
    let model_dim = r_u32(&mut r)?;
    let ffn_dim = r_u32(&mut r)?;
    let num_layers = r_u32(&mut r)?;
    let max_seq_len = r_u32(&mut r)?;
    let attn_scale = match r_u32(&mut r)? {
        0 => None,
        s => Some(s),
    };
    let norm_kind = match r_u8(&mut r)? {
        0 => NormKind::LayerNorm,
        1 => NormKind::RmsNorm,
        x => return Err(bad(format!("unknown norm kind {}", x))),
    };
    let use_positional = match r_u8(&mut r)? {
        0 => false,
        1 => true,
        x => return Err(bad(format!("positional flag {} is not 0 or 1", x))),
    };
    let seed = r_u64(&mut r)?;
    let cfg = ModelConfig {
        vocab_size,
        model_dim,
        ffn_dim,
        num_layers,
        max_seq_len,
        norm_kind,
        attn_scale,
        use_positional,
        seed,
    };
    cfg.validate()?;

    let v = vocab_size as usize;
    let d = model_dim as usize;
    let m = ffn_dim as usize;
    let w_emb = read_mat_f32(&mut r, v, d)?;
    let pos_emb = if use_positional {
        Some(read_mat_f32(&mut r, max_seq_len as usize, d)?)
    } else {
        None
    };
    let mut blocks = Vec::with_capacity(num_layers as usize);
    for _ in 0..num_layers {
        blocks.push(BlockWeights {
            w_q: read_mat_f32(&mut r, d, d)?,
            w_k: read_mat_f32(&mut r, d, d)?,
            w_v: read_mat_f32(&mut r, d, d)?,
            w_o: read_mat_f32(&mut r, d, d)?,
            w_1: read_mat_f32(&mut r, d, m)?,
            w_3: read_mat_f32(&mut r, d, m)?,
            w_2: read_mat_f32(&mut r, m, d)?,
            gamma1: read_vec_f32(&mut r, d)?,
            beta1: read_vec_f32(&mut r, d)?,
            gamma2: read_vec_f32(&mut r, d)?,
            beta2: read_vec_f32(&mut r, d)?,
        });
    }
    let w_cls = read_mat_f32(&mut r, d, v)?;
    let fingerprint = if obfuscated {
        Some(r_u64(&mut r)?)
    } else {
        None
    };
    expect_eof(&mut r, "model tensors")?;
    Ok((
        PlainModel {
            config: cfg,
            w_emb,
            pos_emb,
            blocks,
            w_cls,
        },
        fingerprint,
    ))
}

/// Read a file that must hold plain weights.
pub fn read_plain_model(path: &Path) -> Result<PlainModel> {
    let (model, fingerprint) = read_model(path)?;
    if fingerprint.is_some() {
        return Err(CoreError::AlreadyObfuscated);
    }
    Ok(model)
}

/// Read a file that must hold obfuscated weights.
pub fn read_obf_model(path: &Path) -> Result<ObfModel> {
    let (model, fingerprint) = read_model(path)?;
    match fingerprint {
        Some(f) => Ok(ObfModel {
            inner: model,
            fingerprint: f,
        }),
        None => Err(bad("expected obfuscated weights, file holds plain ones")),
    }
}

// ============================================================
// Secret files
// ============================================================

pub fn write_secret(path: &Path, secret: &PermutationSecret) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SECRET_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(secret.pi_emb.len() as u32).to_le_bytes())?;
    w.write_all(&(secret.pi.len() as u32).to_le_bytes())?;
    w.write_all(&secret.fingerprint.to_le_bytes())?;
    for &i in secret.pi_emb.as_slice() {
        w.write_all(&i.to_le_bytes())?;
    }
    for &i in secret.pi.as_slice() {
        w.write_all(&i.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_secret(path: &Path) -> Result<PermutationSecret> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, SECRET_MAGIC, "secret")?;
    let v = r_u32(&mut r)? as usize;
    let d = r_u32(&mut r)? as usize;
    let fingerprint = r_u64(&mut r)?;
    let mut pi_emb = Vec::with_capacity(v);
    for _ in 0..v {
        pi_emb.push(r_u32(&mut r)?);
    }
    let mut pi = Vec::with_capacity(d);
    for _ in 0..d {
        pi.push(r_u32(&mut r)?);
    }
    expect_eof(&mut r, "permutations")?;
    Ok(PermutationSecret::from_parts(
        PermIndex::from_vec(pi_emb)?,
        PermIndex::from_vec(pi)?,
        fingerprint,
    ))
}

// ============================================================
// Pad files
// ============================================================

pub fn write_pads(path: &Path, vocab: u32, dim: u32, pads: &[OtpPad]) -> Result<()> {
    let positions = pads.first().map_or(0, |p| p.mask.rows.len());
    if pads
        .iter()
        .any(|p| p.mask.rows.len() != positions || p.mask.width != vocab)
    {
        return Err(CoreError::InvalidConfig(
            "pads in one pool must share a shape".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PADS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&vocab.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(positions as u32).to_le_bytes())?;
    w.write_all(&(pads.len() as u32).to_le_bytes())?;
    for pad in pads {
        w.write_all(&pad.pad_id.to_le_bytes())?;
        for row in &pad.mask.rows {
            w.write_all(&(row.len() as u32).to_le_bytes())?;
            for &(i, v) in row {
                w.write_all(&i.to_le_bytes())?;
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for &v in pad.mask_emb.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pads(path: &Path) -> Result<Vec<OtpPad>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, PADS_MAGIC, "pad pool")?;
    let vocab = r_u32(&mut r)?;
    let dim = r_u32(&mut r)? as usize;
    let positions = r_u32(&mut r)? as usize;
    let count = r_u32(&mut r)? as usize;
    let mut pads = Vec::with_capacity(count);
    for _ in 0..count {
        let pad_id = r_u64(&mut r)?;
        let mut rows = Vec::with_capacity(positions);
        for _ in 0..positions {
            let len = r_u32(&mut r)? as usize;
            if len > vocab as usize {
                return Err(bad(format!(
                    "pad row of {} entries exceeds vocabulary",
                    len
                )));
            }
            let mut row = Vec::with_capacity(len);
            for _ in 0..len {
                let i = r_u32(&mut r)?;
                let v = r_f64(&mut r)?;
                row.push((i, v));
            }
            rows.push(row);
        }
        let mask = SparseRows::new(vocab, rows)?;
        let mut data = Vec::with_capacity(positions * dim);
        for _ in 0..positions * dim {
            data.push(r_f64(&mut r)?);
        }
        let mask_emb = Matrix::from_vec(positions, dim, data)?;
        pads.push(OtpPad {
            pad_id,
            mask,
            mask_emb,
        });
    }
    expect_eof(&mut r, "pad pool")?;
    Ok(pads)
}

// ============================================================
// Tests
// ============================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::obfuscate::{gen_otp, gen_secret, obfuscate_model, otp_rng};
    use std::fs;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            model_dim: 4,
            ffn_dim: 6,
            num_layers: 2,
            max_seq_len: 5,
            norm_kind: NormKind::RmsNorm,
            attn_scale: Some(16),
            use_positional: true,
            seed: 123,
        }
    }

    #[test]
    fn model_roundtrip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dlck");
        let mut model = init_model(&cfg()).unwrap();
        // Perturb so weights are not already representable in f32.
        model.w_emb.set(0, 0, 0.1 + 1e-12);
        write_model(&path, &model, None).unwrap();
        let (loaded, fp) = read_model(&path).unwrap();
        assert_eq!(fp, None);
        assert_eq!(loaded.config, model.config);
        quantize_weights(&mut model);
        assert_eq!(loaded, model, "load must equal the f32-quantized original");
    }

    #[test]
    fn obfuscated_roundtrip_keeps_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.dlck");
        let c = cfg();
        let model = init_model(&c).unwrap();
        let secret = gen_secret(&c, 9);
        let obf = obfuscate_model(&model, &secret).unwrap();
        write_model(&path, &obf.inner, Some(obf.fingerprint)).unwrap();
        let loaded = read_obf_model(&path).unwrap();
        assert_eq!(loaded.fingerprint, obf.fingerprint);
        assert!(
            read_plain_model(&path).is_err(),
            "plain reader must refuse it"
        );
    }

    #[test]
    fn plain_reader_and_obf_reader_disagree_politely() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dlck");
        let model = init_model(&cfg()).unwrap();
        write_model(&path, &model, None).unwrap();
        assert!(read_plain_model(&path).is_ok());
        assert!(read_obf_model(&path).is_err());
    }

    #[test]
    fn secret_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.dlsk");
        let c = cfg();
        let secret = gen_secret(&c, 4);
        write_secret(&path, &secret).unwrap();
        let loaded = read_secret(&path).unwrap();
        assert_eq!(loaded, secret, "inverses must be rebuilt identically");
    }

    #[test]
    fn pads_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dlpd");
        let c = cfg();
        let model = init_model(&c).unwrap();
        let pads: Vec<OtpPad> = (0..3)
            .map(|i| gen_otp(&model.w_emb, 5, 3, &mut otp_rng(8, i), i).unwrap())
            .collect();
        write_pads(&path, c.vocab_size, c.model_dim, &pads).unwrap();
        let loaded = read_pads(&path).unwrap();
        assert_eq!(loaded, pads, "f64 offsets must survive bit-for-bit");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dlck");
        let model = init_model(&cfg()).unwrap();
        write_model(&path, &model, None).unwrap();
        let bytes = fs::read(&path).unwrap();

        // Truncated.
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_model(&path), Err(CoreError::FileFormat(_))));

        // Trailing garbage.
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0u8; 3]);
        fs::write(&path, &longer).unwrap();
        assert!(matches!(read_model(&path), Err(CoreError::FileFormat(_))));

        // Wrong magic.
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        fs::write(&path, &wrong).unwrap();
        assert!(matches!(read_model(&path), Err(CoreError::FileFormat(_))));

        // Wrong version.
        let mut ver = bytes.clone();
        ver[4] = 9;
        fs::write(&path, &ver).unwrap();
        assert!(matches!(read_model(&path), Err(CoreError::FileFormat(_))));

        // Secret with a non-bijective permutation.
        let spath = dir.path().join("s.dlsk");
        let secret = gen_secret(&cfg(), 4);
        write_secret(&spath, &secret).unwrap();
        let mut sbytes = fs::read(&spath).unwrap();
        // First permutation entry lives right after magic+version+dims+fp.
        let off = 4 + 2 + 4 + 4 + 8;
        let dup = sbytes[off + 4..off + 8].to_vec();
        sbytes[off..off + 4].copy_from_slice(&dup);
        fs::write(&spath, &sbytes).unwrap();
        assert!(matches!(
            read_secret(&spath),
            Err(CoreError::InvalidPermutation(_))
        ));
    }

    #[test]
    fn quantization_is_idempotent() {
        let mut a = init_model(&cfg()).unwrap();
        a.w_cls.set(1, 1, 1.0 / 3.0);
        quantize_weights(&mut a);
        let once = a.clone();
        quantize_weights(&mut a);
        assert_eq!(a, once);
    }
}
