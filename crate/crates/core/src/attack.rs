//! Surrogate extraction benchmark: how far does a stolen artifact get an
//! attacker who can also query the serving API?
//!
//! Every scheme initializes a surrogate student differently, modeling what
//! leaks outside the enclave under that deployment. All surrogates are then
//! distilled against the same served logits with the same budget, so final
//! accuracy differences come from the initialization alone. The floor is a
//! fresh random student (nothing stolen), the ceiling an exact copy of the
//! victim; a deployment's leaked weights are worth whatever they add over
//! the floor.

use crate::error::{CoreError, Result};
use crate::kd::{distill, DistillHyper, EpochMetric, TeacherOracle, ToyDataset};
use crate::model::{init_model, PlainModel};
use crate::obfuscate::{fnv1a64, ObfModel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackScheme {
    /// Exact copy of the victim weights (upper bound).
    Whitebox,
    /// Fresh random weights, API access only (lower bound).
    Blackbox,
    /// First block hidden: the attacker re-initializes it, copies the rest.
    Serdab,
    /// Last block and classifier hidden.
    Darknetz,
    /// Embeddings and norm parameters hidden, linear weights leaked.
    Shadownet,
    /// The shuffled weights leak in full.
    Distillock,
}

impl AttackScheme {
    pub const ALL: [AttackScheme; 6] = [
        AttackScheme::Whitebox,
        AttackScheme::Blackbox,
        AttackScheme::Serdab,
        AttackScheme::Darknetz,
        AttackScheme::Shadownet,
        AttackScheme::Distillock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackScheme::Whitebox => "whitebox",
            AttackScheme::Blackbox => "blackbox",
            AttackScheme::Serdab => "serdab",
            AttackScheme::Darknetz => "darknetz",
            AttackScheme::Shadownet => "shadownet",
            AttackScheme::Distillock => "distillock",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AttackScheme::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown attack scheme '{}'", s)))
    }
}

/// Build the surrogate a given scheme hands the attacker. Freshly drawn
/// parts come from a model re-initialized with `fresh_seed`.
pub fn surrogate_init(
    scheme: AttackScheme,
    victim: &PlainModel,
    obf: &ObfModel,
    fresh_seed: u64,
) -> Result<PlainModel> {
    let mut fresh_cfg = victim.config.clone();
    fresh_cfg.seed = fresh_seed;
    let fresh = init_model(&fresh_cfg)?;
    Ok(match scheme {
        AttackScheme::Whitebox => victim.clone(),
        AttackScheme::Blackbox => fresh,
        AttackScheme::Distillock => obf.inner.clone(),
        AttackScheme::Serdab => {
            let mut m = victim.clone();
            m.blocks[0] = fresh.blocks[0].clone();
            m
        }
        AttackScheme::Darknetz => {
            let mut m = victim.clone();
            let last = m.blocks.len() - 1;
            m.blocks[last] = fresh.blocks[last].clone();
            m.w_cls = fresh.w_cls.clone();
            m
        }
        AttackScheme::Shadownet => {
            let mut m = victim.clone();
            m.w_emb = fresh.w_emb.clone();
            m.pos_emb = fresh.pos_emb.clone();
            for b in &mut m.blocks {
                b.gamma1 = vec![1.0; b.gamma1.len()];
                b.beta1 = vec![0.0; b.beta1.len()];
                b.gamma2 = vec![1.0; b.gamma2.len()];
                b.beta2 = vec![0.0; b.beta2.len()];
            }
            m
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub scheme: AttackScheme,
    pub seed: u64,
    pub final_acc: f64,
    pub curve: Vec<EpochMetric>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub runs: Vec<AttackRun>,
}

impl AttackReport {
    pub fn mean_acc(&self, scheme: AttackScheme) -> Option<f64> {
        let accs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.scheme == scheme)
            .map(|r| r.final_acc)
            .collect();
        if accs.is_empty() {
            None
        } else {
            Some(accs.iter().sum::<f64>() / accs.len() as f64)
        }
    }

    /// Mean advantage of `scheme` over the fresh-student floor.
    pub fn relative_to_blackbox(&self, scheme: AttackScheme) -> Result<f64> {
        let base = self
            .mean_acc(AttackScheme::Blackbox)
            .ok_or(CoreError::MissingBaseline)?;
        let own = self.mean_acc(scheme).ok_or(CoreError::MissingBaseline)?;
        Ok(own - base)
    }

    /// Per-run advantage over the same-seed fresh-student run.
    pub fn run_relative(&self, run: &AttackRun) -> Result<f64> {
        let base = self
            .runs
            .iter()
            .find(|r| r.scheme == AttackScheme::Blackbox && r.seed == run.seed)
            .ok_or(CoreError::MissingBaseline)?;
        Ok(run.final_acc - base.final_acc)
    }
}

/// Derive the per-run fresh-init seed so every (scheme, seed) pair draws
/// independent weights while staying reproducible.
pub fn fresh_seed_for(scheme: AttackScheme, attack_seed: u64) -> u64 {
    let mut bytes = Vec::with_capacity(24);
    bytes.extend_from_slice(b"surrogate:");
    bytes.extend_from_slice(scheme.name().as_bytes());
    bytes.extend_from_slice(&attack_seed.to_le_bytes());
    fnv1a64(&bytes)
}

/// Distill one surrogate per (scheme, seed) pair against `teacher`, all with
/// the same budget, and collect the final held-out accuracies.
pub fn run_attacks(
    victim: &PlainModel,
    obf: &ObfModel,
    teacher: &mut dyn TeacherOracle,
    data: &ToyDataset,
    schemes: &[AttackScheme],
    seeds: &[u64],
    hyper: &DistillHyper,
) -> Result<AttackReport> {
    let mut runs = Vec::with_capacity(schemes.len() * seeds.len());
    for &seed in seeds {
        for &scheme in schemes {
            let mut student = surrogate_init(scheme, victim, obf, fresh_seed_for(scheme, seed))?;
            let mut h = hyper.clone();
            h.train.shuffle_seed = hyper.train.shuffle_seed ^ seed;
            let curve = distill(&mut student, teacher, data, &h)?;
            let final_acc = curve.last().map(|m| m.eval_acc).unwrap_or(0.0);
            runs.push(AttackRun {
                scheme,
                seed,
                final_acc,
                curve,
            });
        }
    }
    Ok(AttackReport { runs })
}
