//! Distillation: the synthetic classification task, the blended
//! cross-entropy/KL loss, teacher oracles and the student training loop.
//!
//! The task splits the vocabulary into `regions` contiguous bands; a
//! sequence's label is the band that contributes the most tokens, ties going
//! to the lowest band. The first `regions` vocabulary columns double as the
//! readout: training and evaluation only ever look at those logits, at the
//! last position.

use crate::error::{CoreError, Result};
use crate::grad::{self, ce_restricted, log_softmax, OptState, TrainHyper};
use crate::model::PlainModel;
use crate::worker::Worker;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ============================================================
// Synthetic task
// ============================================================

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub vocab_size: u32,
    /// Number of contiguous vocabulary bands; must divide `vocab_size`.
    pub regions: u32,
    pub seq_len: u32,
    pub train_size: u32,
    pub test_size: u32,
    pub data_seed: u64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.regions < 2 || !self.vocab_size.is_multiple_of(self.regions) {
            return Err(CoreError::InvalidConfig(format!(
                "regions {} must be >= 2 and divide vocabulary {}",
                self.regions, self.vocab_size
            )));
        }
        if self.seq_len == 0 || self.train_size == 0 || self.test_size == 0 {
            return Err(CoreError::InvalidConfig("empty task dimensions".into()));
        }
        Ok(())
    }

    pub fn region_of(&self, token: u32) -> u32 {
        token / (self.vocab_size / self.regions)
    }

    /// Majority band over the sequence, lowest band on ties.
    pub fn label_of(&self, ids: &[u32]) -> u32 {
        let mut counts = vec![0u32; self.regions as usize];
        for &t in ids {
            counts[self.region_of(t) as usize] += 1;
        }
        let mut best = 0usize;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = i;
            }
        }
        best as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub spec: DataSpec,
    pub train: Vec<Vec<u32>>,
    pub train_labels: Vec<u32>,
    pub test: Vec<Vec<u32>>,
    pub test_labels: Vec<u32>,
}

/// Draw a label-balanced split: uniform token sequences, rejection-sampled
/// until every label's quota is full. Quotas differ by at most one when the
/// size is not a multiple of the label count.
fn balanced_split(
    spec: &DataSpec,
    size: u32,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<u32>>, Vec<u32>)> {
    let r = spec.regions as usize;
    let mut quota = vec![size as usize / r; r];
    for extra in quota.iter_mut().take(size as usize % r) {
        *extra += 1;
    }
    let mut seqs = Vec::with_capacity(size as usize);
    let mut labels = Vec::with_capacity(size as usize);
    let mut remaining = size as usize;
    let mut attempts: u64 = 0;
    let budget = 2000 * size as u64 * spec.regions as u64 + 100_000;
    while remaining > 0 {
        attempts += 1;
        if attempts > budget {
            return Err(CoreError::InvalidConfig(format!(
                "balanced sampling stalled after {} attempts; task too skewed",
                attempts
            )));
        }
        let ids: Vec<u32> = (0..spec.seq_len)
            .map(|_| rng.random_range(0..spec.vocab_size))
            .collect();
        let label = spec.label_of(&ids) as usize;
        if quota[label] > 0 {
            quota[label] -= 1;
            remaining -= 1;
            seqs.push(ids);
            labels.push(label as u32);
        }
    }
    Ok((seqs, labels))
}

pub fn generate_dataset(spec: &DataSpec) -> Result<ToyDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    let (train, train_labels) = balanced_split(spec, spec.train_size, &mut rng)?;
    let (test, test_labels) = balanced_split(spec, spec.test_size, &mut rng)?;
    Ok(ToyDataset {
        spec: spec.clone(),
        train,
        train_labels,
        test,
        test_labels,
    })
}

// ============================================================
// Distillation loss
// ============================================================

/// Blend of hard and soft targets on the last-position logits:
/// `alpha * CE(label | first span columns) +
///  beta * KL(softmax(teacher / tau) || softmax(student / tau))`,
/// KL taken over the full width. Returns the loss and its gradient with
/// respect to the student logits.
pub fn kd_loss(
    student: &[f64],
    teacher: &[f64],
    label: u32,
    span: usize,
    alpha: f64,
    beta: f64,
    tau: f64,
) -> (f64, Vec<f64>) {
    assert_eq!(
        student.len(),
        teacher.len(),
        "teacher and student widths differ"
    );
    assert!(tau > 0.0, "temperature must be positive");
    let (ce, mut grad) = ce_restricted(student, label, span);
    for g in grad.iter_mut() {
        *g *= alpha;
    }

    let ls_t: Vec<f64> = log_softmax(&teacher.iter().map(|&x| x / tau).collect::<Vec<_>>());
    let ls_s: Vec<f64> = log_softmax(&student.iter().map(|&x| x / tau).collect::<Vec<_>>());
    let mut kl = 0.0;
    for j in 0..student.len() {
        let p = ls_t[j].exp();
        kl += p * (ls_t[j] - ls_s[j]);
        grad[j] += beta / tau * (ls_s[j].exp() - p);
    }
    (alpha * ce + beta * kl, grad)
}

/// Map a single blend knob to `(alpha, beta)`: 0 is pure hard-label
/// training, 1 is pure distillation.
pub fn kd_ratio(r: f64) -> (f64, f64) {
    assert!((0.0..=1.0).contains(&r), "kd ratio must lie in [0, 1]");
    (1.0 - r, r)
}

// ============================================================
// Teacher oracles
// ============================================================

/// Anything that can answer last-position logits for a token sequence.
/// Implementations may carry session state, hence `&mut`.
pub trait TeacherOracle {
    fn last_logits(&mut self, ids: &[u32]) -> Result<Vec<f64>>;
}

/// In-process teacher over plain weights.
pub struct PlainTeacher<'a>(pub &'a PlainModel);

impl TeacherOracle for PlainTeacher<'_> {
    fn last_logits(&mut self, ids: &[u32]) -> Result<Vec<f64>> {
        crate::model::forward_last(self.0, ids)
    }
}

/// A worker driven without authorization: logits from shuffled weights on
/// plain inputs. Exists to measure what such outputs are worth as a teacher.
pub struct UnauthorizedTeacher<'a>(pub &'a Worker);

impl TeacherOracle for UnauthorizedTeacher<'_> {
    fn last_logits(&mut self, ids: &[u32]) -> Result<Vec<f64>> {
        let logits = self.0.forward_unauthorized(ids)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

// ============================================================
// Student training
// ============================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillHyper {
    pub train: TrainHyper,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for DistillHyper {
    fn default() -> Self {
        DistillHyper {
            train: TrainHyper::default(),
            alpha: 0.0,
            beta: 1.0,
            tau: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: u32,
    pub train_loss: f64,
    pub eval_acc: f64,
}

/// Distill `student` against a teacher oracle on the toy task. The teacher
/// is queried once per training sequence up front; epochs then reuse the
/// cached logits. Returns one metric row per epoch, accuracy measured on
/// the held-out split after that epoch.
pub fn distill(
    student: &mut PlainModel,
    teacher: &mut dyn TeacherOracle,
    data: &ToyDataset,
    hyper: &DistillHyper,
) -> Result<Vec<EpochMetric>> {
    let span = data.spec.regions as usize;
    let mut teacher_logits = Vec::with_capacity(data.train.len());
    for ids in &data.train {
        teacher_logits.push(teacher.last_logits(ids)?);
    }

    let mut opt = OptState::new(hyper.train.optimizer, student);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.train.shuffle_seed);
    let mut metrics = Vec::with_capacity(hyper.train.epochs as usize);
    for epoch in 0..hyper.train.epochs {
        let loss = grad::run_epoch(
            student,
            &data.train,
            &mut rng,
            &mut opt,
            hyper.train.batch_size as usize,
            hyper.train.lr,
            &|i, last| {
                kd_loss(
                    last,
                    &teacher_logits[i],
                    data.train_labels[i],
                    span,
                    hyper.alpha,
                    hyper.beta,
                    hyper.tau,
                )
            },
        )?;
        let acc = eval_accuracy(student, &data.test, &data.test_labels, span)?;
        metrics.push(EpochMetric {
            epoch,
            train_loss: loss,
            eval_acc: acc,
        });
    }
    Ok(metrics)
}

// ============================================================
// Evaluation
// ============================================================

/// Fraction of sequences whose predicted band (argmax over the first `span`
/// last-position logits, lowest index on ties) matches the label.
pub fn accuracy_from_logits<F>(
    mut last_logits: F,
    seqs: &[Vec<u32>],
    labels: &[u32],
    span: usize,
) -> Result<f64>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    assert_eq!(seqs.len(), labels.len());
    let mut hits = 0usize;
    for (ids, &label) in seqs.iter().zip(labels) {
        let logits = last_logits(ids)?;
        let mut best = 0usize;
        for j in 1..span.min(logits.len()) {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        if best as u32 == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / seqs.len().max(1) as f64)
}

pub fn eval_accuracy(
    model: &PlainModel,
    seqs: &[Vec<u32>],
    labels: &[u32],
    span: usize,
) -> Result<f64> {
    accuracy_from_logits(
        |ids| crate::model::forward_last(model, ids),
        seqs,
        labels,
        span,
    )
}

// ============================================================
// Tests
// ============================================================
