//! Core library for split transformer inference on permuted weights.
//!
//! A model owner permutes the hidden dimension of a trained transformer and
//! the row order of its embedding table before handing the weights to an
//! untrusted host. A small trusted component (the "enclave") holds the
//! permutation secret and converts token ids into masked sparse inputs; the
//! untrusted host (the "worker") runs the full forward pass on the permuted
//! weights without ever seeing token ids, the secret, or plain weights.
//!
//! Module map:
//!
//! * [`tensor`]  - dense f64 kernels and permutation index arrays
//! * [`model`]   - transformer configuration, initialization, forward pass
//! * [`grad`]    - manual backprop, optimizers, supervised training
//! * [`obfuscate`] - permutation secrets, weight transforms, one-time pads
//! * [`enclave`] - authorization sessions (trusted side)
//! * [`worker`]  - obfuscated execution (untrusted side)
//! * [`kd`]      - toy dataset, distillation loss and loop, evaluation
//! * [`attack`]  - surrogate extraction schemes and fine-tuning harness
//! * [`flops`]   - analytical cost model and instrumented counting
//! * [`io`]      - binary file formats for models, secrets and pads

pub mod attack;
pub mod enclave;
mod error;
pub mod flops;
pub mod grad;
pub mod io;
pub mod kd;
pub mod model;
pub mod obfuscate;
pub mod tensor;
pub mod worker;

pub use error::{CoreError, Result};
