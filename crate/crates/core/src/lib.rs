//! Multi-token prediction laboratory.
//!
//! A small, dependency-light stack for studying multi-token prediction (MTP)
//! on top of models trained for next-token prediction (NTP):
//!
//! * [`numerics`]: dense tensors, a per-step reverse-mode tape, AdamW and the
//!   cosine schedule.
//! * [`data`]: synthetic cipher-translation and Markov-chain corpora.
//! * [`model`]: a pre-norm decoder-only transformer with optional low-rank
//!   adapters and a bit-exact checkpoint container.
//! * [`mtp`]: replicated-final-layer MTP heads over a shared frozen unembedding,
//!   with optional weighted hidden states.
//! * [`marginal`]: exact and top-p truncated marginalization of future tokens.
//! * [`probes`]: logit-lens distributions, KL/entropy profiles, top-p counts.
//! * [`train`]: pretraining, adapter finetuning, heads-only and joint training.
//! * [`eval`]: teacher-forced top-k accuracy for next and 2nd tokens.

pub mod data;
pub mod error;
pub mod eval;
pub mod marginal;
pub mod model;
pub mod mtp;
pub mod numerics;
pub mod probes;
pub mod train;

pub use error::{MtpError, Result};
pub use numerics::{ProbDist, Tensor};
