//! Dense tensors, the differentiation tape, AdamW and the LR schedule.

mod kernels;
mod optim;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use kernels::{cross_entropy, layer_norm, softmax, LAYER_NORM_EPS};
pub(crate) use kernels::{check_finite, softmax_row_f64};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use params::{Grads, ParamStore};
pub use rng::{seeded, streams, RngRecord, RNG_ALGORITHM};
pub use scalar::Scalar;
pub use tape::{AttnLayout, Tape, Var};
pub use tensor::{ProbDist, Tensor, PROB_SUM_TOL};

/// Softmax of a logit row straight into a [`ProbDist`].
pub fn prob_dist_from_logits<T: Scalar>(logits: &[T]) -> crate::Result<ProbDist> {
    check_finite("logits", logits)?;
    let mut p = vec![0.0; logits.len()];
    softmax_row_f64(logits, &mut p);
    ProbDist::new(p)
}
