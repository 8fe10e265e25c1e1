//! Identity-versus-context metric learning at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: unit-norm embeddings and temperature-scaled logits.
//! - [`losses`]: the two-tier contrastive objective (discrimination over the
//!   global positive pool plus a softplus ranking regulariser), the positive
//!   cohesion extension and the ablation objectives, all with analytic
//!   gradients and a finite-difference checker.
//! - [`head`]: a multi-head attention pooling head with a hand-written
//!   backward pass and a binary checkpoint format.
//! - [`synthworld`]: a seeded matched-context world (identities, backgrounds,
//!   near-identity distractors, part edits) standing in for a frozen backbone.
//! - [`train`]: AdamW with warmup + cosine schedule, role-aware masking and
//!   the training loop.
//! - [`eval`]: directed margins, SSR/PA, correlation aggregation and kernel
//!   PCA projection.
//! - [`format`]: the `NIDE` embedding / token-grid file format.

pub mod error;
pub mod eval;
pub mod format;
pub mod geometry;
pub mod head;
pub mod losses;
pub mod rng;
pub mod synthworld;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{l2_normalize, logit, pairwise_logits, EmbeddingVector, Temperature};
