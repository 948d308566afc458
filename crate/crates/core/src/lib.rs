//! Multimodal cross-attention network with supervised contrastive learning
//! for emotion recognition in conversation.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: a small reverse-mode differentiation tape over dense `f64`
//! tensors, the temporal pyramid-squeeze visual module, the stacked
//! triple-query cross-attention fusion, contrastive heads with hard-negative
//! mining, the fusion classifier and metrics, a seeded synthetic corpus
//! generator, and the training loop. File formats and the command line live
//! in the `mcncl` crate.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` also rejects NaN; index loops mirror the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod conlearn;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod ingest;
pub mod mcn;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod psa;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Divergence, Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
