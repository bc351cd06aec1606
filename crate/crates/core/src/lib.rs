//! Semi-supervised sequence recognition with CTC.
//!
//! The crate bundles everything needed to train a bidirectional recurrent
//! acoustic model with the CTC criterion and to continue training it on
//! unlabeled data with pseudo-labels generated on the fly:
//!
//! - [`corpus`]: synthetic corpus generation, frame preprocessing and the
//!   binary corpus container.
//! - [`augment`]: speed perturbation and spectral masking.
//! - [`ctc`]: CTC loss and gradient, plus a brute-force path enumerator.
//! - [`decode`]: greedy, prefix beam search and exhaustive decoders.
//! - [`model`]: BiLSTM acoustic model, Adam and checkpoints.
//! - [`selftrain`]: supervised, self-training, UDA and one-shot regimes.
//! - [`eval`]: token error rate and oracle diagnostics.
//! - [`experiment`]: config-driven runs, sweeps and reports.

pub mod augment;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod eval;
pub mod experiment;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod selftrain;

pub use matrix::Matrix;
