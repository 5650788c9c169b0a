//! Desk-scale testbed for document-level machine translation with parallel
//! (non-autoregressive) decoders.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense row-major `f64` arrays and the raw kernels everything
//!   else is written against.
//! * [`tape`]: define-by-run reverse-mode autodiff over those arrays, with a
//!   finite-difference gradient checker.
//! * [`attn`]: sentence group tags and the mask algebra for locality-aware
//!   multi-head attention.
//! * [`model`]: transformer encoder/decoder stacks, length prediction,
//!   decoder-input construction, checkpoint serialization.
//! * [`loss`]: alignment-marginalizing training objectives (position-wise
//!   cross entropy, glancing, CTC, sentence-restricted CTC, vertex-graph
//!   marginalization) and their composition per model variant.
//! * [`decode`]: greedy/argmax/collapse/path decoding plus the segment-level
//!   translation entry point with instrumented pass counts.
//! * [`data`]: synthetic document corpora with controllable cross-sentence
//!   ambiguity, segmentation, distillation, file I/O.
//! * [`eval`]: BLEU variants, repetition diagnostics, wall-clock speed
//!   benchmarking, context-ablation probes.
//! * [`train`]: adaptive-moment optimizer and the training loop shared by all
//!   model variants.

pub mod attn;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod par;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
