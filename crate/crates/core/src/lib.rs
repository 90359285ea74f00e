//! Weight-only group-wise quantization for linear-layer models.
//!
//! The pipeline quantizes a model layer by layer with GPTQ, optionally
//! choosing each group's scale by an input-aware grid search beforehand
//! ([`stage1`]) and refining the scales by closed-form coordinate descent
//! with the integer codes frozen afterwards ([`stage2`]). The refinement
//! accounts for the input deviation caused by already-quantized layers.

pub mod cli;
pub mod compare;
pub mod error;
pub mod gptq;
pub mod linalg;
pub mod oracle;
pub mod pipeline;
pub mod quantizer;
pub mod stage1;
pub mod stage2;
pub mod statistics;
pub mod tensor_io;

pub use error::{Error, Result};
