//! StFT model crate: overlapping tokenizer, the hierarchical dual-path
//! transformer operator, the rectified-flow residual corrector, and the
//! checkpoint container binding parameters to their configs.

pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod nn;
pub mod stft;
pub mod tape;
pub mod tokenizer;

pub use error::{ModelError, Result};
pub use tokenizer::{detokenize, plan_layout, tokenize, PatchLayout, TokenGrid};
