//! Zero-shot optical flow from a distributional, locally tokenized,
//! random-access next-frame model, traced with per-patch KL divergence.

pub mod error;
pub mod frame;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod synth;
pub mod tokenizer;
pub mod tracer;

pub use error::{Error, Result};
pub use frame::{FlowField, Frame, OcclusionMask};
