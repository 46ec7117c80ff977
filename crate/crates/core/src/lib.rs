//! Atrous row/column sparse attention for lane segmentation.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors with reverse-mode gradients, finite-difference
//!   checks and the dump formats.
//! * [`attention`]: the atrous offset schedule, band gather, the global and
//!   slice-local two-stage attention blocks, a dense masked oracle and the
//!   complexity counters.
//! * [`backbone`]: a small staged CNN with dilation in the late stages and
//!   local attention interleaved after stages 2 to 4.
//! * [`decoder`]: the start-point guided decoder (Gaussian head, guided
//!   existence classifier, segmentation branch).
//! * [`losses`] and [`metrics`]: the training objective and the F1 metric.
//! * [`synth`]: a deterministic synthetic lane-scene generator.
//! * [`model`] and [`train`]: the assembled network and a toy training loop.
//!
//! The guide under `book/` walks through the same material; its code
//! snippets are compiled and run as doc-tests of this crate.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod decoder;
pub mod error;
pub mod init;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/local.md")]
    mod local {}
    #[doc = include_str!("../../../book/src/complexity.md")]
    mod complexity {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    mod decoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
