//! hsidet — a from-scratch engine for the HSI-ShipDetectionNet lightweight
//! ship detector: inference, toy-scale training, and exact complexity
//! analysis, with every block verified against analytic formulas,
//! brute-force oracles, and finite-difference gradient checks.
//!
//! The building blocks:
//!
//! - [`tensor`]: dense rank-4 tensors with reverse-mode differentiation;
//! - [`ghost`]: Ghost modules and the LHAB-Gbneck residual block;
//! - [`attention`]: the lightweight hybrid attention block (LHAB) and its
//!   ECA-style ablation variants;
//! - [`gnconv`]: iterative gated convolution gⁿConv and the HSI-Former block;
//! - [`backbone`]: the LHAB-GhostNet backbone with four multi-scale taps;
//! - [`detect`]: PANet neck with tiny-object level, heads, decoding, NMS,
//!   and the training loss;
//! - [`anchors`]: 1-IoU k-means anchor clustering;
//! - [`metrics`]: precision/recall/mAP evaluation;
//! - [`analyzer`]: exact parameter and FLOP accounting;
//! - [`io`]: weight container, config, images, annotations, toy data;
//! - [`train`]: SGD training loop for desk-scale experiments.
//!
//! The `book/` directory holds a guided tour; its code snippets compile as
//! doc-tests of this crate (see `booktests` below).

pub mod analyzer;
pub mod anchors;
pub mod attention;
pub mod backbone;
pub mod detect;
pub mod error;
pub mod ghost;
pub mod gnconv;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};

/// Book chapters are compiled as doc-tests so the guide can never drift from
/// the library.
#[cfg(doctest)]
mod booktests {
    macro_rules! book_chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    book_chapter!(introduction, "../../../book/src/introduction.md");
    book_chapter!(tensors, "../../../book/src/tensors-and-autodiff.md");
    book_chapter!(ghost, "../../../book/src/ghost-modules.md");
    book_chapter!(attention, "../../../book/src/hybrid-attention.md");
    book_chapter!(gnconv, "../../../book/src/gated-convolution.md");
    book_chapter!(backbone, "../../../book/src/backbone-and-detection.md");
    book_chapter!(anchors_metrics, "../../../book/src/anchors-and-metrics.md");
    book_chapter!(complexity, "../../../book/src/complexity-analysis.md");
}
