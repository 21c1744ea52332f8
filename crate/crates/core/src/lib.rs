//! Depth pruning as cardinality-constrained subset selection.
//!
//! Pick `k` of a model's `N` blocks to remove so that a calibration loss of
//! the pruned model is as low as possible. The crate provides
//!
//! * [`LayerMask`]: the removed-layer set and its canonical text key,
//! * [`objective`]: calibration losses behind a cached evaluator,
//! * [`search`]: seven search algorithms over a shared [`Objective`],
//! * [`oracle`]: exhaustive enumeration for small instances,
//! * [`analysis`]: rank correlation, dispersion, mask overlap and sweeps.
//!
//! ```
//! use depthsel::objective::{Landscape, LandscapeSpec};
//! use depthsel::{search, Objective};
//!
//! let obj = Objective::from_loss(Landscape::new(LandscapeSpec::synergy_example())?);
//! let greedy = search::greedy(&obj, 2)?;
//! let beam = search::beam(&obj, 2, 5)?;
//! assert!(beam.loss < greedy.loss);
//! # Ok::<(), depthsel::Error>(())
//! ```

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
mod error;
mod mask;
pub mod objective;
pub mod oracle;
pub mod search;
pub mod seed;

pub use error::{Error, Result};
pub use mask::{binomial, Budget, LayerMask};
pub use objective::{EvalRecord, LossFn, Objective};
pub use search::{run_search, Algorithm, SearchConfig, SearchResult};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
}
