//! Statistics over search results and the sweep harness.

mod stats;
mod sweep;

pub use stats::{average_ranks, contiguity, inter_method_variance, jaccard, pearson, spearman};
pub use sweep::{
    build_sweep, Cell, Derived, Dispersion, Overlap, RankCorrelation, Shape, SweepConfig, SweepReport, BUNDLE_FILES,
};
