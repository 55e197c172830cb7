//! Streamline clustering with learned fiber embeddings.
//!
//! Fibers are embedded by a point-cloud encoder trained to reproduce MDF
//! distances, grouped by self-training soft assignment with anatomical
//! weighting, and pruned of outliers per cluster. See the guide in `book/`
//! for a walkthrough.

pub mod atlas;
pub mod cli;
pub mod dfc;
pub mod distance;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod parcellation;
pub mod tractogram;

pub use error::{Error, Result};

// The guide's snippets run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tractograms.md")]
    mod tractograms {}
    #[doc = include_str!("../../../book/src/distance.md")]
    mod distance {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/parcellation.md")]
    mod parcellation {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
