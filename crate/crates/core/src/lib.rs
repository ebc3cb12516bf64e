//! Semi-supervised lesion segmentation from appearance-prompted pseudo labels.
//!
//! Pipeline: training-free pseudo labels ([`appg`]) warm up a frozen static
//! teacher; a student then trains against labeled masks plus entropy-fused
//! predictions of the static and an EMA teacher ([`uewf`]), regularized by
//! reverse contrastive learning on its least confident pixels ([`aurcl`]).

pub mod appg;
pub mod aurcl;
pub mod backbone;
pub mod error;
pub mod losses;
pub mod metrics;
mod pool;
pub mod raster;
pub mod seed;
pub mod split;
pub mod synth;
pub mod trainer;
pub mod types;
pub mod uewf;

pub use error::{Error, Result};
pub use metrics::MetricsRecord;
pub use split::{make_splits, SplitManifest};
pub use types::{BBox, BinaryMask, FeatureGrid, GrayscaleImage, ProbMap, ScoredBox};
