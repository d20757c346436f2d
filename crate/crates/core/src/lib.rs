// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod autodiff;
mod binio;
pub mod depth_fusion;
pub mod editing;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod neural_mesh;
pub mod renderer;
pub mod scene_assets;
pub mod segmentation;
pub mod training;

pub use error::{Error, Result};
