//! Vector bundles over a discretized circle, a hidden wave-type model driven
//! through an oracle, and reconstruction of the model up to gauge from
//! source-to-solution energy pairings.
// `!(x <= tol)` is used on purpose so that NaN fails every tolerance check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod forward;
pub mod geometry;
pub mod linalg;
pub mod oracle;
pub mod reconstruct;
pub mod scalar;
pub mod scenario;
pub mod sources;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` instantiations used throughout the pipeline.
pub type Manifold = geometry::GridManifold<f64>;
pub type Atlas = geometry::ChartAtlas<f64>;
pub type Metric = geometry::FiberMetric<f64>;
pub type Bundle = geometry::GridBundle<f64>;
pub type Section = geometry::Section<f64>;
