//! Procedural analytic-SDF shapes and the synthetic triplet dataset.
//!
//! Shapes are composition trees of primitives joined by hard or polynomial
//! smooth union, optionally warped by a radial sinusoidal displacement, so
//! an exact signed distance (up to the documented Lipschitz slack) is
//! available everywhere. The renderer sphere-traces these fields to produce
//! image/normal/depth triplets whose ground truth is the field itself.

mod dataset;
mod raycast;
mod shapes;

pub use dataset::{
    generate_dataset, load_dataset, DataError, DatasetManifest, LoadedSample, SampleEntry, Split,
};
pub use raycast::{raycast, SampleTriplet, RAYCAST_HIT_EPS};
pub use shapes::{
    sample_shape, train_distribution, wild_distribution, AnalyticShape, Displacement, Primitive,
    ShapeDistribution, ShapeNode, FIT_BOX,
};
