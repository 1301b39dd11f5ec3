//! Retrieval and evaluation engine for visual geo-localization.
//!
//! The crate covers everything downstream of a CNN/Transformer backbone:
//! pooling backbone outputs into global descriptors, mining training
//! triplets, building and querying nearest-neighbour indexes, multi-crop
//! query processing, and recall evaluation against GPS ground truth.

// Parameter checks are written `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod dataio;
pub mod descriptor;
pub mod geoeval;
pub mod index;
pub mod mining;
pub mod numerics;
pub mod querypipe;

pub use descriptor::{Descriptor, DescriptorSet};
pub use numerics::Matrix;
