//! Skin-lesion classification pipeline at desk scale.
//!
//! Images are augmented ([`augment`]), catalogued and split ([`dataset`]),
//! packed into an indexed record file, used to train a residual CNN
//! ([`model`]), scored with one-vs-rest ROC analysis ([`metrics`]) and
//! explained with GradCAM ([`explain`]).
//!
//! Batch work goes through [`parallel::Exec`]; with the default `parallel`
//! feature it runs on rayon, otherwise sequentially. Results are identical
//! either way.

pub mod augment;
pub mod dataset;
pub mod explain;
pub mod image;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod synthetic;
