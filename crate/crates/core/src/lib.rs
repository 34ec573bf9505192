//! Small-object copy-paste augmentation for detection datasets, with a
//! K-fold Tree-structured Parzen Estimator search for the augmentation
//! policy and size-bucketed AP evaluation.

pub mod augment;
pub mod cli;
pub mod data;
pub mod metrics;
pub mod report;
pub mod search;
pub mod seed;
pub mod synth;
pub mod tpe;

pub use augment::{Operation, PlacementConfig, Policy, PolicySet};
pub use data::{AnnotatedImage, BBox, Dataset, Instance, Origin, SizeClass};
