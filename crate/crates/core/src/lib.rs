//! Detection of adversarial and out-of-distribution inputs from
//! class-conditional nearest-neighbor statistics of a network's layer
//! representations.

pub(crate) mod blob;
pub mod attack;
pub mod dataset;
pub mod detector;
pub mod dimreduce;
pub mod error;
pub mod knn;
pub mod matrix;
pub mod metrics;
pub mod pvalues;
pub mod synthetic;
pub mod teststats;
pub mod toynet;

pub use dataset::{load_dataset, write_dataset, LayerBlock, LayerDataset};
pub use detector::{fit_detector, DetectorConfig, DetectorModel, ScoredSample, Task};
pub use error::{Error, ErrorKind, Result};
pub use knn::{default_k, KnnIndex, Metric, NeighborList, SearchMode};
pub use matrix::Matrix;
pub use pvalues::Combiner;
pub use teststats::StatKind;
