//! Latency surrogate construction for block-wise neural architecture spaces.
//!
//! The crate covers the whole loop of building a latency predictor for a
//! supernet whose sub-networks vary in per-unit depth and per-block features:
//!
//! - [`archspace`]: supernet specifications, exact space cardinality, depth
//!   bins, random and depth-balanced sampling.
//! - [`encoding`]: fixed-length vector encodings of architectures (feature
//!   combination counts, feature counts, statistical summaries, per-block
//!   features and one-hot).
//! - [`measurement`]: measurement backends, trimmed-mean aggregation,
//!   reference-model quality control and a synthetic latency oracle.
//! - [`dataset`]: architecture/latency datasets with bin partitions, stratified
//!   splits and checksummed line-delimited persistence.
//! - [`predictor`]: an MLP regressor trained with MSE and Adam, plus bin-wise
//!   evaluation and a finite-difference gradient check.
//! - [`lut`]: the additive lookup-table baseline and its affine bias correction.
//! - [`pipeline`]: the train, evaluate, extend loop that grows the dataset
//!   until the accuracy constraints are met.
//!
//! Batch-shaped work (encoding, oracle evaluation, prediction) runs on rayon
//! when the `parallel` feature is enabled; see [`par::Execution`].

pub mod archspace;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod lut;
pub mod measurement;
pub mod par;
pub mod pipeline;
pub mod predictor;
pub mod seed;

pub use archspace::{ArchConfig, DepthBins, FeatureDim, Scope, SupernetSpec, UnitSpec};
pub use dataset::{LatencyDataset, Sample};
pub use encoding::{EncodedVector, EncodingScheme};
pub use error::{Error, Result};
pub use measurement::{MeasurementBackend, OracleBackend, OracleParams};
pub use predictor::{EvalReport, EvalStrategy, MlpModel, TrainConfig};
