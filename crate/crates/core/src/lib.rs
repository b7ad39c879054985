//! Flash-backed sparse feed-forward inference runtime.

pub mod analysis;
pub mod cache;
pub mod cost;
pub mod engine;
pub mod error;
pub mod math;
pub mod predictor;
pub mod reader;
pub mod scalar;
pub mod store;
pub mod trace;

pub use error::{Error, Result};
pub use math::Mat;
pub use reader::{BypassMode, FlashReader, ReadPlan, ReaderOptions, ThroughputGrid};
pub use scalar::Scalar;
pub use store::{BundledRecord, LayerWeights, StoreFile, StoreManifest};
pub use trace::ActivationTrace;

/// Concrete single-precision instantiations; the default build target.
pub type Record32 = store::BundledRecord<f32>;
pub type Layer32 = store::LayerWeights<f32>;
pub type Cache32 = cache::NeuronCache<f32>;
pub type Predictor32 = predictor::PredictorParams<f32>;
pub type Model32 = engine::ToyModel<f32>;

/// Double-precision instantiations for oracle and verification work.
pub type Record64 = store::BundledRecord<f64>;
pub type Layer64 = store::LayerWeights<f64>;
pub type Cache64 = cache::NeuronCache<f64>;
pub type Predictor64 = predictor::PredictorParams<f64>;
pub type Model64 = engine::ToyModel<f64>;
