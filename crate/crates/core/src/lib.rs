//! Continuous-time recommendation over interaction graphs: event storage,
//! harmonic time encoding, per-node memory, attention-based temporal
//! convolution, pairwise training and ranking evaluation.

pub mod checkpoint;
pub mod config;
pub mod ctdg;
pub mod dct;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod time_codec;

pub use config::{Precision, TrainConfig};
pub use checkpoint::Checkpoint;
pub use ctdg::{build_graph, GraphDims, Interaction, SamplingStrategy, TemporalGraph};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, MetricsReport, NegativeSamples};
pub use pipeline::{Partition, Prepared};
pub use synth::{SynthKind, SynthSpec};
pub use model::{score, train, ModelParams};
pub use scalar::Scalar;

pub type ModelParams64 = ModelParams<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type Memory64 = memory::MemoryState<f64>;
pub type Memory32 = memory::MemoryState<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
