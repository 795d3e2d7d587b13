//! Context-aware incremental sequential recommendation.
//!
//! Users and items carry a static embedding plus two temporal states, one
//! evolved over the full interaction history and one over a trailing context
//! window. States evolve in closed form between interaction days, are mixed
//! by a gated multi-expert fusion layer, and jump when a day's interactions
//! arrive. Training unrolls the recurrence and backpropagates through
//! fixed-length segments of days.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod series;
pub mod sparse;
pub mod tape;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use data::{Dataset, Format, Interaction, Split};
pub use error::{Error, Result};
pub use evaluation::{EvalOptions, MetricsReport, RankRecord};
pub use graph::{BiAdjacency, EdgeStore, HistoryIndex};
pub use model::{Clock, Cpmr, ModelConfig, TemporalStates, Variant};
pub use series::GainAxis;
pub use params::{Checkpoint, ParamId, ParameterSet};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainOutcome};
