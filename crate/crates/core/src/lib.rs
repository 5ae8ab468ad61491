//! Multi-modal contextual information tracking: a selective state-space
//! memory carried across video frames and fused into a transformer tracker.

pub mod backbone;
pub mod bbox;
pub mod cif;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod image;
pub mod mamba;
pub mod model;
pub mod nn;
pub mod params;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use bbox::BBox;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use ssm::HiddenState;
pub use tensor::Tensor;
pub use tracker::{Tracker, TrackerConfig};
pub use train::TrainConfig;
