//! Low-shot object counting with iterative prototype adaptation: a small
//! multi-scale CNN + self-attention encoder, exemplar shape/appearance
//! prototype extraction, depth-wise correlation with max fusion, density
//! regression, the object-normalized training losses, a synthetic-scene
//! data pipeline, and MAE/RMSE evaluation.

pub mod config;
pub mod density;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod loss;
pub mod model;
pub mod ope;
pub mod optim;

pub use config::{ModelConfig, TrainConfig};
pub use density::{estimate_count, gt_density, DensityMap};
pub use encoder::{EncodedImage, Encoder};
pub use error::LocaError;
pub use model::{CountingMode, ForwardOutput, LocaModel, ModelVariant};
pub use ope::{AdaptVariant, ExemplarBox, Ope, PrototypeMode, PrototypeSet};

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod train;
