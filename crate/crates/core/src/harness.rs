//! Desk-scale stand-in for the full pipeline: synthetic scenes with exact
//! depth and labels, a small shared-encoder/dual-decoder model, and a
//! deterministic joint training loop.

pub mod config;
pub mod model;
pub mod scene;
pub mod train;

pub use config::{RunConfig, ShareMode};
pub use model::{toy_depth_loss, Heads, ModelOutput, ToyModel};
pub use scene::{generate_scene, Scene, SceneSpec, Surface};
pub use train::{
    evaluate, init_model, train, train_with, training_scene, validation_scenes, Dataset, EvalReport, MetricsRecord, TrainOutput,
};
