//! Minimal neural-network stack: CNN state encoder, causal transformer,
//! losses, AdamW and checkpoints. Generic over `f32` and `f64`.

pub mod checkpoint;
pub mod encoder;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod train;

pub use encoder::EncoderConfig;
pub use model::{Arch, Forward, ModelConfig, Mode, SeqInput, SeqModel};
pub use scalar::Scalar;
pub use loss::{entropies, entropy, nll_loss, probabilities, weighted_nll};
pub use optim::{AdamW, AdamWConfig};
pub use train::{evaluate_loss, train, train_model, StepLog, TrainConfig, TrainLog, TrainRngs, Unweighted, Weigher};
