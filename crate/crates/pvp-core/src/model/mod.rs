//! Toy multimodal transformer: patch-embedded image tokens prepended to a
//! causal text stream, with trace capture and residual-stream interventions.

pub mod backward;
pub mod config;
pub mod forward;
pub mod params;
pub mod train;

pub use backward::{loss_and_grads, TrainItem};
pub use config::ModelConfig;
pub use forward::{
    decode_state, embed_image, forward, patch_embeddings, predict_answer, softmax, ForwardTrace,
    SteeringHook,
};
pub use params::{checkpoint_load, checkpoint_save, Params};
pub use train::{
    probe_accuracy, train, EpochLog, EvalProbe, OwnedTrainItem, TrainSchedule,
};
