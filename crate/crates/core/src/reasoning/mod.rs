//! Trainable screening head over retrieved evidence.

pub mod autodiff;
pub mod checkpoint;
pub mod evidence;
pub mod model;
pub mod positional;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_params, save_params};
pub use evidence::{retrieve_evidence, EvidenceSet};
pub use model::{
    cross_attention, forward, self_attention, CrossAttentionWeights, ReasoningConfig, ReasoningParams,
    SelfAttentionWeights,
};
pub use positional::sincos_positional;
pub use tensor::Matrix;
pub use train::{
    loss_and_grad, predict, prepare_examples, train, train_on_examples, TrainConfig, TrainedModel, TrainingExample,
};
