//! ViT architecture description and a plain f64 reference encoder stack.

pub mod capture;
pub mod config;
pub mod model;
pub mod numeric;

pub use capture::{ActivationCapture, EncoderCapture, LogitBatch};
pub use config::{AttentionScale, EffortConfig, ViTConfig};
pub use model::{
    encoder_forward, model_forward, EncoderOutput, EncoderWeights, ModelOutput, ModelWeights,
    SyntheticInit, SyntheticRun,
};
pub use numeric::{attention_head, softmax};
