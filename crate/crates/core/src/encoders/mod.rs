//! Visual encoders (trainable) and the frozen semantic encoder.

mod semantic;
mod visual;

pub use semantic::{
    semantic_encode, tokenize, ProjectionMode, SemanticBank, SemanticConfig, SemanticEncoder,
    SemanticMode,
};
pub use visual::{
    init_visual_encoder, visual_encode, Architecture, Embedder, EncoderConfig, NamedTensor,
    VisualEncoderParams,
};
