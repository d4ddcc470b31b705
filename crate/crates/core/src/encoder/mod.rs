//! Joint space-time transformer encoder with classifier and projection
//! heads.

mod batch;
mod freeze;
mod model;
mod params;

pub use batch::{backward_batch, encode_batch, encode_batch_with_cache, CHUNK};
pub use freeze::{apply_freeze, FreezeMask, TrainingView};
pub use model::{
    block_backward, block_forward, check_clip, classify, classify_backward, classify_batch,
    embed_patches, encode, encode_input, encode_with_cache, encoder_backward, gelu, gelu_grad,
    hidden_through, layer_norm, layer_norm_backward, patchify, project, project_backward,
    project_batch, BlockCache, EncoderInput, ForwardCache, LnCache, Projection, LN_EPS,
};
pub use params::{Block, EncoderDims, EncoderParams, Layer, ParamInfo, MLP_RATIO};
