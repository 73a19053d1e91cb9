//! Pairwise pointmap network: shared ViT encoder with prompt insertion, two
//! cross-attending decoder branches and linear pointmap/confidence heads.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_prompts, load_weights, save_checkpoint,
    save_prompts, save_weights, Checkpoint, CHECKPOINT_VERSION, WEIGHTS_MAGIC,
};
pub use config::{ModelConfig, PromptMode};
pub use model::{
    decode_pair, encode, forward_pair, head, infer_pair, patchify, pixel_gather_index, positional_embedding,
    BoundPrompts, BoundWeights, HeadOutput, PairOutput, CONF_LOGIT_MAX,
};
pub use params::{weight_layout, Branch, PromptSet, Weights, PROMPT_INIT_STD};
