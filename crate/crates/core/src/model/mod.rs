//! Trajectory model: observed-sequence encoder, query-based decoder and checkpoints.

mod batch;
pub mod checkpoint;
mod config;
mod pretr;

pub use batch::{DecoderMasks, EncoderMasks, SceneBatch};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{AttnLayout, AttnVariant, DecodeMode, ModelConfig};
pub use pretr::{
    divided_attention_block, spatial_attention, temporal_attention, DecoderLayer, DecoderTrace, Dropout,
    EncoderLayer, Pretr, PretrParams, SelfAttention, StageMasks,
};
pub(crate) use pretr::drop;

#[cfg(test)]
mod tests;
