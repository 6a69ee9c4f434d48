//! Masked token model over quantized scenes and the attention density ratio.

mod density;
mod model;
mod quantize;
mod tokens;
mod train;

pub use density::{
    alpha, attention_density_ratio, density_of_masked, write_density_csv, write_reference_csv, AlphaStats, DensityReport, LayerChoice,
    REFERENCE_CURVES, REFERENCE_P,
};
pub use model::{accuracy, CommaConfig, CommaForward, CommaLayer, CommaParams, StComma};
pub use quantize::{scene_positions, Quantizer};
pub use tokens::{mask_scene, MaskFlag, TokenBatch, TokenScene};
pub use train::{train_comma, write_comma_log_csv, CommaCheckpoint, CommaEpochLog, CommaTrainConfig};

#[cfg(test)]
mod tests;
