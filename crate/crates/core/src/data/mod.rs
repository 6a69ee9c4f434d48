//! Annotation ingest, scene assembly, normalization, augmentation and
//! leave-one-out splits.

pub mod archive;
pub mod raw;
pub mod scene;
pub mod splits;
pub mod synth;

pub use raw::{load_dataset, load_tracks, Dataset, DatasetId, RawTrack, Recording, TrackPoint};
pub use scene::{
    augment_rotate, build_scenes, denormalize, invert_permutation, normalize, permute_agents, shuffle_agents,
    NormParams, RotationPolicy, Scene, SceneConfig,
};
pub use splits::{fold, leave_one_out_splits, Fold, NormSource, SplitConfig};
