//! Synthetic long-tailed benchmarks with open classes and shot-split bookkeeping.

mod dataset;
mod generate;
mod profile;
mod split;

pub use dataset::{Dataset, DatasetInfo};
pub use generate::{
    exploration_pools, generate_blob_images, generate_gaussian_mixture, BlobClass, BlobConfig, BlobWorld,
    GaussianWorld, MixtureConfig, Splits, World, BLOB_JITTER, STREAM_CLASSES, STREAM_POOL, STREAM_TEST, STREAM_TRAIN,
};
pub use profile::{make_profile, LongTailProfile, ProfileKind};
pub use split::{split_by_shot, Shot, ShotSplit, FEW_SHOT_BELOW, MANY_SHOT_ABOVE};
