//! Denoiser, frozen feature network and discriminator heads.

pub mod checkpoint;
pub mod counters;
mod denoiser;
mod discriminator;
mod featnet;
mod gradsuite;
mod params;

pub use denoiser::{time_embedding, BoundDenoiser, Denoiser, DenoiserConfig, PredictionMode};
pub use discriminator::{CondMode, CondNodes, Conditioning, DiscArch, DiscriminatorBundle, FeatAffine};
pub use featnet::{cross_entropy, pretrain_feature_network, FeatnetArch, FeatnetConfig, FeatureNetwork, FeatureNodes};
pub use gradsuite::network_suite;
pub use params::{dense_stack, init_weight, one_hot, push_dense_stack, ParamStore};
