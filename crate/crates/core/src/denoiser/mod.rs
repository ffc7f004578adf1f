//! Toy U-Net noise predictor with pluggable FBA and cross-attention blocks.
//!
//! Two resolution levels with group-normalized residual blocks, a
//! sinusoidal timestep embedding and a skip connection. Training runs in two
//! stages: the base partition on single views, then the FBA and
//! cross-attention partitions on multi-view windows with the base frozen.

pub mod checkpoint;
pub mod network;
pub mod params;
pub mod sample;
pub mod train;

pub use checkpoint::{load_checkpoint, load_train_state, save_checkpoint, save_train_state};
pub use network::{
    collect_g_features, collect_noise_free_maps, forward, forward_tape, Bound, ForwardCtx, GFeatures, NetGeometry,
    RunSettings,
};
pub use params::{Architecture, DenoiserParams, Level, Partition, XaLayer};
pub use sample::{reverse_loop, sample_multiview, EpsPredictor, NetworkPredictor, OracleDenoiser, SampleOptions};
pub use train::{train_base, train_fba, LossRecord, MultiViewExample, Phase, TrainConfig, TrainState};
