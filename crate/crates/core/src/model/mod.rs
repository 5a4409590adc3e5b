//! Dual-head micro-network: a shared trunk feeding a main head (panel genes)
//! and an auxiliary head (remaining genes), trained jointly on
//! `L_main + λ·L_aux` with plain SGD.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod net;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointConfig};
pub use config::{
    compound_scale, HeadLoss, LossConfig, ScalingConfig, TrunkConfig, TrunkVariant, VitConfig,
};
pub use loss::{loss, LossParts};
pub use net::{backward, forward, init_params, sgd_step, Cache, ModelState, Sgd};
pub use train::{predict, train, History, TrainConfig, TrainingSet};
