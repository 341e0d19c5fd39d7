//! Maskable two-tower transformer encoders.

mod config;
mod forward;
mod model;
mod params;


pub use config::{ModelConfig, TowerConfig, TowerInput, TowerKind};
pub use forward::{
    block_forward, block_param, masked_ffn, masked_mha, patchify, BlockVars, ForwardOpts, SeqShape, TokenBatch, TowerBatch,
    TowerMaskVars, TowerRun, PAD,
};
pub use model::{MaskValues, TowerMasks, TwoTowerModel, INIT_LOGIT_SCALE, MAX_LOGIT_SCALE};
pub use params::{Bound, Params};
