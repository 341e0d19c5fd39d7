//! Weight inheritance: learnable structured masks, the compression-rate
//! accountant, thresholding, materialization and manual layer/width cuts.

mod learn;
mod masks;
mod select;


pub use learn::{learn_masks, MaskLearnOpts};
pub use masks::{
    compression_rate, compression_rate_values, compression_rate_var, deterministic_gate, gate_vars, tower_kept,
    CompressionReport, MaskPhase, MaskSet, TowerReport, GATE_HIGH, GATE_LOW, GATE_TEMPERATURE, PASS_THROUGH_LOGIT,
};
pub use select::{
    manual_config, manual_inherit, manual_plan, materialize, pruned_config, threshold, uniform_layers, THRESHOLD_SLACK,
};
