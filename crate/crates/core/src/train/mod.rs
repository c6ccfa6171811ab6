//! Optimization and evaluation.

pub mod adam;
pub mod eval;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{evaluate, evaluate_cube, evaluate_prediction, super_resolve_physical, AnyParams, Region};
pub use trainer::{
    prepare_protocol, train, train_step, DataConfig, EpochRecord, ProtocolData, TrainConfig, TrainOutcome,
    TrainOutput, TrainReport,
};
