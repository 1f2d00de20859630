//! Two-stage, progressive and guided quantized training, and plans that
//! combine them.

mod plan;
mod schedule;
mod train;

pub use plan::{compose, Phase, StrategySet};
pub use schedule::{BitSchedule, GuidedConfig, LrSchedule, TrainSchedule};
pub use train::{
    evaluate, guidance_loss, run_guided, run_phase, run_plan, run_pretrain, run_progressive, run_two_stage, EpochLog,
    EvalMetrics, PhaseResult, TrainContext,
};
