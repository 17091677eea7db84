//! Core algorithms for adaptive-batch-size distributed training at desk
//! scale: deterministic simulated collectives, synthetic objectives with
//! exact gradients, the gradient-noise norm test and batch-size schedule,
//! Adam/AdamW, and a fully reproducible training loop.

pub mod collectives;
pub mod error;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod vector;

pub use collectives::{
    make_even_shards, ExecMode, GradReport, GroupError, GroupHandle, ParamShard, ReduceOp,
    ShardLayout, WorkerGroup,
};
pub use error::CoreError;
pub use objectives::{
    make_dataset, make_holdout_dataset, sample_batch, BatchIndex, Dataset, DatasetParams,
    Objective, ObjectiveKind,
};
pub use optim::{
    adam_step_theory, adamw_step, clip_gradient, theorem_condition, theorem_constant_c1,
    AdamConfig, AdamForm, LrSchedule, OptimState,
};
pub use rng::{streams, RngStream};
pub use schedule::{
    approx_norm_test, ddp_norm_test, ddp_norm_test_reduced, ddp_variance_estimator, esg_check,
    exact_variance_expectation, per_sample_variance_l1, round_batch_plan, ApproxTestResult,
    BatchPlan, EsgCoordinate, NormTestConfig, TestOutcome,
};
pub use trainer::{
    accumulate_minibatch_grad, evaluate, run_training, split_batch, ObjectiveSpec, ParallelMode,
    RunMetrics, ScheduleMode, StepRecord, TestKind, TrainConfig,
};
pub use vector::{coordinatewise_variance, mean_vector, ElementwiseOp, ParamVector, VarianceDivisor};
