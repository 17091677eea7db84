//! The full training loop: sampling, splitting across workers, gradient
//! accumulation, collectives, norm test, optimizer step, counters, and
//! stopping on the sample budget.
//!
//! Every rank runs the identical deterministic program (same RNG streams,
//! same reduced gradients), so all ranks derive the same batch plan and
//! metrics without extra messaging; rank 0's metrics are returned.

use std::time::Instant;

use crate::collectives::{ExecMode, GroupError, GroupHandle, ReduceOp, WorkerGroup};
use crate::error::CoreError;
use crate::objectives::{
    make_dataset, sample_batch, BatchIndex, DatasetParams, Objective, ObjectiveKind,
};
use crate::optim::{adam_step_theory, adamw_step, clip_gradient, AdamConfig, AdamForm, LrSchedule, OptimState};
use crate::rng::{streams, RngStream};
use crate::schedule::{ddp_norm_test_reduced, round_batch_plan, BatchPlan, NormTestConfig, TestOutcome};
use crate::vector::ParamVector;

/// Problem definition for a run.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub n: usize,
    pub d: usize,
    /// Hidden width of the trained MLP (mlp_tanh only).
    pub hidden: usize,
    pub params: DatasetParams,
}

impl ObjectiveSpec {
    pub fn build(&self, seed: u64) -> Result<Objective, CoreError> {
        let ds = make_dataset(self.kind, self.n, self.d, seed, &self.params)?;
        Ok(Objective::new(ds, self.hidden))
    }

    pub fn build_holdout(&self, seed: u64, size: usize) -> Result<Objective, CoreError> {
        // Same ground truth as the training split, fresh samples.
        let ds = crate::objectives::make_holdout_dataset(
            self.kind,
            size.max(2),
            self.d,
            seed,
            &self.params,
        )?;
        Ok(Objective::new(ds, self.hidden))
    }
}

/// How the batch size evolves over the run.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleMode {
    /// Norm-test driven.
    Adaptive,
    /// Fixed batch size for the whole run.
    Constant(usize),
    /// Prespecified sizes over fractions of the sample budget.
    Stagewise(Vec<(f64, usize)>),
}

/// Which variance estimator drives the adaptive schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    /// Worker-gradient estimator with the extra all-reduce.
    Ddp,
    /// Closed-form expectation from all per-sample gradients (oracle path).
    ExactVariance,
}

/// How gradients are synchronized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParallelMode {
    /// All-reduce of full gradients (every rank replicates everything).
    Replicated,
    /// Reduce-scatter to parameter shards, then all-gather before the test.
    Sharded,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: ObjectiveSpec,
    pub workers: usize,
    pub accumulation_steps: usize,
    pub initial_global_batch: usize,
    pub norm_test: NormTestConfig,
    pub test_kind: TestKind,
    pub adam: AdamConfig,
    /// Per-step learning rate; `None` keeps the constant rate in `adam`.
    pub lr_schedule: Option<LrSchedule>,
    pub sample_budget: u64,
    /// Optional hard step cap on top of the sample budget.
    pub max_steps: Option<u64>,
    pub schedule_mode: ScheduleMode,
    pub parallel_mode: ParallelMode,
    pub exec_mode: ExecMode,
    pub seed: u64,
    /// Steps between validation evaluations.
    pub val_interval: usize,
    pub holdout_size: usize,
    /// Record the exact full-gradient norm every step (costly; diagnostics).
    pub record_full_grad_norm: bool,
    /// After each batch increase, re-evaluate the test statistic on a fresh
    /// batch of the new size at the current iterate and log it.
    pub debug_recheck: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let grid = self.workers * self.accumulation_steps;
        if grid == 0 {
            return Err(CoreError::invalid("workers and accumulation_steps must be positive"));
        }
        if self.initial_global_batch == 0 || self.initial_global_batch % grid != 0 {
            return Err(CoreError::invalid(format!(
                "initial global batch {} must be a positive multiple of J*M = {grid}",
                self.initial_global_batch
            )));
        }
        self.norm_test.validate()?;
        self.adam.validate()?;
        if let Some(s) = &self.lr_schedule {
            s.validate()?;
        }
        if self.sample_budget == 0 {
            return Err(CoreError::invalid("sample budget must be positive"));
        }
        match &self.schedule_mode {
            ScheduleMode::Adaptive => {
                if self.norm_test.max_global_batch % grid != 0 {
                    return Err(CoreError::invalid(format!(
                        "max_global_batch {} must be a multiple of J*M = {grid}",
                        self.norm_test.max_global_batch
                    )));
                }
                if self.test_kind == TestKind::Ddp && self.workers < 2 {
                    return Err(CoreError::invalid(
                        "the worker-variance test needs J >= 2; use the exact-variance test for J = 1",
                    ));
                }
            }
            ScheduleMode::Constant(b) => {
                if *b == 0 || b % grid != 0 {
                    return Err(CoreError::invalid(format!(
                        "constant batch {b} must be a positive multiple of J*M = {grid}"
                    )));
                }
            }
            ScheduleMode::Stagewise(stages) => {
                if stages.is_empty() {
                    return Err(CoreError::invalid("stagewise schedule needs at least one stage"));
                }
                let total: f64 = stages.iter().map(|(f, _)| f).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(CoreError::invalid(format!(
                        "stagewise fractions must sum to 1, got {total}"
                    )));
                }
                for (f, b) in stages {
                    if *f <= 0.0 || *b == 0 || b % grid != 0 {
                        return Err(CoreError::invalid(format!(
                            "stage ({f}, {b}) needs a positive fraction and a J*M-multiple batch"
                        )));
                    }
                }
            }
        }
        if self.val_interval == 0 {
            return Err(CoreError::invalid("val_interval must be positive"));
        }
        Ok(())
    }
}

/// One row of the per-step record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Samples processed after this step.
    pub samples: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub test_statistic: Option<f64>,
    pub val_loss: Option<f64>,
    pub full_grad_norm: Option<f64>,
    pub recheck_statistic: Option<f64>,
}

/// Per-run record stream plus run-level accounting.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
    pub total_steps: u64,
    pub total_samples: u64,
    pub elapsed_seconds: f64,
}

impl RunMetrics {
    pub fn final_batch_size(&self) -> Option<usize> {
        self.records.last().map(|r| r.batch_size)
    }
}

/// Splits the batch into J*M disjoint equal lists: contiguous blocks in
/// rank-major, accumulation-minor order.
pub fn split_batch(
    batch: &BatchIndex,
    workers: usize,
    accumulation_steps: usize,
) -> Result<Vec<Vec<Vec<usize>>>, CoreError> {
    let grid = workers * accumulation_steps;
    if grid == 0 || batch.size() % grid != 0 {
        return Err(CoreError::invalid(format!(
            "batch of {} does not split across J*M = {grid}",
            batch.size()
        )));
    }
    let micro = batch.size() / grid;
    let idx = batch.indices();
    Ok((0..workers)
        .map(|j| {
            (0..accumulation_steps)
                .map(|m| {
                    let start = (j * accumulation_steps + m) * micro;
                    idx[start..start + micro].to_vec()
                })
                .collect()
        })
        .collect())
}

/// Accumulated minibatch gradient `(1/M) sum_m grad(microbatch_m)`.
pub fn accumulate_minibatch_grad(
    obj: &Objective,
    w: &ParamVector,
    microbatches: &[Vec<usize>],
) -> Result<ParamVector, CoreError> {
    let m = microbatches.len();
    if m == 0 {
        return Err(CoreError::EmptyCollection { context: "accumulate_minibatch_grad" });
    }
    let mut acc = ParamVector::zeros(obj.param_dim());
    for micro in microbatches {
        let g = obj.batch_grad(w, &BatchIndex::new(micro.clone()))?;
        acc.axpy(1.0 / m as f64, &g)?;
    }
    Ok(acc)
}

/// Mean per-sample loss over a held-out objective.
pub fn evaluate(holdout: &Objective, w: &ParamVector) -> Result<f64, CoreError> {
    holdout.full_loss(w)
}

fn to_group_error(rank: usize, err: CoreError) -> GroupError {
    GroupError::Abort {
        rank,
        collective: "worker",
        message: err.to_string(),
    }
}

/// Largest multiple of `grid` that is <= `limit` and >= `grid`.
fn clamp_to_grid(global: usize, grid: usize, limit: usize) -> usize {
    let capped = global.min(limit);
    ((capped / grid).max(1)) * grid
}

/// Runs the training loop to completion and returns the metrics stream.
pub fn run_training(cfg: &TrainConfig) -> Result<RunMetrics, CoreError> {
    cfg.validate()?;
    let start = Instant::now();
    let objective = cfg.objective.build(cfg.seed)?;
    let holdout = cfg.objective.build_holdout(cfg.seed, cfg.holdout_size)?;

    let results = WorkerGroup::spawn(cfg.workers, cfg.exec_mode, |rank, group| {
        worker_loop(cfg, &objective, &holdout, rank, group).map_err(|e| match e {
            WorkerError::Group(g) => g,
            WorkerError::Core(c) => to_group_error(rank, c),
        })
    })?;

    let mut metrics = results.into_iter().next().expect("rank 0 result");
    metrics.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(metrics)
}

enum WorkerError {
    Group(GroupError),
    Core(CoreError),
}

impl From<GroupError> for WorkerError {
    fn from(e: GroupError) -> Self {
        WorkerError::Group(e)
    }
}

impl From<CoreError> for WorkerError {
    fn from(e: CoreError) -> Self {
        WorkerError::Core(e)
    }
}

fn stagewise_batch(stages: &[(f64, usize)], samples: u64, budget: u64) -> usize {
    let progress = samples as f64 / budget as f64;
    let mut cumulative = 0.0;
    for (fraction, batch) in stages {
        cumulative += fraction;
        if progress < cumulative {
            return *batch;
        }
    }
    stages.last().expect("validated nonempty").1
}

/// The per-rank body of the training loop. Identical at every rank except
/// for which slice of the batch it differentiates.
fn worker_loop(
    cfg: &TrainConfig,
    objective: &Objective,
    holdout: &Objective,
    rank: usize,
    group: &GroupHandle,
) -> Result<RunMetrics, WorkerError> {
    let dim = objective.param_dim();
    let n = objective.n_samples();
    let grid = cfg.workers * cfg.accumulation_steps;
    let layout = match cfg.parallel_mode {
        ParallelMode::Sharded => Some(crate::collectives::make_even_shards(dim, cfg.workers)?),
        ParallelMode::Replicated => None,
    };

    let mut init_rng = RngStream::new(cfg.seed, streams::INIT_WEIGHTS);
    let mut w = ParamVector::new((0..dim).map(|_| 0.1 * init_rng.standard_normal()).collect());
    let mut batch_rng = RngStream::new(cfg.seed, streams::BATCH_SAMPLING);

    let mut state = OptimState::new(dim, &cfg.adam);
    let mut plan = BatchPlan::initial(cfg.initial_global_batch, cfg.workers, cfg.accumulation_steps)?;
    if let ScheduleMode::Constant(b) = &cfg.schedule_mode {
        plan = BatchPlan::initial(*b, cfg.workers, cfg.accumulation_steps)?;
    }

    let mut records = Vec::new();
    let mut samples: u64 = 0;
    let mut step: u64 = 1;

    while samples < cfg.sample_budget {
        if let Some(max) = cfg.max_steps {
            if step > max {
                break;
            }
        }
        if let ScheduleMode::Stagewise(stages) = &cfg.schedule_mode {
            let b = stagewise_batch(stages, samples, cfg.sample_budget);
            plan = BatchPlan::initial(b, cfg.workers, cfg.accumulation_steps)?;
        }
        // Batch sizes may not exceed the dataset at desk scale.
        if plan.global > n {
            plan = round_batch_plan(clamp_to_grid(plan.global, grid, n), cfg.workers, cfg.accumulation_steps, clamp_to_grid(n, grid, n));
        }

        let batch = sample_batch(&mut batch_rng, n, plan.global)?;
        let assignments = split_batch(&batch, cfg.workers, cfg.accumulation_steps)?;
        let local_grad = accumulate_minibatch_grad(objective, &w, &assignments[rank])?;

        // Synchronize the global gradient.
        let global_grad = match (&cfg.parallel_mode, &layout) {
            (ParallelMode::Replicated, _) => group.all_reduce(&local_grad, ReduceOp::Mean)?,
            (ParallelMode::Sharded, Some(layout)) => {
                let shard = group.reduce_scatter(&local_grad, layout, ReduceOp::Mean)?;
                group.all_gather(&shard, layout)?
            }
            (ParallelMode::Sharded, None) => unreachable!(),
        };

        // Batch loss via the same mean reduction.
        let local_loss = {
            let mine: Vec<usize> = assignments[rank].iter().flatten().copied().collect();
            objective.batch_loss(&w, &BatchIndex::new(mine))?
        };
        let loss_vec = group.all_reduce(&ParamVector::new(vec![local_loss]), ReduceOp::Mean)?;
        let train_loss = loss_vec[0];

        // Norm test (pre-clipping gradient), at the configured interval,
        // only while below the cap.
        let mut test_statistic = None;
        let mut recheck_statistic = None;
        let adaptive = cfg.schedule_mode == ScheduleMode::Adaptive;
        let due = adaptive
            && step % cfg.norm_test.test_interval as u64 == 0
            && plan.global < cfg.norm_test.max_global_batch.min(clamp_to_grid(n, grid, n));
        let mut next_plan = plan;
        if due {
            let outcome = match cfg.test_kind {
                TestKind::Ddp => {
                    let dev = local_grad.sub(&global_grad)?;
                    let variance = group.all_reduce(&dev.mul(&dev)?, ReduceOp::Mean)?;
                    ddp_norm_test_reduced(
                        variance.l1_norm(),
                        global_grad.l2_norm_squared(),
                        &plan,
                        &cfg.norm_test,
                    )
                }
                TestKind::ExactVariance => exact_test(objective, &w, &plan, &cfg.norm_test)?,
            };
            if !outcome.skipped {
                test_statistic = Some(outcome.statistic);
            }
            next_plan = outcome.next_plan;
            if next_plan.global > n {
                next_plan = round_batch_plan(
                    clamp_to_grid(next_plan.global, grid, n),
                    cfg.workers,
                    cfg.accumulation_steps,
                    clamp_to_grid(n, grid, n),
                );
            }
            if cfg.debug_recheck && !outcome.passed {
                recheck_statistic = Some(debug_recheck(
                    cfg, objective, &w, &next_plan, rank, group, &mut batch_rng,
                )?);
            }
        }

        // Optimizer step on the clipped global gradient.
        let grad_norm = global_grad.l2_norm();
        let stepped = match cfg.adam.clip_norm {
            Some(max) => clip_gradient(&global_grad, max),
            None => global_grad,
        };
        let lr = cfg.lr_schedule.map_or(cfg.adam.alpha, |s| s.lr_at(samples));
        let (new_state, new_w) = match cfg.adam.form {
            AdamForm::Theory => adam_step_theory(&state, &w, &stepped, &cfg.adam)?,
            AdamForm::AdamW => adamw_step(&state, &w, &stepped, &cfg.adam, lr)?,
        };
        state = new_state;
        w = new_w;

        samples += plan.global as u64;

        let val_loss = if step % cfg.val_interval as u64 == 0 || samples >= cfg.sample_budget {
            Some(evaluate(holdout, &w)?)
        } else {
            None
        };
        let full_grad_norm = if cfg.record_full_grad_norm {
            Some(objective.full_grad(&w)?.l2_norm())
        } else {
            None
        };

        records.push(StepRecord {
            step,
            samples,
            batch_size: plan.global,
            lr,
            train_loss,
            grad_norm,
            test_statistic,
            val_loss,
            full_grad_norm,
            recheck_statistic,
        });

        plan = next_plan;
        step += 1;
    }

    Ok(RunMetrics {
        total_steps: step - 1,
        total_samples: samples,
        records,
        elapsed_seconds: 0.0,
    })
}

/// Exact-variance norm test: closed-form expectation against the full
/// gradient, statistic compared to the current batch size.
fn exact_test(
    objective: &Objective,
    w: &ParamVector,
    plan: &BatchPlan,
    cfg: &NormTestConfig,
) -> Result<TestOutcome, CoreError> {
    let full = objective.full_grad(w)?;
    let grad_norm_sq = full.l2_norm_squared();
    if grad_norm_sq < cfg.grad_norm_floor {
        return Ok(TestOutcome {
            statistic: 0.0,
            variance_l1: 0.0,
            grad_norm_sq,
            passed: true,
            skipped: true,
            next_plan: *plan,
        });
    }
    // E||g_B - g||^2 at the current batch size, rescaled so the statistic is
    // directly comparable to b: T = b * E / (eta^2 ||g||^2).
    let expectation = crate::schedule::exact_variance_expectation(objective, w, plan.global)?;
    let statistic = plan.global as f64 * expectation / (cfg.eta * cfg.eta * grad_norm_sq);
    let passed = statistic <= plan.global as f64;
    let next_plan = if passed {
        *plan
    } else {
        round_batch_plan(
            statistic.ceil() as usize,
            plan.workers,
            plan.accumulation_steps,
            cfg.max_global_batch,
        )
    };
    Ok(TestOutcome {
        statistic,
        variance_l1: expectation * plan.global as f64,
        grad_norm_sq,
        passed,
        skipped: false,
        next_plan,
    })
}

/// Diagnostic re-evaluation of the statistic on a fresh batch of the new
/// size at the current iterate.
fn debug_recheck(
    cfg: &TrainConfig,
    objective: &Objective,
    w: &ParamVector,
    next_plan: &BatchPlan,
    rank: usize,
    group: &GroupHandle,
    batch_rng: &mut RngStream,
) -> Result<f64, WorkerError> {
    let n = objective.n_samples();
    let batch = sample_batch(batch_rng, n, next_plan.global.min(n))?;
    let grid = next_plan.workers * next_plan.accumulation_steps;
    if batch.size() % grid != 0 {
        return Ok(f64::NAN);
    }
    let assignments = split_batch(&batch, next_plan.workers, next_plan.accumulation_steps)?;
    let local = accumulate_minibatch_grad(objective, w, &assignments[rank])?;
    let global = group.all_reduce(&local, ReduceOp::Mean)?;
    let dev = local.sub(&global)?;
    let variance = group.all_reduce(&dev.mul(&dev)?, ReduceOp::Mean)?;
    let outcome = ddp_norm_test_reduced(
        variance.l1_norm(),
        global.l2_norm_squared(),
        next_plan,
        &cfg.norm_test,
    );
    Ok(outcome.statistic)
}
