//! Norm-test variants and batch-size update logic.
//!
//! Two families of tests live here. The per-sample variants
//! ([`approx_norm_test`], [`exact_variance_expectation`], [`esg_check`]) are
//! oracle and verification paths that need every per-sample gradient. The
//! distributed loop instead uses [`ddp_norm_test`], which estimates the
//! gradient variance from per-worker minibatch gradients.

use crate::collectives::GradReport;
use crate::error::CoreError;
use crate::objectives::Objective;
use crate::vector::{coordinatewise_variance, ParamVector, VarianceDivisor};

/// Configuration of the adaptive schedule.
#[derive(Debug, Clone)]
pub struct NormTestConfig {
    /// Gradient-approximation tolerance, strictly inside (0, 1).
    pub eta: f64,
    /// Optimizer steps between tests.
    pub test_interval: usize,
    /// Batch-size cap; the test is no longer performed once reached.
    pub max_global_batch: usize,
    /// Apply the (n-b)/(n-1) finite-population factor in the approximate test.
    pub finite_population_correction: bool,
    /// Skip the test when the squared batch-gradient norm falls below this.
    pub grad_norm_floor: f64,
}

impl NormTestConfig {
    pub fn new(eta: f64, test_interval: usize, max_global_batch: usize) -> Result<Self, CoreError> {
        let cfg = Self {
            eta,
            test_interval,
            max_global_batch,
            finite_population_correction: false,
            grad_norm_floor: 1e-12,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(CoreError::invalid(format!(
                "eta must lie strictly in (0, 1), got {}",
                self.eta
            )));
        }
        if self.test_interval == 0 {
            return Err(CoreError::invalid("test_interval must be positive"));
        }
        if self.max_global_batch == 0 {
            return Err(CoreError::invalid("max_global_batch must be positive"));
        }
        if self.grad_norm_floor < 0.0 {
            return Err(CoreError::invalid("grad_norm_floor must be nonnegative"));
        }
        Ok(())
    }
}

/// The (global, minibatch, microbatch) size triple with worker count and
/// gradient-accumulation steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub global: usize,
    pub minibatch: usize,
    pub microbatch: usize,
    pub workers: usize,
    pub accumulation_steps: usize,
}

impl BatchPlan {
    /// Builds the initial plan; the global size must be divisible by J*M.
    pub fn initial(global: usize, workers: usize, accumulation_steps: usize) -> Result<Self, CoreError> {
        let grid = workers * accumulation_steps;
        if workers == 0 || accumulation_steps == 0 || global == 0 {
            return Err(CoreError::invalid("batch plan fields must be positive"));
        }
        if global % grid != 0 {
            return Err(CoreError::invalid(format!(
                "initial global batch {global} is not divisible by J*M = {grid}"
            )));
        }
        let microbatch = global / grid;
        Ok(Self {
            global,
            minibatch: accumulation_steps * microbatch,
            microbatch,
            workers,
            accumulation_steps,
        })
    }
}

/// Result of one norm test.
#[derive(Debug, Clone)]
pub struct TestOutcome {
    /// T_k = ||Var||_1 / (eta^2 ||g||^2); zero when the test was skipped.
    pub statistic: f64,
    pub variance_l1: f64,
    pub grad_norm_sq: f64,
    pub passed: bool,
    /// True when the gradient norm fell below the floor and the test was
    /// skipped with the plan unchanged.
    pub skipped: bool,
    pub next_plan: BatchPlan,
}

/// L1 norm of the unbiased per-sample gradient variance.
pub fn per_sample_variance_l1(per_sample_grads: &[ParamVector]) -> Result<f64, CoreError> {
    if per_sample_grads.len() < 2 {
        return Err(CoreError::EmptyCollection { context: "per_sample_variance_l1" });
    }
    Ok(coordinatewise_variance(per_sample_grads, VarianceDivisor::CountMinusOne)?.l1_norm())
}

/// Outcome fragment of the approximate (per-sample) norm test.
#[derive(Debug, Clone, Copy)]
pub struct ApproxTestResult {
    pub statistic: f64,
    pub passed: bool,
    pub skipped: bool,
    /// Raw next batch size, ceil(statistic), when the test failed.
    pub raw_next: Option<usize>,
}

/// Approximate norm test from per-sample gradients: passes iff
/// `correction * ||Var||_1 / b <= eta^2 ||g||^2` where the correction is
/// `(n-b)/(n-1)` when enabled. The statistic `correction * ||Var||_1 /
/// (eta^2 ||g||^2)` is compared against `b`, and a failed test proposes
/// `ceil(statistic)` as the next batch size.
pub fn approx_norm_test(
    per_sample_grads: &[ParamVector],
    eta: f64,
    population: usize,
    use_correction: bool,
    grad_norm_floor: f64,
) -> Result<ApproxTestResult, CoreError> {
    let b = per_sample_grads.len();
    if b < 2 {
        return Err(CoreError::EmptyCollection { context: "approx_norm_test" });
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(CoreError::invalid(format!("eta must lie in (0, 1), got {eta}")));
    }
    let mean = crate::vector::mean_vector(per_sample_grads)?;
    let grad_norm_sq = mean.l2_norm_squared();
    if grad_norm_sq < grad_norm_floor {
        return Ok(ApproxTestResult { statistic: 0.0, passed: true, skipped: true, raw_next: None });
    }
    let correction = if use_correction {
        (population - b) as f64 / (population - 1) as f64
    } else {
        1.0
    };
    let var_l1 = per_sample_variance_l1(per_sample_grads)?;
    let statistic = correction * var_l1 / (eta * eta * grad_norm_sq);
    let passed = statistic <= b as f64;
    let raw_next = if passed { None } else { Some(statistic.ceil() as usize) };
    Ok(ApproxTestResult { statistic, passed, skipped: false, raw_next })
}

/// Worker-gradient variance estimator: coordinate-wise
/// `(1/J) sum_j (g_j - g)^2` over the J minibatch gradients.
pub fn ddp_variance_estimator(
    worker_grads: &[GradReport],
    global_grad: &ParamVector,
) -> Result<ParamVector, CoreError> {
    if worker_grads.len() < 2 {
        return Err(CoreError::invalid("worker-variance estimator needs J >= 2"));
    }
    let b0 = worker_grads[0].sample_count;
    if worker_grads.iter().any(|r| r.sample_count != b0) {
        return Err(CoreError::invalid("minibatch sizes must be equal across workers"));
    }
    let mut acc = ParamVector::zeros(global_grad.dim());
    for report in worker_grads {
        let dev = report.gradient.sub(global_grad)?;
        acc.axpy(1.0, &dev.mul(&dev)?)?;
    }
    Ok(acc.scale(1.0 / worker_grads.len() as f64))
}

/// The data-parallel norm test on an already-reduced variance estimate.
///
/// Every rank holds the identical `variance_l1` and `grad_norm_sq` after the
/// extra all-reduce, so every rank derives the same next plan with no
/// further messaging.
pub fn ddp_norm_test_reduced(
    variance_l1: f64,
    grad_norm_sq: f64,
    plan: &BatchPlan,
    cfg: &NormTestConfig,
) -> TestOutcome {
    if grad_norm_sq < cfg.grad_norm_floor {
        return TestOutcome {
            statistic: 0.0,
            variance_l1,
            grad_norm_sq,
            passed: true,
            skipped: true,
            next_plan: *plan,
        };
    }
    let statistic = variance_l1 / (cfg.eta * cfg.eta * grad_norm_sq);
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
    TestOutcome { statistic, variance_l1, grad_norm_sq, passed, skipped: false, next_plan }
}

/// The data-parallel norm test from explicit worker gradient reports.
pub fn ddp_norm_test(
    worker_grads: &[GradReport],
    global_grad: &ParamVector,
    plan: &BatchPlan,
    cfg: &NormTestConfig,
) -> Result<TestOutcome, CoreError> {
    let variance = ddp_variance_estimator(worker_grads, global_grad)?;
    Ok(ddp_norm_test_reduced(
        variance.l1_norm(),
        global_grad.l2_norm_squared(),
        plan,
        cfg,
    ))
}

/// Rounds a proposed global batch size up to the J*M grid: cap first, then
/// take the microbatch ceiling and rebuild minibatch and global sizes.
/// `max_global` must itself be a J*M multiple so the cap survives rounding.
pub fn round_batch_plan(raw_next: usize, workers: usize, accumulation_steps: usize, max_global: usize) -> BatchPlan {
    let grid = workers * accumulation_steps;
    let capped = raw_next.min(max_global).max(1);
    let microbatch = capped.div_ceil(grid);
    let minibatch = accumulation_steps * microbatch;
    BatchPlan {
        global: workers * minibatch,
        minibatch,
        microbatch,
        workers,
        accumulation_steps,
    }
}

/// Closed-form expected squared deviation of the size-`b` batch gradient
/// from the full gradient under uniform sampling without replacement:
/// `(1/b) * (n-b)/(n-1) * (1/n) sum_i ||grad_i - full||^2`.
pub fn exact_variance_expectation(
    obj: &Objective,
    w: &ParamVector,
    b: usize,
) -> Result<f64, CoreError> {
    let n = obj.n_samples();
    if b < 1 || b > n {
        return Err(CoreError::invalid(format!("batch size {b} not in 1..={n}")));
    }
    let full = obj.full_grad(w)?;
    let mut pop_var = 0.0;
    for i in 0..n {
        pop_var += obj.per_sample_grad(w, i)?.sub(&full)?.l2_norm_squared();
    }
    pop_var /= n as f64;
    let correction = (n - b) as f64 / (n - 1) as f64;
    Ok(pop_var * correction / b as f64)
}

/// One coordinate's expected-strong-growth verdict.
#[derive(Debug, Clone, Copy)]
pub struct EsgCoordinate {
    /// Closed-form second moment of the batch-gradient coordinate.
    pub second_moment: f64,
    /// Bound `(1+eta^2) * (full gradient coordinate)^2`.
    pub bound: f64,
    pub satisfied: bool,
    /// Zero full-gradient coordinate with positive variance: unsatisfiable
    /// at any batch size below n.
    pub degenerate: bool,
}

impl EsgCoordinate {
    pub fn margin(&self) -> f64 {
        self.bound - self.second_moment
    }
}

/// Coordinate-wise expected strong growth check:
/// `E[(batch grad coord)^2] <= (1+eta^2) (full grad coord)^2` with the
/// closed-form second moment under sampling without replacement.
pub fn esg_check(
    obj: &Objective,
    w: &ParamVector,
    b: usize,
    eta: f64,
) -> Result<Vec<EsgCoordinate>, CoreError> {
    let n = obj.n_samples();
    if b < 1 || b > n {
        return Err(CoreError::invalid(format!("batch size {b} not in 1..={n}")));
    }
    let full = obj.full_grad(w)?;
    let d = full.dim();
    let mut pop_var = vec![0.0; d];
    for i in 0..n {
        let g = obj.per_sample_grad(w, i)?;
        for (acc, (&gi, &fi)) in pop_var.iter_mut().zip(g.as_slice().iter().zip(full.as_slice())) {
            let dev = gi - fi;
            *acc += dev * dev;
        }
    }
    let correction = (n - b) as f64 / (n - 1) as f64;
    let scale = correction / (b as f64 * n as f64);
    Ok((0..d)
        .map(|i| {
            let mean_sq = full[i] * full[i];
            let variance_term = scale * pop_var[i];
            let second_moment = mean_sq + variance_term;
            let bound = (1.0 + eta * eta) * mean_sq;
            EsgCoordinate {
                second_moment,
                bound,
                satisfied: second_moment <= bound,
                degenerate: mean_sq == 0.0 && variance_term > 0.0,
            }
        })
        .collect())
}
