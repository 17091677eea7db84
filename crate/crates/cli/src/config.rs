//! Experiment configuration: one TOML file per experiment with a shared
//! problem/optimizer block and an explicit list of schedule variants.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use adabatch_core::{
    AdamConfig, AdamForm, DatasetParams, ExecMode, LrSchedule, NormTestConfig, ObjectiveKind,
    ObjectiveSpec, ParallelMode, ScheduleMode, TestKind, TrainConfig,
};

/// Fully validated experiment: the cross product of variants and seeds.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// (variant name, ready-to-run config); seed is filled in per run.
    pub variants: Vec<(String, TrainConfig)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    objective: RawObjective,
    training: RawTraining,
    #[serde(default)]
    optimizer: RawOptimizer,
    norm_test: RawNormTest,
    #[serde(rename = "variant")]
    variants: Vec<RawVariant>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObjective {
    kind: String,
    n: usize,
    d: usize,
    #[serde(default)]
    hidden: usize,
    #[serde(default = "default_noise")]
    noise: f64,
    #[serde(default = "default_label_flip")]
    label_flip: f64,
    #[serde(default = "default_teacher_hidden")]
    teacher_hidden: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_one")]
    workers: usize,
    #[serde(default = "default_one")]
    accumulation_steps: usize,
    initial_global_batch: usize,
    sample_budget: u64,
    #[serde(default)]
    max_steps: Option<u64>,
    #[serde(default = "default_val_interval")]
    val_interval: usize,
    #[serde(default = "default_holdout")]
    holdout_size: usize,
    #[serde(default = "default_parallel")]
    parallel: String,
    #[serde(default = "default_exec")]
    exec: String,
}

/// Optimizer defaults follow the usual decoupled-weight-decay recipe:
/// (β₁, β₂) = (0.9, 0.95), ε = 1e-8, λ = 0.1, clip at 1.0.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    #[serde(default = "default_form")]
    form: String,
    #[serde(default = "default_peak_lr")]
    alpha: f64,
    #[serde(default = "default_beta1")]
    beta1: f64,
    #[serde(default = "default_beta2")]
    beta2: f64,
    #[serde(default = "default_eps")]
    eps: f64,
    #[serde(default = "default_weight_decay")]
    weight_decay: f64,
    #[serde(default = "default_clip")]
    clip_norm: f64,
    #[serde(default = "default_v0")]
    v0: f64,
    #[serde(default)]
    schedule: Option<RawLrSchedule>,
}

impl Default for RawOptimizer {
    fn default() -> Self {
        toml::from_str("").expect("all optimizer fields have defaults")
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLrSchedule {
    #[serde(default = "default_peak_lr")]
    peak_lr: f64,
    #[serde(default = "default_min_lr")]
    min_lr: f64,
    #[serde(default = "default_warmup")]
    warmup_samples: u64,
    /// Defaults to the sample budget.
    #[serde(default)]
    total_samples: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNormTest {
    eta: f64,
    #[serde(default = "default_one_usize")]
    test_interval: usize,
    max_global_batch: usize,
    #[serde(default = "default_true")]
    finite_population_correction: bool,
    #[serde(default = "default_test_kind")]
    kind: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariant {
    name: String,
    mode: String,
    #[serde(default)]
    batch: Option<usize>,
    #[serde(default)]
    stages: Option<Vec<(f64, usize)>>,
}

fn default_noise() -> f64 {
    0.1
}
fn default_label_flip() -> f64 {
    0.05
}
fn default_teacher_hidden() -> usize {
    8
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_one() -> usize {
    1
}
fn default_one_usize() -> usize {
    1
}
fn default_val_interval() -> usize {
    10
}
fn default_holdout() -> usize {
    1000
}
fn default_parallel() -> String {
    "replicated".into()
}
fn default_exec() -> String {
    "threaded".into()
}
fn default_form() -> String {
    "adamw".into()
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}
fn default_v0() -> f64 {
    1.0
}
fn default_peak_lr() -> f64 {
    4e-4
}
fn default_min_lr() -> f64 {
    4e-5
}
fn default_warmup() -> u64 {
    20000
}
fn default_true() -> bool {
    true
}
fn default_test_kind() -> String {
    "ddp".into()
}

/// Command-line overrides applied after the file is parsed.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let raw: RawConfig = toml::from_str(&text)
        .with_context(|| format!("cannot parse config {}", path.display()))?;
    build_spec(raw, overrides)
}

fn build_spec(raw: RawConfig, overrides: &Overrides) -> Result<ExperimentSpec> {
    let kind = ObjectiveKind::parse(&raw.objective.kind)
        .with_context(|| format!("objective.kind = {:?}", raw.objective.kind))?;
    if kind == ObjectiveKind::MlpTanh && raw.objective.hidden == 0 {
        bail!("objective.hidden must be positive for kind = \"mlp_tanh\"");
    }
    let objective = ObjectiveSpec {
        kind,
        n: raw.objective.n,
        d: raw.objective.d,
        hidden: raw.objective.hidden,
        params: DatasetParams {
            noise: raw.objective.noise,
            label_flip: raw.objective.label_flip,
            teacher_hidden: raw.objective.teacher_hidden,
        },
    };

    let workers = overrides.workers.unwrap_or(raw.training.workers);
    let parallel_mode = match raw.training.parallel.as_str() {
        "replicated" => ParallelMode::Replicated,
        "sharded" => ParallelMode::Sharded,
        other => bail!("training.parallel must be \"replicated\" or \"sharded\", got {other:?}"),
    };
    let exec_mode = match raw.training.exec.as_str() {
        "threaded" => ExecMode::Threaded,
        "serialized" => ExecMode::Serialized,
        other => bail!("training.exec must be \"threaded\" or \"serialized\", got {other:?}"),
    };

    let form = match raw.optimizer.form.as_str() {
        "adamw" => AdamForm::AdamW,
        "theory" => AdamForm::Theory,
        other => bail!("optimizer.form must be \"adamw\" or \"theory\", got {other:?}"),
    };
    let clip_norm = if raw.optimizer.clip_norm > 0.0 {
        Some(raw.optimizer.clip_norm)
    } else {
        None
    };
    let adam = AdamConfig {
        alpha: raw.optimizer.alpha,
        beta1: raw.optimizer.beta1,
        beta2: raw.optimizer.beta2,
        eps: raw.optimizer.eps,
        weight_decay: raw.optimizer.weight_decay,
        clip_norm,
        form,
        v0: raw.optimizer.v0,
    };

    let lr_schedule = raw
        .optimizer
        .schedule
        .as_ref()
        .map(|s| {
            let sched = LrSchedule {
                peak: s.peak_lr,
                min: s.min_lr,
                warmup_samples: s.warmup_samples,
                total_samples: s.total_samples.unwrap_or(raw.training.sample_budget),
            };
            sched.validate().map(|()| sched)
        })
        .transpose()
        .context("optimizer.schedule")?;

    let norm_test = NormTestConfig {
        eta: raw.norm_test.eta,
        test_interval: raw.norm_test.test_interval,
        max_global_batch: raw.norm_test.max_global_batch,
        finite_population_correction: raw.norm_test.finite_population_correction,
        grad_norm_floor: 1e-12,
    };
    let test_kind = match raw.norm_test.kind.as_str() {
        "ddp" => TestKind::Ddp,
        "exact" => TestKind::ExactVariance,
        other => bail!("norm_test.kind must be \"ddp\" or \"exact\", got {other:?}"),
    };

    if raw.variants.is_empty() {
        bail!("config needs at least one [[variant]]");
    }
    let mut names: Vec<&str> = raw.variants.iter().map(|v| v.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != raw.variants.len() {
        bail!("variant names must be unique");
    }

    let mut variants = Vec::new();
    for v in &raw.variants {
        let schedule_mode = match v.mode.as_str() {
            "adaptive" => ScheduleMode::Adaptive,
            "constant" => {
                let b = v
                    .batch
                    .with_context(|| format!("variant {:?}: constant mode needs `batch`", v.name))?;
                ScheduleMode::Constant(b)
            }
            "stagewise" => {
                let stages = v.stages.clone().with_context(|| {
                    format!("variant {:?}: stagewise mode needs `stages`", v.name)
                })?;
                ScheduleMode::Stagewise(stages)
            }
            other => bail!(
                "variant {:?}: mode must be \"adaptive\", \"constant\", or \"stagewise\", got {other:?}",
                v.name
            ),
        };
        let cfg = TrainConfig {
            objective: objective.clone(),
            workers,
            accumulation_steps: raw.training.accumulation_steps,
            initial_global_batch: raw.training.initial_global_batch,
            norm_test: norm_test.clone(),
            test_kind,
            adam: adam.clone(),
            lr_schedule,
            sample_budget: raw.training.sample_budget,
            max_steps: raw.training.max_steps,
            schedule_mode,
            parallel_mode,
            exec_mode,
            seed: 0, // filled per run
            val_interval: raw.training.val_interval,
            holdout_size: raw.training.holdout_size,
            record_full_grad_norm: false,
            debug_recheck: false,
        };
        cfg.validate()
            .with_context(|| format!("variant {:?}", v.name))?;
        variants.push((v.name.clone(), cfg));
    }

    let seeds = match overrides.seed {
        Some(s) => vec![s],
        None => raw.training.seeds.clone(),
    };
    if seeds.is_empty() {
        bail!("training.seeds must be non-empty");
    }

    Ok(ExperimentSpec {
        name: raw.name,
        seeds,
        out_dir: overrides
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs")),
        variants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "demo"

[objective]
kind = "quadratic"
n = 256
d = 8

[training]
initial_global_batch = 16
sample_budget = 1600
workers = 2

[norm_test]
eta = 0.5
max_global_batch = 128

[[variant]]
name = "adaptive"
mode = "adaptive"
"#;

    fn parse_str(text: &str) -> Result<ExperimentSpec> {
        let raw: RawConfig = toml::from_str(text)?;
        build_spec(raw, &Overrides::default())
    }

    #[test]
    fn minimal_config_applies_defaults() {
        let spec = parse_str(MINIMAL).unwrap();
        let (_, cfg) = &spec.variants[0];
        assert_eq!(cfg.adam.beta1, 0.9);
        assert_eq!(cfg.adam.beta2, 0.95);
        assert_eq!(cfg.adam.eps, 1e-8);
        assert_eq!(cfg.adam.weight_decay, 0.1);
        assert_eq!(cfg.adam.clip_norm, Some(1.0));
        assert_eq!(spec.seeds, vec![0]);
        assert!(cfg.lr_schedule.is_none());
    }

    #[test]
    fn rejects_eta_out_of_range() {
        let text = MINIMAL.replace("eta = 0.5", "eta = 1.5");
        let err = parse_str(&text).unwrap_err();
        assert!(format!("{err:#}").contains("eta"), "{err:#}");
    }

    #[test]
    fn rejects_indivisible_initial_batch() {
        let text = MINIMAL.replace("initial_global_batch = 16", "initial_global_batch = 17");
        assert!(parse_str(&text).is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = format!("{MINIMAL}\nturbo = true\n");
        assert!(toml::from_str::<RawConfig>(&text).is_err());
    }

    #[test]
    fn rejects_duplicate_variant_names() {
        let text = format!("{MINIMAL}\n[[variant]]\nname = \"adaptive\"\nmode = \"adaptive\"\n");
        assert!(parse_str(&text).is_err());
    }

    #[test]
    fn schedule_total_defaults_to_budget() {
        let text = format!("{MINIMAL}\n[optimizer.schedule]\nwarmup_samples = 100\n");
        let spec = parse_str(&text).unwrap();
        let sched = spec.variants[0].1.lr_schedule.unwrap();
        assert_eq!(sched.total_samples, 1600);
        assert_eq!(sched.peak, 4e-4);
        assert_eq!(sched.min, 4e-5);
    }

    #[test]
    fn override_seed_and_workers() {
        let raw: RawConfig = toml::from_str(MINIMAL).unwrap();
        let spec = build_spec(
            raw,
            &Overrides { out_dir: None, seed: Some(7), workers: Some(4) },
        )
        .unwrap();
        assert_eq!(spec.seeds, vec![7]);
        assert_eq!(spec.variants[0].1.workers, 4);
    }
}
