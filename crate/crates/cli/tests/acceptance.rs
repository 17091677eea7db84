//! End-to-end acceptance suite. Each test prints one `PASS` line so the
//! whole gate can be read off `cargo test --test acceptance -- --nocapture`.

use std::path::Path;

use adabatch_cli::config::{parse_config, Overrides};
use adabatch_cli::experiment::run_experiment;
use adabatch_core::{
    ddp_variance_estimator, exact_variance_expectation, make_dataset, per_sample_variance_l1,
    round_batch_plan, run_training, theorem_condition, AdamConfig, DatasetParams,
    ExecMode, GradReport, NormTestConfig, Objective, ObjectiveKind, ObjectiveSpec, ParallelMode,
    ParamVector, RngStream, RunMetrics, ScheduleMode, TestKind, TrainConfig,
};

fn random_vector(rng: &mut RngStream, dim: usize) -> ParamVector {
    ParamVector::new((0..dim).map(|_| rng.standard_normal()).collect())
}

/// Visits every size-`b` subset of `0..n` in lexicographic order.
fn for_each_combination(n: usize, b: usize, mut visit: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..b).collect();
    loop {
        visit(&idx);
        // Advance the rightmost index that can still move.
        let mut i = b;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - b {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..b {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[test]
fn criterion_01_exact_variance_matches_brute_force() {
    let start = std::time::Instant::now();
    for kind in [ObjectiveKind::Quadratic, ObjectiveKind::Logistic] {
        for n in [6usize, 9, 12] {
            let ds = make_dataset(kind, n, 3, 42, &DatasetParams::default()).unwrap();
            let obj = Objective::new(ds, 0);
            let mut rng = RngStream::new(7, 0);
            for _ in 0..5 {
                let w = random_vector(&mut rng, obj.param_dim()).scale(0.5);
                let grads: Vec<ParamVector> =
                    (0..n).map(|i| obj.per_sample_grad(&w, i).unwrap()).collect();
                let full = obj.full_grad(&w).unwrap();
                for b in 2..n {
                    let mut total = 0.0;
                    let mut count = 0u64;
                    for_each_combination(n, b, |batch| {
                        let mut mean = ParamVector::zeros(obj.param_dim());
                        for &i in batch {
                            mean.axpy(1.0 / b as f64, &grads[i]).unwrap();
                        }
                        total += mean.sub(&full).unwrap().l2_norm_squared();
                        count += 1;
                    });
                    let brute = total / count as f64;
                    let closed = exact_variance_expectation(&obj, &w, b).unwrap();
                    let rel = (closed - brute).abs() / brute.abs().max(1e-300);
                    assert!(rel <= 1e-12, "{kind:?} n={n} b={b}: rel {rel:e}");
                }
            }
        }
    }
    assert!(start.elapsed().as_secs() < 10, "took {:?}", start.elapsed());
    println!("PASS 01 exact-variance expectation matches brute-force enumeration");
}

#[test]
fn criterion_02_estimator_bridge() {
    let mut rng = RngStream::new(11, 0);
    for trial in 0..100 {
        let b = 2 + (trial % 19);
        let dim = 1 + (trial % 7) * 3;
        let grads: Vec<ParamVector> = (0..b).map(|_| random_vector(&mut rng, dim)).collect();
        let mut mean = ParamVector::zeros(dim);
        for g in &grads {
            mean.axpy(1.0 / b as f64, g).unwrap();
        }
        let reports: Vec<GradReport> = grads
            .iter()
            .enumerate()
            .map(|(j, g)| GradReport { gradient: g.clone(), sample_count: 1, worker_rank: j })
            .collect();
        let est = ddp_variance_estimator(&reports, &mean).unwrap().l1_norm();
        let per_sample = per_sample_variance_l1(&grads).unwrap();
        let expected = (b as f64 - 1.0) / b as f64 * per_sample;
        let rel = (est - expected).abs() / expected.abs().max(1e-300);
        assert!(rel <= 1e-14, "trial {trial}: rel {rel:e}");
    }
    println!("PASS 02 worker-variance estimator bridges to per-sample variance");
}

#[test]
fn criterion_03_rounding_cascade() {
    // Worked example: 1000 across 4 workers x 16 accumulation steps.
    let p = round_batch_plan(1000, 4, 16, 8192);
    assert_eq!((p.microbatch, p.minibatch, p.global), (16, 256, 1024));

    let mut rng = RngStream::new(13, 0);
    for _ in 0..1000 {
        let j = 1 + (rng.uniform() * 8.0) as usize;
        let m = 1 + (rng.uniform() * 8.0) as usize;
        let grid = j * m;
        let cap = grid * (1 + (rng.uniform() * 64.0) as usize);
        let raw = 1 + (rng.uniform() * 4096.0) as usize;
        let p = round_batch_plan(raw, j, m, cap);
        let capped = raw.min(cap);
        assert_eq!(p.microbatch, capped.div_ceil(grid));
        assert_eq!(p.minibatch, m * p.microbatch);
        assert_eq!(p.global, grid * p.microbatch);
        assert!(p.global >= capped);
        assert!(p.global <= cap.max(grid));
    }
    println!("PASS 03 batch rounding cascade holds on 1000 random tuples");
}

fn parity_config(mode: ParallelMode) -> TrainConfig {
    TrainConfig {
        objective: ObjectiveSpec {
            kind: ObjectiveKind::Quadratic,
            n: 4096,
            d: 32,
            hidden: 0,
            params: DatasetParams::default(),
        },
        workers: 4,
        accumulation_steps: 1,
        initial_global_batch: 16,
        norm_test: NormTestConfig::new(0.5, 5, 1024).unwrap(),
        test_kind: TestKind::Ddp,
        adam: AdamConfig::adamw(1e-3, 0.9, 0.95, 1e-8, 0.1),
        lr_schedule: None,
        sample_budget: u64::MAX / 2,
        max_steps: Some(200),
        schedule_mode: ScheduleMode::Adaptive,
        parallel_mode: mode,
        exec_mode: ExecMode::Threaded,
        seed: 3,
        val_interval: 50,
        holdout_size: 64,
        record_full_grad_norm: false,
        debug_recheck: false,
    }
}

#[test]
fn criterion_04_replicated_sharded_equivalence() {
    let start = std::time::Instant::now();
    let a = run_training(&parity_config(ParallelMode::Replicated)).unwrap();
    let b = run_training(&parity_config(ParallelMode::Sharded)).unwrap();
    assert_eq!(a.records.len(), 200);
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.batch_size, y.batch_size, "step {}", x.step);
        assert!((x.train_loss - y.train_loss).abs() <= 1e-10, "step {}", x.step);
    }
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
    println!("PASS 04 replicated and sharded runs produce equal traces");
}

#[test]
fn criterion_05_gradients_match_central_differences() {
    for kind in [ObjectiveKind::Quadratic, ObjectiveKind::Logistic, ObjectiveKind::MlpTanh] {
        let hidden = if kind == ObjectiveKind::MlpTanh { 6 } else { 0 };
        let ds = make_dataset(kind, 32, 5, 21, &DatasetParams::default()).unwrap();
        let obj = Objective::new(ds, hidden);
        let mut rng = RngStream::new(5, 0);
        for probe in 0..20 {
            let w = random_vector(&mut rng, obj.param_dim()).scale(0.4);
            let i = (rng.uniform() * 32.0) as usize;
            let analytic = obj.per_sample_grad(&w, i).unwrap();
            let numeric = obj.finite_diff_per_sample_grad(&w, i, 1e-6).unwrap();
            let rel =
                analytic.sub(&numeric).unwrap().l2_norm() / analytic.l2_norm().max(1e-8);
            assert!(rel <= 1e-5, "{kind:?} probe {probe}: rel {rel:e}");
        }
    }
    println!("PASS 05 analytic per-sample gradients match central differences");
}

fn assert_monotone_capped(m: &RunMetrics, cap: usize) {
    let mut prev = 0;
    for r in &m.records {
        assert!(r.batch_size >= prev, "step {}: {} < {prev}", r.step, r.batch_size);
        assert!(r.batch_size <= cap, "step {}: {} > {cap}", r.step, r.batch_size);
        prev = r.batch_size;
    }
}

#[test]
fn criterion_06_monotone_capped_schedule() {
    let mut cfg = parity_config(ParallelMode::Replicated);
    cfg.objective.kind = ObjectiveKind::Logistic;
    cfg.objective.n = 2048;
    cfg.objective.d = 8;
    cfg.objective.params.label_flip = 0.15;
    cfg.norm_test = NormTestConfig::new(1e-4, 1, 512).unwrap();
    cfg.max_steps = Some(40);
    let m = run_training(&cfg).unwrap();
    assert_monotone_capped(&m, 512);
    let cap_step = m
        .records
        .iter()
        .position(|r| r.batch_size == 512)
        .expect("cap never reached");
    // test_interval = 1, so the first 10 tests happen in the first 10 steps.
    assert!(cap_step < 10, "cap reached only at step {}", cap_step + 1);

    // A moderate-eta run must also stay monotone under the cap.
    let mut cfg = parity_config(ParallelMode::Replicated);
    cfg.norm_test = NormTestConfig::new(0.4, 2, 256).unwrap();
    cfg.max_steps = Some(150);
    let m = run_training(&cfg).unwrap();
    assert_monotone_capped(&m, 256);
    println!("PASS 06 adaptive schedules are monotone, capped, and saturate under tiny eta");
}

fn gap_config(schedule_mode: ScheduleMode, seed: u64) -> TrainConfig {
    TrainConfig {
        objective: ObjectiveSpec {
            kind: ObjectiveKind::MlpTanh,
            n: 20_000,
            d: 8,
            hidden: 8,
            params: DatasetParams { noise: 0.2, label_flip: 0.05, teacher_hidden: 8 },
        },
        workers: 4,
        accumulation_steps: 1,
        initial_global_batch: 16,
        norm_test: NormTestConfig::new(0.35, 5, 1024).unwrap(),
        test_kind: TestKind::Ddp,
        adam: AdamConfig::adamw(2e-3, 0.9, 0.95, 1e-8, 0.1),
        lr_schedule: Some(adabatch_core::LrSchedule {
            peak: 2e-3,
            min: 2e-4,
            warmup_samples: 20_000,
            total_samples: 200_000,
        }),
        sample_budget: 200_000,
        max_steps: None,
        schedule_mode,
        parallel_mode: ParallelMode::Replicated,
        exec_mode: ExecMode::Threaded,
        seed,
        val_interval: 100,
        holdout_size: 2000,
        record_full_grad_norm: false,
        debug_recheck: false,
    }
}

fn final_val_loss(m: &RunMetrics) -> f64 {
    m.records
        .iter()
        .rev()
        .find_map(|r| r.val_loss)
        .expect("run recorded no validation loss")
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    xs[xs.len() / 2]
}

#[test]
fn criterion_07_generalization_gap_ordering() {
    let start = std::time::Instant::now();
    let seeds = [0u64, 1, 2];
    let mut small = Vec::new();
    let mut adaptive = Vec::new();
    let mut large = Vec::new();
    let mut adaptive_steps = Vec::new();
    let mut small_steps = Vec::new();
    for &seed in &seeds {
        let m = run_training(&gap_config(ScheduleMode::Constant(16), seed)).unwrap();
        small.push(final_val_loss(&m));
        small_steps.push(m.total_steps);

        let m = run_training(&gap_config(ScheduleMode::Adaptive, seed)).unwrap();
        assert_monotone_capped(&m, 1024);
        adaptive.push(final_val_loss(&m));
        adaptive_steps.push(m.total_steps);

        let m = run_training(&gap_config(ScheduleMode::Constant(1024), seed)).unwrap();
        large.push(final_val_loss(&m));
    }
    let (v16, vad, v1024) = (median(small), median(adaptive), median(large));
    assert!(
        v16 < vad && vad < v1024,
        "ordering violated: b=16 {v16} vs adaptive {vad} vs b=1024 {v1024}"
    );
    for (a, s) in adaptive_steps.iter().zip(&small_steps) {
        assert!(a < s, "adaptive used {a} steps vs {s} for b=16");
    }
    assert!(start.elapsed().as_secs() < 600, "took {:?}", start.elapsed());
    println!(
        "PASS 07 generalization-gap ordering: b=16 {v16:.5} < adaptive {vad:.5} < b=1024 {v1024:.5}"
    );
}

#[test]
fn criterion_08_theorem_admissibility_threshold() {
    let (ok_half, threshold) = theorem_condition(0.5, 0.95, 0.1);
    assert!((threshold - 0.52704).abs() <= 1e-4, "threshold {threshold}");
    assert!(ok_half);
    let (ok_nine, _) = theorem_condition(0.9, 0.95, 0.1);
    assert!(!ok_nine);
    println!("PASS 08 admissibility threshold {threshold:.5}: beta1 0.5 in, 0.9 out");
}

#[test]
fn criterion_09_convergence_proxy() {
    let start = std::time::Instant::now();
    for seed in 0..5u64 {
        let cfg = TrainConfig {
            objective: ObjectiveSpec {
                kind: ObjectiveKind::MlpTanh,
                n: 512,
                d: 4,
                hidden: 4,
                params: DatasetParams { noise: 0.1, label_flip: 0.05, teacher_hidden: 4 },
            },
            workers: 1,
            accumulation_steps: 1,
            initial_global_batch: 8,
            norm_test: NormTestConfig::new(0.1, 10, 512).unwrap(),
            test_kind: TestKind::ExactVariance,
            adam: AdamConfig::theory(0.003, 0.5, 0.95, 1.0),
            lr_schedule: None,
            sample_budget: u64::MAX / 2,
            max_steps: Some(2000),
            schedule_mode: ScheduleMode::Adaptive,
            parallel_mode: ParallelMode::Replicated,
            exec_mode: ExecMode::Threaded,
            seed,
            val_interval: 1000,
            holdout_size: 64,
            record_full_grad_norm: true,
            debug_recheck: false,
        };
        let m = run_training(&cfg).unwrap();
        assert_eq!(m.records.len(), 2000);
        assert_monotone_capped(&m, 512);
        let norms: Vec<f64> =
            m.records.iter().map(|r| r.full_grad_norm.unwrap()).collect();
        let half = norms.len() / 2;
        let first: f64 = norms[..half].iter().sum::<f64>() / half as f64;
        let second: f64 = norms[half..].iter().sum::<f64>() / (norms.len() - half) as f64;
        assert!(second < first, "seed {seed}: second half {second} >= first half {first}");
    }
    assert!(start.elapsed().as_secs() < 300, "took {:?}", start.elapsed());
    println!("PASS 09 gradient norms shrink over adaptive admissible-Adam runs");
}

#[test]
fn criterion_10_byte_identical_metrics() {
    let dir = std::env::temp_dir().join("adabatch-acceptance-determinism");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let config_path = dir.join("experiment.toml");
    std::fs::write(
        &config_path,
        r#"
name = "determinism-check"

[objective]
kind = "logistic"
n = 1024
d = 6

[training]
seeds = [0, 1]
workers = 2
initial_global_batch = 8
sample_budget = 4000
val_interval = 5

[norm_test]
eta = 0.4
test_interval = 2
max_global_batch = 128

[[variant]]
name = "adaptive"
mode = "adaptive"

[[variant]]
name = "const32"
mode = "constant"
batch = 32
"#,
    )
    .unwrap();

    let run = |out: &Path| {
        let overrides = Overrides {
            out_dir: Some(out.to_path_buf()),
            seed: None,
            workers: None,
        };
        let spec = parse_config(&config_path, &overrides).unwrap();
        run_experiment(&spec).unwrap()
    };
    let first = run(&dir.join("a"));
    run(&dir.join("b"));

    assert_eq!(first.len(), 4);
    for completed in &first {
        let name = completed.metrics_path.file_name().unwrap();
        let a = std::fs::read(dir.join("a").join(name)).unwrap();
        let b = std::fs::read(dir.join("b").join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "metrics differ for {name:?}");
    }
    println!("PASS 10 repeated invocations write byte-identical metrics files");
}
