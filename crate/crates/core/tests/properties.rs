//! Cross-module property checks: the verify suites at reduced sample
//! counts, their negative controls, and behaviors that only show up at the
//! harness level.

use fprnn_core::fixed_point::FixedPointConfig;
use fprnn_core::harness::{suites, ExperimentConfig, TaskConfig};
use fprnn_core::mixers::MixerVariant;
use fprnn_core::model::{ModelConfig, ModelKind, SequenceModel};
use fprnn_core::scan::ScanMode;
use fprnn_core::tasks::GroupKind;
use fprnn_core::train::{Schedule, TrainConfig};

#[test]
fn scan_suite_passes() {
    let r = suites::scan_equivalence_suite(11);
    assert!(r.passed, "{}", r.detail);
}

#[test]
fn oracle_suite_passes_at_reduced_count() {
    let r = suites::oracle_equivalence_suite(24, 1e-8, 1e-5, 17);
    assert!(r.passed, "{}", r.detail);
}

#[test]
fn oracle_equivalence_holds_down_to_tight_tolerances() {
    // Deviation stays proportional to the solver tolerance.
    for (tol, bound) in [(1e-4, 1e-2), (1e-6, 1e-4), (1e-8, 1e-5)] {
        let r = suites::oracle_equivalence_suite(10, tol, bound, 23);
        assert!(r.passed, "tol {tol}: {}", r.detail);
    }
}

#[test]
fn lipschitz_suite_passes() {
    let r = suites::lipschitz_suite(300, 1.0, 5);
    assert!(r.passed, "{}", r.detail);
}

#[test]
fn lipschitz_suite_fails_on_misscaled_mixer() {
    // Negative control: factors rescaled above the contraction threshold
    // must break the strict-contraction check.
    let r = suites::lipschitz_suite(300, 1.5, 5);
    assert!(!r.passed, "expansive mixer must fail the suite");
}

#[test]
fn gradient_suite_passes() {
    let r = suites::gradient_suite(3);
    assert!(r.passed, "{}", r.detail);
}

#[test]
fn descent_suite_is_unanimous_on_premise_instances() {
    let r = suites::descent_suite(40, 7).unwrap();
    assert!(r.passed, "{}", r.detail);
}

#[test]
fn descent_premise_is_necessary() {
    // With unequal x- and h-Jacobians a non-descent direction exists.
    let worst = suites::descent_counterexample().unwrap();
    assert!(worst < 0.0, "expected a negative alignment, got {worst}");
}

#[test]
fn effective_transition_suite_passes() {
    let r = suites::effective_transition_suite(100, 9);
    assert!(r.passed, "{}", r.detail);
}

fn z2_experiment(dir: &str) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskConfig::WordProblem {
            group: GroupKind::Cyclic,
            degree: 2,
            train_len: 6,
        },
        model: ModelConfig {
            kind: ModelKind::FpMamba,
            vocab: 2,
            d_model: 4,
            expansion: 2,
            d_state: 4,
            n_layers: 1,
            mixer_variant: MixerVariant::Householder,
            rank_r: 1,
            mixer_hidden_dependence: true,
            y_dep_bc: true,
            contraction_eps: 0.01,
            alpha_rescale: false,
            scan_mode: ScanMode::Parallel,
        },
        fp_train: FixedPointConfig::train_default(),
        fp_eval: FixedPointConfig {
            ell_max: 64,
            ..FixedPointConfig::eval_default()
        },
        train: TrainConfig {
            lr: 5e-3,
            schedule: Schedule::Constant,
            ..TrainConfig::default()
        },
        steps: 60,
        batch_size: 16,
        eval_batch: 32,
        eval_every: 30,
        checkpoint_every: 0,
        eval_lengths: vec![6],
        stop_at_accuracy: None,
        out_dir: dir.into(),
        seed: 3,
    }
}

#[test]
fn property_suite_end_to_end_on_fresh_checkout() {
    // The full verify surface, with a briefly trained miniature model for
    // the sequential-vs-parallel comparison.
    let dir = std::env::temp_dir().join(format!("fprnn-props-{}", std::process::id()));
    let cfg = z2_experiment(&dir.to_string_lossy());
    let results = suites::run_property_suite(&cfg, None).unwrap();
    for r in &results {
        assert!(r.passed, "{}: {}", r.name, r.detail);
    }
    assert!(results.len() >= 7);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gamma_sampled_iteration_cap_is_clamped_and_seeded() {
    use rand::SeedableRng;
    let cfg = FixedPointConfig {
        sample_ell_max: true,
        ell_max: 16,
        ..FixedPointConfig::train_default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<usize> = (0..200)
        .map(|_| cfg.resolve_ell_max(Some(&mut rng)))
        .collect();
    assert!(draws.iter().all(|&d| (1..=16).contains(&d)));
    // Gamma(4, 1) has mean 4.
    let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
    assert!((mean - 4.0).abs() < 0.8, "mean {mean}");
    // Replay identically.
    let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let again: Vec<usize> = (0..200)
        .map(|_| cfg.resolve_ell_max(Some(&mut rng2)))
        .collect();
    assert_eq!(draws, again);
}

#[test]
fn training_with_sampled_cap_and_damping_stays_deterministic() {
    let dir = std::env::temp_dir().join(format!("fprnn-gamma-{}", std::process::id()));
    let mut cfg = z2_experiment(&dir.to_string_lossy());
    cfg.fp_train.sample_ell_max = true;
    cfg.steps = 10;
    let a = fprnn_core::harness::run_train(&cfg).unwrap();
    std::fs::remove_dir_all(&dir).ok();
    let b = fprnn_core::harness::run_train(&cfg).unwrap();
    std::fs::remove_dir_all(&dir).ok();
    for (x, y) in a.records.iter().zip(b.records.iter()) {
        assert!(x.loss == y.loss || (x.loss.is_nan() && y.loss.is_nan()));
    }
}
