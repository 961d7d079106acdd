//! Release gate: every acceptance criterion at its pinned tolerance.
//!
//! Runs as a single test so the criteria execute in a controlled order and
//! the memory-contract measurement is not polluted by concurrent tests.
//! One pass/fail line per criterion is printed (visible with
//! `cargo test --test acceptance -- --nocapture`, or on failure).

use std::alloc::{GlobalAlloc, Layout, System};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use fprnn_core::fixed_point::FixedPointConfig;
use fprnn_core::harness::{self, suites, ExperimentConfig};
use fprnn_core::model::{percentile, SequenceModel, VisitArrays};
use fprnn_core::train::TrainConfig;

// ---------------------------------------------------------------------------
// Counting allocator (memory contract).
// ---------------------------------------------------------------------------

struct CountingAlloc;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let cur = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(cur, Ordering::Relaxed);
        }
        p
    }
    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

fn peak_above(baseline: usize) -> usize {
    PEAK.load(Ordering::Relaxed).saturating_sub(baseline)
}

// ---------------------------------------------------------------------------

fn tmp_dir(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("fprnn-acceptance-{tag}-{}", std::process::id()))
}

fn s3_config(seed: u64, out: &str) -> ExperimentConfig {
    let mut cfg: ExperimentConfig =
        serde_json::from_str(include_str!("../../../configs/s3-fpmamba-kronecker.json"))
            .expect("shipped config parses");
    cfg.seed = seed;
    cfg.train.seed = seed;
    cfg.out_dir = tmp_dir(out).to_string_lossy().to_string();
    cfg
}

fn s3_baseline_config(seed: u64, out: &str) -> ExperimentConfig {
    let mut cfg: ExperimentConfig =
        serde_json::from_str(include_str!("../../../configs/s3-diagonal-baseline.json"))
            .expect("shipped config parses");
    cfg.seed = seed;
    cfg.train.seed = seed;
    cfg.out_dir = tmp_dir(out).to_string_lossy().to_string();
    cfg
}

fn copy_config(which: &str, out: &str) -> ExperimentConfig {
    let text = match which {
        "full" => include_str!("../../../configs/copy-full-dependence.json"),
        "bc" => include_str!("../../../configs/copy-bc-only.json"),
        _ => include_str!("../../../configs/copy-no-dependence.json"),
    };
    let mut cfg: ExperimentConfig = serde_json::from_str(text).expect("shipped config parses");
    cfg.out_dir = tmp_dir(out).to_string_lossy().to_string();
    cfg
}

fn eval_accuracy_at(
    model: &SequenceModel,
    cfg: &ExperimentConfig,
    len: usize,
) -> (f64, Vec<usize>) {
    let cfgn = cfg.normalized().expect("valid config");
    let recs = harness::eval_length_generalization(model, &cfgn, &[len]).expect("eval runs");
    // ell-star statistics come from a direct batch evaluation
    let seed = harness::splitmix64(cfgn.seed ^ 0xacce97);
    let batch = cfgn
        .task
        .eval_batch_at(len, cfgn.eval_batch, seed)
        .expect("task gen");
    let out = model.evaluate_batch(&batch, &cfgn.fp_eval).expect("eval");
    (recs[0].accuracy, out.ell_stars)
}

struct TrainedPair {
    cfg: ExperimentConfig,
    model: SequenceModel,
    in_dist: f64,
    len16: f64,
    baseline_len16: f64,
}

fn train_state_tracking_seed(seed: u64) -> TrainedPair {
    let cfg = s3_config(seed, &format!("s3-{seed}"));
    let summary = harness::run_train(&cfg).expect("training runs");
    let cfgn = cfg.normalized().unwrap();
    let model = harness::load_model(&cfgn, &summary.checkpoint).expect("checkpoint loads");
    let (in_dist, _) = eval_accuracy_at(&model, &cfg, 8);
    let (len16, _) = eval_accuracy_at(&model, &cfg, 16);

    let bcfg = s3_baseline_config(seed, &format!("s3-base-{seed}"));
    let bsummary = harness::run_train(&bcfg).expect("baseline trains");
    let bcfgn = bcfg.normalized().unwrap();
    let bmodel = harness::load_model(&bcfgn, &bsummary.checkpoint).expect("baseline loads");
    let (baseline_len16, _) = eval_accuracy_at(&bmodel, &bcfg, 16);

    std::fs::remove_dir_all(&bcfg.out_dir).ok();
    TrainedPair {
        cfg,
        model,
        in_dist,
        len16,
        baseline_len16,
    }
}

#[test]
fn acceptance_criteria() {
    fn run_criterion<F: FnOnce() -> Result<String, String>>(
        outcomes: &mut Vec<(usize, &'static str, Result<String, String>)>,
        id: usize,
        name: &'static str,
        f: F,
    ) {
        let res = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        outcomes.push((id, name, res));
    }
    let mut outcomes: Vec<(usize, &'static str, Result<String, String>)> = Vec::new();

    // 1. Oracle equivalence at tol 1e-8 over 100 input-independent
    //    instances, both mixer families, gated and ungated.
    run_criterion(&mut outcomes, 1, "oracle equivalence", || {
        let r = suites::oracle_equivalence_suite(100, 1e-8, 1e-5, 0xC1);
        if r.passed { Ok(r.detail) } else { Err(r.detail) }
    });

    // 2. Strict contraction over 1000 state pairs per configuration plus
    //    the geometric residual-decay bound on every trace.
    run_criterion(&mut outcomes, 2, "contraction and geometric decay", || {
        let r = suites::lipschitz_suite(1000, 1.0, 0xC2);
        if r.passed { Ok(r.detail) } else { Err(r.detail) }
    });

    // 3. Gradient checks: primitives, implicit-vs-solve, and the truncated
    //    composite through the full model pipeline.
    run_criterion(&mut outcomes, 3, "gradient checks", || {
        let r = suites::gradient_suite(0xC3);
        if !r.passed {
            return Err(r.detail);
        }
        composite_gradient_probe()?;
        Ok(format!("{}; composite pipeline probes within 1e-5", r.detail))
    });

    // 4. Descent direction on 100 premise-satisfying instances.
    run_criterion(&mut outcomes, 4, "descent direction", || {
        let r = suites::descent_suite(100, 0xC4).map_err(|e| e.to_string())?;
        if r.passed { Ok(r.detail) } else { Err(r.detail) }
    });

    // 5. Scan equivalence across sampled lengths up to 2^14.
    run_criterion(&mut outcomes, 5, "scan equivalence", || {
        let r = suites::scan_equivalence_suite(0xC5);
        if r.passed { Ok(r.detail) } else { Err(r.detail) }
    });

    // 7. Desk-scale state tracking: 3 seeds, 2 of 3 must clear the bars;
    //    the diagonal baseline must stay below 70% at length 16.
    let mut champions: Vec<TrainedPair> = Vec::new();
    run_criterion(&mut outcomes, 7, "desk-scale state tracking", || {
        let mut details = Vec::new();
        let mut passes = 0;
        for seed in [0u64, 1, 2] {
            let pair = train_state_tracking_seed(seed);
            let ok = pair.in_dist > 0.9 && pair.len16 > 0.8 && pair.baseline_len16 < 0.7;
            details.push(format!(
                "seed {seed}: in-dist {:.3}, len16 {:.3}, baseline@16 {:.3} -> {}",
                pair.in_dist,
                pair.len16,
                pair.baseline_len16,
                if ok { "pass" } else { "fail" }
            ));
            if ok {
                passes += 1;
            }
            champions.push(pair);
        }
        if passes >= 2 {
            Ok(details.join("; "))
        } else {
            Err(details.join("; "))
        }
    });
    // keep only models that passed, best first by len16 accuracy
    champions.sort_by(|a, b| b.len16.partial_cmp(&a.len16).unwrap());
    let champion = champions
        .iter()
        .find(|p| p.in_dist > 0.9 && p.len16 > 0.8)
        .or(champions.first());

    // 6. Sequential vs parallel fixed point on the trained model.
    run_criterion(&mut outcomes, 6, "sequential vs parallel fixed point", || {
        let pair = champion.ok_or("no trained state-tracking model available")?;
        let cfgn = pair.cfg.normalized().unwrap();
        let r = suites::seq_vs_parallel_suite(&pair.model, &cfgn, &[8, 16, 32], 0.1);
        if r.passed { Ok(r.detail) } else { Err(r.detail) }
    });

    // 8. Copy-task dependence ordering at x2 generalization.
    let mut copy_models: Vec<(String, SequenceModel, ExperimentConfig, f64)> = Vec::new();
    run_criterion(&mut outcomes, 8, "copy dependence ordering", || {
        let mut accs = Vec::new();
        for which in ["full", "bc", "none"] {
            let cfg = copy_config(which, &format!("copy-{which}"));
            let summary = harness::run_train(&cfg).map_err(|e| e.to_string())?;
            let cfgn = cfg.normalized().unwrap();
            let model =
                harness::load_model(&cfgn, &summary.checkpoint).map_err(|e| e.to_string())?;
            let (acc, _) = eval_accuracy_at(&model, &cfg, 40);
            accs.push(acc);
            copy_models.push((which.to_string(), model, cfg, acc));
        }
        let detail = format!(
            "x2 character accuracy: full {:.3} vs b,c-only {:.3} vs none {:.3}",
            accs[0], accs[1], accs[2]
        );
        if accs[0] > accs[1] && accs[1] > accs[2] {
            Ok(detail)
        } else {
            Err(detail)
        }
    });

    // 9. Iteration-count adaptivity on the trained models.
    run_criterion(&mut outcomes, 9, "iteration-count adaptivity", || {
        let pair = champion.ok_or("no trained state-tracking model available")?;
        let (_, ell8) = eval_accuracy_at(&pair.model, &pair.cfg, 8);
        let (_, ell32) = eval_accuracy_at(&pair.model, &pair.cfg, 32);
        let med8 = percentile(&ell8, 0.5);
        let med32 = percentile(&ell32, 0.5);

        let (copy_detail, copy_ok) = match copy_models.iter().find(|(w, ..)| w == "full") {
            Some((_, model, ccfg, _)) => {
                let (_, ell) = eval_accuracy_at(model, ccfg, 20);
                let med = percentile(&ell, 0.5);
                (
                    format!("copy median ell* {med} at the longest trained content length 20"),
                    med < 20.0,
                )
            }
            None => ("no trained copy model".to_string(), false),
        };
        let detail = format!(
            "state tracking median ell*: {med8} at len 8 vs {med32} at len 32; {copy_detail}"
        );
        if med32 > med8 && copy_ok {
            Ok(detail)
        } else {
            Err(detail)
        }
    });

    // 10. Memory contract: peak training memory at ell_max 64 within 1.25x
    //     of ell_max 2 at identical shapes (k = 0).
    run_criterion(&mut outcomes, 10, "memory contract", || {
        let cfg = s3_config(0, "mem");
        let cfgn = cfg.normalized().unwrap();
        let model = SequenceModel::new(&cfgn.model, 0).map_err(|e| e.to_string())?;
        let batch = cfgn
            .task
            .train_batch(16, 0x3e3)
            .map_err(|e| e.to_string())?;
        let train = TrainConfig {
            k_backprop: 0,
            ..cfgn.train.clone()
        };
        let fp_at = |ell: usize| FixedPointConfig {
            tol: 1e-300,
            ell_max: ell,
            sample_ell_max: false,
            batch_quantile: 1.0,
            damping: Default::default(),
        };
        let mut run_once = |ell: usize| -> Result<(usize, usize), String> {
            reset_peak();
            let baseline = CURRENT.load(Ordering::Relaxed);
            let (_, _, fw) = model
                .loss_and_grads(&batch, &fp_at(ell), &train, None)
                .map_err(|e| e.to_string())?;
            Ok((peak_above(baseline), fw.layer_solves[0].iters_run))
        };
        // Warm-up so lazily created buffers and thread state do not skew
        // the first measurement.
        run_once(2)?;
        let (peak2, _) = run_once(2)?;
        let (peak64, iters64) = run_once(64)?;
        let ratio = peak64 as f64 / peak2.max(1) as f64;
        let detail = format!(
            "peak delta {peak64} B at ell_max 64 ({iters64} iterations run) vs {peak2} B at ell_max 2; ratio {ratio:.3}"
        );
        if ratio <= 1.25 {
            Ok(detail)
        } else {
            Err(detail)
        }
    });

    // Cleanup of training directories.
    for pair in &champions {
        std::fs::remove_dir_all(&pair.cfg.out_dir).ok();
    }
    for (_, _, cfg, _) in &copy_models {
        std::fs::remove_dir_all(&cfg.out_dir).ok();
    }

    outcomes.sort_by_key(|(id, ..)| *id);
    let mut all_passed = true;
    for (id, name, res) in &outcomes {
        match res {
            Ok(detail) => println!("criterion {id} ({name}): PASS — {detail}"),
            Err(detail) => {
                all_passed = false;
                println!("criterion {id} ({name}): FAIL — {detail}");
            }
        }
    }
    assert!(all_passed, "one or more acceptance criteria failed (see lines above)");
}

fn panic_text(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "opaque panic".into()
    }
}

/// Truncated-composite gradient probe through the whole pipeline for both
/// model kinds (the detach points held fixed).
fn composite_gradient_probe() -> Result<(), String> {
    use fprnn_core::mixers::MixerVariant;
    use fprnn_core::model::{ModelConfig, ModelKind};
    use fprnn_core::scan::ScanMode;
    use fprnn_core::tasks::{gen_word_problem, GroupKind};

    for kind in [ModelKind::FpMamba, ModelKind::FpRnnVector] {
        let cfg = ModelConfig {
            kind,
            vocab: 6,
            d_model: 4,
            expansion: 2,
            d_state: 3,
            n_layers: 1,
            mixer_variant: MixerVariant::Householder,
            rank_r: 1,
            mixer_hidden_dependence: true,
            y_dep_bc: true,
            contraction_eps: 0.01,
            alpha_rescale: false,
            scan_mode: ScanMode::Parallel,
        };
        let model = SequenceModel::new(&cfg, 23).map_err(|e| e.to_string())?;
        let batch = gen_word_problem(GroupKind::Symmetric, 3, 3, 2, 9).map_err(|e| e.to_string())?;
        let fp = FixedPointConfig::eval_default();
        let train = TrainConfig {
            k_backprop: 0,
            ..TrainConfig::default()
        };
        let fw = model
            .forward_solve(&batch.tokens, &fp, train.recorded_steps(), None)
            .map_err(|e| e.to_string())?;
        let (_, grads) = model
            .loss_and_grads_with_forward(&batch, &fw, true)
            .map_err(|e| e.to_string())?;
        let sizes = model.param_sizes();
        let mut checked = 0;
        for (ai, &size) in sizes.iter().enumerate() {
            if size == 0 || ai % 4 != 0 {
                continue;
            }
            let probe = size / 2;
            let eps = 1e-5;
            let eval_at = |delta: f64| -> f64 {
                let mut m2 = model.clone();
                let mut idx = 0;
                m2.for_each_mut(&mut |_, mut view| {
                    if idx == ai {
                        view.data_mut()[probe] += delta;
                    }
                    idx += 1;
                });
                m2.loss_and_grads_with_forward(&batch, &fw, false).unwrap().0
            };
            let fd = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
            let analytic = grads[ai].data()[probe];
            let denom = analytic.abs().max(fd.abs()).max(1e-3);
            if (analytic - fd).abs() / denom >= 1e-5 {
                return Err(format!(
                    "{kind:?} composite array {ai}: analytic {analytic} vs fd {fd}"
                ));
            }
            checked += 1;
        }
        if checked < 3 {
            return Err("too few composite probes".into());
        }
    }
    Ok(())
}
