//! Experiment orchestration: configuration, training/eval loops, checkpoint
//! and metrics I/O, iteration-count instrumentation, length-generalization
//! sweeps, and the property suite.

pub mod checkpoint;
pub mod metrics;
pub mod suites;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fixed_point::{FixedPointConfig, RESIDUAL_TINY};
use crate::model::{percentile, ModelConfig, SequenceModel, VisitArrays};
use crate::tasks::{self, GroupKind, SequenceBatch};
use crate::train::{adamw_update, clip_and_schedule, AdamWState, TrainConfig};
use crate::{FpError, Result};

pub use metrics::MetricsRecord;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    WordProblem {
        group: GroupKind,
        degree: usize,
        train_len: usize,
    },
    Copy {
        vocab: usize,
        lo: usize,
        hi: usize,
    },
    ModArith {
        modulus: usize,
        lo: usize,
        hi: usize,
    },
}

impl TaskConfig {
    pub fn vocab(&self) -> Result<usize> {
        Ok(match self {
            TaskConfig::WordProblem { group, degree, .. } => {
                tasks::Group::new(*group, *degree)?.order()
            }
            TaskConfig::Copy { vocab, .. } => vocab + 2,
            TaskConfig::ModArith { modulus, .. } => modulus + tasks::arith_tokens::STRUCTURAL,
        })
    }

    pub fn train_length(&self) -> usize {
        match self {
            TaskConfig::WordProblem { train_len, .. } => *train_len,
            TaskConfig::Copy { hi, .. } => *hi,
            TaskConfig::ModArith { hi, .. } => *hi,
        }
    }

    /// Training batch (length distribution per task definition).
    pub fn train_batch(&self, batch: usize, seed: u64) -> Result<SequenceBatch> {
        match self {
            TaskConfig::WordProblem {
                group,
                degree,
                train_len,
            } => tasks::gen_word_problem(*group, *degree, *train_len, batch, seed),
            TaskConfig::Copy { vocab, lo, hi } => {
                tasks::gen_copy(*vocab, (*lo, *hi), 2 * hi + 2, batch, seed)
            }
            TaskConfig::ModArith { modulus, lo, hi } => {
                tasks::gen_mod_arith(*modulus, (*lo, *hi), hi + 2, batch, seed)
            }
        }
    }

    /// Evaluation batch at an explicit length (word problems: sequence
    /// length; copy: content length; mod-arith: max expression length).
    pub fn eval_batch_at(&self, length: usize, batch: usize, seed: u64) -> Result<SequenceBatch> {
        match self {
            TaskConfig::WordProblem { group, degree, .. } => {
                tasks::gen_word_problem(*group, *degree, length, batch, seed)
            }
            TaskConfig::Copy { vocab, .. } => {
                tasks::gen_copy(*vocab, (length, length), 2 * length + 2, batch, seed)
            }
            TaskConfig::ModArith { modulus, .. } => {
                let lo = length.saturating_sub(6).max(3);
                tasks::gen_mod_arith(*modulus, (lo, length.max(3)), length.max(3) + 2, batch, seed)
            }
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub fp_train: FixedPointConfig,
    pub fp_eval: FixedPointConfig,
    pub train: TrainConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub eval_lengths: Vec<usize>,
    /// Stop once in-distribution accuracy reaches this level (budget cap
    /// semantics: `steps` stays the hard limit).
    #[serde(default)]
    pub stop_at_accuracy: Option<f64>,
    pub out_dir: String,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Model vocab always follows the task.
    pub fn normalized(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        cfg.model.vocab = cfg.task.vocab()?;
        cfg.model.validate()?;
        cfg.fp_train.validate()?;
        cfg.fp_eval.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        Path::new(&self.out_dir).join("checkpoint.bin")
    }

    pub fn metrics_path(&self) -> PathBuf {
        Path::new(&self.out_dir).join("metrics.csv")
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const TRAIN_STREAM: u64 = 0x7261696e;
const EVAL_STREAM: u64 = 0x6576616c;

pub struct TrainSummary {
    pub steps_run: usize,
    pub final_train_accuracy: f64,
    pub checkpoint: PathBuf,
    pub records: Vec<MetricsRecord>,
}

/// Seeded end-to-end training: generate batch → fixed-point forward →
/// truncated backward → clip/schedule → optimizer step, with periodic
/// evaluation and checkpoints. Deterministic given (config, seed) up to
/// wall-clock columns.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let cfg = cfg.normalized()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        Path::new(&cfg.out_dir).join("config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )?;

    let mut model = SequenceModel::new(&cfg.model, cfg.seed)?;
    let mut opt = AdamWState::new(&model.param_sizes());
    let mut gamma_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x67616d6d61));
    let started = Instant::now();
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut wrote = metrics::MetricsWriter::create(&cfg.metrics_path())?;

    let train_len = cfg.task.train_length();
    let eval_round = |model: &SequenceModel,
                          step: usize,
                          records: &mut Vec<MetricsRecord>,
                          wrote: &mut metrics::MetricsWriter,
                          started: &Instant|
     -> Result<f64> {
        let seed = splitmix64(cfg.seed ^ EVAL_STREAM ^ (step as u64));
        let batch = cfg.task.eval_batch_at(train_len, cfg.eval_batch, seed)?;
        let out = model.evaluate_batch(&batch, &cfg.fp_eval)?;
        let rec = MetricsRecord {
            step,
            split: "eval".into(),
            sequence_length: train_len,
            accuracy: out.accuracy,
            loss: out.loss,
            median_ell_star: percentile(&out.ell_stars, 0.5),
            p90_ell_star: percentile(&out.ell_stars, 0.9),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        wrote.append(&rec)?;
        records.push(rec);
        Ok(out.accuracy)
    };

    checkpoint::save_model(&cfg.checkpoint_path(), &model, false)?;
    let mut last_acc = eval_round(&model, 0, &mut records, &mut wrote, &started)?;

    let mut steps_run = 0usize;
    for step in 1..=cfg.steps {
        let batch_seed = splitmix64(cfg.seed ^ TRAIN_STREAM ^ (step as u64));
        let batch = cfg.task.train_batch(cfg.batch_size, batch_seed)?;
        let (loss, mut grads, fw) =
            model.loss_and_grads(&batch, &cfg.fp_train, &cfg.train, Some(&mut gamma_rng))?;
        if !loss.is_finite() {
            checkpoint::save_model(&cfg.checkpoint_path(), &model, false)?;
            return Err(FpError::Diverged { step });
        }
        let (_, lr) = clip_and_schedule(&mut grads, step - 1, &cfg.train);
        opt.t += 1;
        let t = opt.t;
        let mut idx = 0usize;
        model.for_each_mut(&mut |_, mut view| {
            adamw_update(
                view.data_mut(),
                grads[idx].data(),
                &mut opt.m[idx],
                &mut opt.v[idx],
                t,
                lr,
                &cfg.train,
            );
            idx += 1;
        });
        steps_run = step;

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let ell_stars = fw.seq_ell_star();
            let rec = MetricsRecord {
                step,
                split: "train".into(),
                sequence_length: train_len,
                accuracy: f64::NAN,
                loss,
                median_ell_star: percentile(&ell_stars, 0.5),
                p90_ell_star: percentile(&ell_stars, 0.9),
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            wrote.append(&rec)?;
            records.push(rec);
            last_acc = eval_round(&model, step, &mut records, &mut wrote, &started)?;
            if let Some(target) = cfg.stop_at_accuracy {
                if last_acc >= target {
                    break;
                }
            }
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            checkpoint::save_model(&cfg.checkpoint_path(), &model, false)?;
        }
    }

    checkpoint::save_model(&cfg.checkpoint_path(), &model, false)?;
    if steps_run > 0 && (cfg.eval_every == 0 || steps_run % cfg.eval_every != 0) {
        last_acc = eval_round(&model, steps_run, &mut records, &mut wrote, &started)?;
    }
    Ok(TrainSummary {
        steps_run,
        final_train_accuracy: last_acc,
        checkpoint: cfg.checkpoint_path(),
        records,
    })
}

/// Accuracy and iteration statistics at each requested length on fresh
/// seeded test batches.
pub fn eval_length_generalization(
    model: &SequenceModel,
    cfg: &ExperimentConfig,
    lengths: &[usize],
) -> Result<Vec<MetricsRecord>> {
    let started = Instant::now();
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let seed = splitmix64(cfg.seed ^ EVAL_STREAM ^ 0xbeef ^ ((len as u64) << 17));
        let batch = cfg.task.eval_batch_at(len, cfg.eval_batch, seed)?;
        let eval = model.evaluate_batch(&batch, &cfg.fp_eval)?;
        out.push(MetricsRecord {
            step: 0,
            split: "test".into(),
            sequence_length: len,
            accuracy: eval.accuracy,
            loss: eval.loss,
            median_ell_star: percentile(&eval.ell_stars, 0.5),
            p90_ell_star: percentile(&eval.ell_stars, 0.9),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

pub struct SeqParComparison {
    /// Per sequence: max over tokens and layers of the normalized output
    /// difference between the sequential and parallel solves.
    pub per_sequence: Vec<f64>,
    pub max_diff: f64,
}

/// Token-by-token fixed-point inference versus the parallel solve.
pub fn sequential_vs_parallel(
    model: &SequenceModel,
    tokens: &[Vec<u32>],
    fp: &FixedPointConfig,
) -> Result<SeqParComparison> {
    let par = model.forward_solve(tokens, fp, 0, None)?;
    let mut per_sequence = Vec::with_capacity(tokens.len());
    let mut max_diff = 0.0f64;
    for (b, seq) in tokens.iter().enumerate() {
        let sq = model.sequential_forward(seq, fp)?;
        let mut worst = 0.0f64;
        for (li, layer_y) in sq.layer_y.iter().enumerate() {
            for (t, y_seq) in layer_y.iter().enumerate() {
                let y_par = par.layer_solves[li].y_star[b][t].as_vec();
                let mut inc = 0.0f64;
                let mut scale = 0.0f64;
                for (a, p) in y_seq.data.iter().zip(y_par.data.iter()) {
                    inc = inc.max((a - p).abs());
                    scale = scale.max(p.abs());
                }
                worst = worst.max(inc / scale.max(RESIDUAL_TINY));
            }
        }
        max_diff = max_diff.max(worst);
        per_sequence.push(worst);
    }
    Ok(SeqParComparison {
        per_sequence,
        max_diff,
    })
}

/// Load a model from a config + checkpoint pair on disk.
pub fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<SequenceModel> {
    let cfg = cfg.normalized()?;
    let mut model = SequenceModel::new(&cfg.model, cfg.seed)?;
    checkpoint::load_model(checkpoint, &mut model)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::MixerVariant;
    use crate::model::ModelKind;
    use crate::scan::ScanMode;
    use crate::train::Schedule;

    fn tiny_experiment(dir: &str) -> ExperimentConfig {
        ExperimentConfig {
            task: TaskConfig::WordProblem {
                group: GroupKind::Cyclic,
                degree: 2,
                train_len: 5,
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
                lr: 3e-3,
                schedule: Schedule::Constant,
                ..TrainConfig::default()
            },
            steps: 4,
            batch_size: 8,
            eval_batch: 16,
            eval_every: 2,
            checkpoint_every: 0,
            eval_lengths: vec![5, 8],
            stop_at_accuracy: None,
            out_dir: dir.to_string(),
            seed: 7,
        }
    }

    fn tmp_dir(tag: &str) -> String {
        let dir = std::env::temp_dir().join(format!("fprnn-harness-{tag}-{}", std::process::id()));
        dir.to_string_lossy().to_string()
    }

    #[test]
    fn zero_steps_emits_initial_checkpoint_and_eval_row_only() {
        let dir = tmp_dir("zero");
        let mut cfg = tiny_experiment(&dir);
        cfg.steps = 0;
        let summary = run_train(&cfg).unwrap();
        assert_eq!(summary.steps_run, 0);
        assert_eq!(summary.records.len(), 1);
        assert_eq!(summary.records[0].split, "eval");
        assert!(cfg.checkpoint_path().exists());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn same_seed_replays_identical_metrics() {
        let dir_a = tmp_dir("rep-a");
        let dir_b = tmp_dir("rep-b");
        let mut a = tiny_experiment(&dir_a);
        let mut b = tiny_experiment(&dir_b);
        a.steps = 3;
        b.steps = 3;
        let ra = run_train(&a).unwrap();
        let rb = run_train(&b).unwrap();
        assert_eq!(ra.records.len(), rb.records.len());
        for (x, y) in ra.records.iter().zip(rb.records.iter()) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.split, y.split);
            assert!(
                (x.loss - y.loss).abs() == 0.0 || (x.loss.is_nan() && y.loss.is_nan()),
                "loss {} vs {}",
                x.loss,
                y.loss
            );
            assert!((x.accuracy - y.accuracy).abs() == 0.0 || (x.accuracy.is_nan() && y.accuracy.is_nan()));
            assert_eq!(x.median_ell_star, y.median_ell_star);
        }
        // Checkpoints byte-identical.
        let ca = std::fs::read(a.checkpoint_path()).unwrap();
        let cb = std::fs::read(b.checkpoint_path()).unwrap();
        assert_eq!(ca, cb);
        std::fs::remove_dir_all(&dir_a).ok();
        std::fs::remove_dir_all(&dir_b).ok();
    }

    #[test]
    fn untrained_parity_model_is_at_chance() {
        let dir = tmp_dir("chance");
        let mut cfg = tiny_experiment(&dir);
        cfg.steps = 0;
        cfg.eval_batch = 64;
        let cfgn = cfg.normalized().unwrap();
        let model = SequenceModel::new(&cfgn.model, cfgn.seed).unwrap();
        let recs = eval_length_generalization(&model, &cfgn, &[8]).unwrap();
        assert!(
            (recs[0].accuracy - 0.5).abs() < 0.15,
            "accuracy {}",
            recs[0].accuracy
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn single_token_sequential_equals_parallel() {
        let cfg = tiny_experiment(&tmp_dir("seq1")).normalized().unwrap();
        let model = SequenceModel::new(&cfg.model, 3).unwrap();
        let cmp = sequential_vs_parallel(&model, &[vec![1u32]], &cfg.fp_eval).unwrap();
        assert!(cmp.max_diff < 1e-9, "diff {}", cmp.max_diff);
    }

    #[test]
    fn random_weights_comparison_is_finite_and_reported() {
        let cfg = tiny_experiment(&tmp_dir("seq4")).normalized().unwrap();
        let model = SequenceModel::new(&cfg.model, 5).unwrap();
        let cmp = sequential_vs_parallel(&model, &[vec![0, 1, 1, 0]], &cfg.fp_eval).unwrap();
        assert!(cmp.max_diff.is_finite());
        assert_eq!(cmp.per_sequence.len(), 1);
    }
}
