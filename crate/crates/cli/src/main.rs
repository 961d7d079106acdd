use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fprnn_core::fixed_point::FixedPointConfig;
use fprnn_core::harness::{self, suites, ExperimentConfig, TaskConfig};
use fprnn_core::mixers::MixerVariant;
use fprnn_core::model::{ModelConfig, ModelKind};
use fprnn_core::scan::ScanMode;
use fprnn_core::tasks::GroupKind;
use fprnn_core::train::{Schedule, TrainConfig};

#[derive(Parser)]
#[command(
    name = "fprnn",
    about = "Train, evaluate and verify fixed-point RNN models on state tracking, copying and modular arithmetic"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MixerArg {
    Dplr,
    Householder,
    Kronecker,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    FpMamba,
    FpRnnVector,
    DiagonalBaseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    S3,
    S5,
    A5,
    Z2,
    Copy,
    ModArith,
}

#[derive(clap::Args)]
struct CommonOverrides {
    /// Experiment configuration file (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    mixer: Option<MixerArg>,
    /// Reflections / rank of the mixer.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    ell_max: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    k_backprop: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints + metrics.
    Train {
        #[command(flatten)]
        common: CommonOverrides,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Length-generalization evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonOverrides,
        /// Checkpoint path (default: <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated evaluation lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
    },
    /// Run the property suites; exit code 0 iff all pass.
    Verify {
        #[command(flatten)]
        common: CommonOverrides,
        /// Use this checkpoint as the trained model for the
        /// sequential-vs-parallel comparison.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Token-by-token fixed-point inference compared against the parallel
    /// solve.
    SeqInfer {
        #[command(flatten)]
        common: CommonOverrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence length of the probe batch.
        #[arg(long, default_value_t = 16)]
        length: usize,
        /// Number of probe sequences.
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
}

fn default_config() -> ExperimentConfig {
    ExperimentConfig {
        task: TaskConfig::WordProblem {
            group: GroupKind::Symmetric,
            degree: 3,
            train_len: 8,
        },
        model: ModelConfig {
            kind: ModelKind::FpMamba,
            vocab: 6,
            d_model: 8,
            expansion: 2,
            d_state: 16,
            n_layers: 1,
            mixer_variant: MixerVariant::Kronecker,
            rank_r: 1,
            mixer_hidden_dependence: true,
            y_dep_bc: true,
            contraction_eps: 0.01,
            alpha_rescale: false,
            scan_mode: ScanMode::Parallel,
        },
        fp_train: FixedPointConfig::train_default(),
        fp_eval: FixedPointConfig::eval_default(),
        train: TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            clip_norm: Some(1.0),
            schedule: Schedule::Constant,
            k_backprop: 0,
            seed: 0,
        },
        steps: 2000,
        batch_size: 64,
        eval_batch: 128,
        eval_every: 100,
        checkpoint_every: 500,
        eval_lengths: vec![8, 16, 32],
        stop_at_accuracy: None,
        out_dir: "runs/default".into(),
        seed: 0,
    }
}

fn apply_task(cfg: &mut ExperimentConfig, task: TaskArg) {
    cfg.task = match task {
        TaskArg::S3 => TaskConfig::WordProblem {
            group: GroupKind::Symmetric,
            degree: 3,
            train_len: 8,
        },
        TaskArg::S5 => TaskConfig::WordProblem {
            group: GroupKind::Symmetric,
            degree: 5,
            train_len: 16,
        },
        TaskArg::A5 => TaskConfig::WordProblem {
            group: GroupKind::Alternating,
            degree: 5,
            train_len: 16,
        },
        TaskArg::Z2 => TaskConfig::WordProblem {
            group: GroupKind::Cyclic,
            degree: 2,
            train_len: 8,
        },
        TaskArg::Copy => TaskConfig::Copy {
            vocab: 8,
            lo: 5,
            hi: 20,
        },
        TaskArg::ModArith => TaskConfig::ModArith {
            modulus: 5,
            lo: 3,
            hi: 24,
        },
    };
}

fn build_config(common: &CommonOverrides) -> Result<ExperimentConfig, String> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("reading {}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("parsing config: {e}"))?
        }
        None => default_config(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(task) = common.task {
        apply_task(&mut cfg, task);
    }
    if let Some(model) = common.model {
        cfg.model.kind = match model {
            ModelArg::FpMamba => ModelKind::FpMamba,
            ModelArg::FpRnnVector => ModelKind::FpRnnVector,
            ModelArg::DiagonalBaseline => ModelKind::DiagonalBaseline,
        };
    }
    if let Some(mixer) = common.mixer {
        cfg.model.mixer_variant = match mixer {
            MixerArg::Dplr => MixerVariant::Dplr,
            MixerArg::Householder => MixerVariant::Householder,
            MixerArg::Kronecker => MixerVariant::Kronecker,
        };
    }
    if let Some(rank) = common.rank {
        cfg.model.rank_r = rank;
    }
    if let Some(ell_max) = common.ell_max {
        cfg.fp_train.ell_max = ell_max;
        cfg.fp_eval.ell_max = ell_max.max(cfg.fp_eval.ell_max);
    }
    if let Some(tol) = common.tol {
        cfg.fp_train.tol = tol;
        cfg.fp_eval.tol = tol;
    }
    if let Some(k) = common.k_backprop {
        cfg.train.k_backprop = k;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().to_string();
    }
    Ok(cfg)
}

fn run() -> Result<ExitCode, String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            common,
            steps,
            batch_size,
            lr,
        } => {
            let mut cfg = build_config(&common)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            let summary = harness::run_train(&cfg).map_err(|e| e.to_string())?;
            println!(
                "trained {} steps; final in-distribution accuracy {:.4}",
                summary.steps_run, summary.final_train_accuracy
            );
            println!("checkpoint: {}", summary.checkpoint.display());
            println!("metrics:    {}", cfg.metrics_path().display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            common,
            checkpoint,
            lengths,
        } => {
            let cfg = build_config(&common)?.normalized().map_err(|e| e.to_string())?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            if !ckpt.exists() {
                return Err(format!("checkpoint not found: {}", ckpt.display()));
            }
            let model = harness::load_model(&cfg, &ckpt).map_err(|e| e.to_string())?;
            let lens = if lengths.is_empty() {
                cfg.eval_lengths.clone()
            } else {
                lengths
            };
            let records =
                harness::eval_length_generalization(&model, &cfg, &lens).map_err(|e| e.to_string())?;
            println!("{}", fprnn_core::harness::metrics::METRICS_HEADER);
            for r in &records {
                println!("{}", r.csv_row());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { common, checkpoint } => {
            let cfg = build_config(&common)?;
            let normalized = cfg.normalized().map_err(|e| e.to_string())?;
            let model = match &checkpoint {
                Some(path) => Some(harness::load_model(&normalized, path).map_err(|e| e.to_string())?),
                None => None,
            };
            let results =
                suites::run_property_suite(&cfg, model.as_ref()).map_err(|e| e.to_string())?;
            let mut all = true;
            for r in &results {
                println!(
                    "{:<22} {}  {}",
                    r.name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.detail
                );
                all &= r.passed;
            }
            println!(
                "{}",
                serde_json::json!({
                    "suites": results.iter().map(|r| serde_json::json!({
                        "name": r.name,
                        "passed": r.passed,
                        "detail": r.detail,
                    })).collect::<Vec<_>>()
                })
            );
            Ok(if all {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::SeqInfer {
            common,
            checkpoint,
            length,
            batch,
        } => {
            let cfg = build_config(&common)?.normalized().map_err(|e| e.to_string())?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            if !ckpt.exists() {
                return Err(format!("checkpoint not found: {}", ckpt.display()));
            }
            let model = harness::load_model(&cfg, &ckpt).map_err(|e| e.to_string())?;
            let probe = cfg
                .task
                .eval_batch_at(length, batch, harness::splitmix64(cfg.seed ^ 0x736571))
                .map_err(|e| e.to_string())?;
            let cmp = harness::sequential_vs_parallel(&model, &probe.tokens, &cfg.fp_eval)
                .map_err(|e| e.to_string())?;
            for (i, d) in cmp.per_sequence.iter().enumerate() {
                println!("sequence {i}: max normalized difference {d:.6}");
            }
            println!("overall max: {:.6}", cmp.max_diff);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
