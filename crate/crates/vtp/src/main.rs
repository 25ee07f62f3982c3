use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vtp::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageTag};
use vtp::config::RunConfig;
use vtp::metrics::append_metrics;
use vtp::pipeline::{prune_model, run_pipeline, run_stage, stage_input, Datasets, ResumeFrom};
use vtp::report::{kv_path, write_report};
use vtp::{Result, VtpError};
use vtp_core::cost::{ArchShape, CostReport};
use vtp_core::train::Stage;
use vtp_core::ModelConfig;

/// Gated vision transformer training, dimension pruning and cost analysis.
#[derive(Parser)]
#[command(name = "vtp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage and write its checkpoint.
    Train {
        /// TOML run configuration [default: built-in defaults]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stage to run
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Input checkpoint; required for sparsity and finetune
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Overrides the stage seed (and the init seed for baseline) [default: from config]
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics log to append to [default: OUT with extension metrics.log]
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Threshold the gates of a sparsity checkpoint and slice the model.
    Prune {
        /// TOML run configuration [default: built-in defaults]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sparsity-stage checkpoint (a baseline checkpoint is accepted with a warning)
        #[arg(long = "in")]
        input: PathBuf,
        /// Fraction of gate scores to prune, in [0, 1) [default: prune.rate from config]
        #[arg(long)]
        rate: Option<f64>,
        /// Pruned checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Report table path; the key-value form goes next to it with extension kv
        #[arg(long)]
        report: PathBuf,
    },
    /// Print parameter and FLOP counts for a preset or configured architecture.
    Analyze {
        /// deit-b, vit-b16, toy or custom:PATH (a run configuration file)
        #[arg(long)]
        model: String,
        /// Input resolution [default: the architecture's native size]
        #[arg(long)]
        image_size: Option<usize>,
        /// Pruned checkpoint whose kept dimensions to count
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Output form
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Run baseline, sparsity, prune and finetune into one directory.
    Pipeline {
        /// TOML run configuration [default: built-in defaults]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pruning rate in [0, 1) [default: prune.rate from config]
        #[arg(long)]
        rate: Option<f64>,
        /// Directory for checkpoints, metrics.log and the report
        #[arg(long)]
        out_dir: PathBuf,
        /// Skip the stages before this checkpoint in OUT_DIR
        #[arg(long, value_enum)]
        resume_from: Option<ResumeArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Baseline,
    Sparsity,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResumeArg {
    Baseline,
    Sparse,
    Pruned,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Kv,
}

const PRESETS: &str = "deit-b, vit-b16, toy, custom:PATH";

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "# resolved configuration");
    for line in cfg.to_toml().lines() {
        let _ = writeln!(err, "# {line}");
    }
    Ok(cfg)
}

fn cmd_train(
    config: Option<&Path>,
    stage: StageArg,
    input: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    metrics: Option<&Path>,
) -> Result<()> {
    let stage = match stage {
        StageArg::Baseline => Stage::Baseline,
        StageArg::Sparsity => Stage::Sparsity,
        StageArg::Finetune => Stage::Finetune,
    };
    if stage != Stage::Baseline && input.is_none() {
        return Err(VtpError::Config(format!(
            "--in is required for the {} stage",
            stage.name()
        )));
    }
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        match stage {
            Stage::Baseline => cfg.train_baseline.seed = s,
            Stage::Sparsity => cfg.train_sparsity.seed = s,
            Stage::Finetune => cfg.finetune.seed = s,
        }
    }
    let input = match input {
        Some(p) => Some((p, load_checkpoint(p)?)),
        None => None,
    };
    let model = stage_input(&cfg, stage, input, cfg.train_baseline.seed)?;
    let data = Datasets::new(&cfg)?;
    let (ckpt, report) = run_stage(model, &data, &cfg.stage_config(stage))?;
    save_checkpoint(&ckpt, out)?;
    let metrics = metrics.map_or_else(|| out.with_extension("metrics.log"), Path::to_path_buf);
    append_metrics(&metrics, &report.history)?;
    if let Some(last) = report.history.last() {
        eprintln!("stage={} steps={} eval_acc={:.4}", stage.name(), report.steps, last.eval_acc);
    }
    Ok(())
}

fn cmd_prune(
    config: Option<&Path>,
    input: &Path,
    rate: Option<f64>,
    out: &Path,
    report: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let rate = rate.unwrap_or(cfg.prune.rate);
    if !(0.0..1.0).contains(&rate) {
        return Err(VtpError::Config(format!("--rate {rate} outside [0, 1)")));
    }
    let ckpt = load_checkpoint(input)?;
    vtp::pipeline::check_config(&cfg, input, &ckpt)?;
    match ckpt.stage {
        StageTag::Sparsity => {}
        StageTag::Baseline => eprintln!(
            "warning: pruning a baseline checkpoint; gate scores have not been sparsity-trained"
        ),
        other => {
            return Err(VtpError::checkpoint(
                input,
                format!("stage: prune needs a sparsity checkpoint, found {}", other.name()),
            ))
        }
    }
    let (hard, plan, cost) = prune_model(&ckpt.model, rate)?;
    save_checkpoint(
        &Checkpoint {
            model: hard,
            stage: StageTag::Pruned,
            optimizer: None,
            rng: None,
        },
        out,
    )?;
    write_report(&cost, report, &kv_path(report))?;
    eprintln!(
        "pruned {} of {} dimensions (tau={:e}, protected sites={})",
        plan.total_pruned(),
        plan.total_scores(),
        plan.tau,
        plan.protected_sites.len()
    );
    Ok(())
}

fn cmd_analyze(model: &str, image_size: Option<usize>, input: Option<&Path>, format: Format) -> Result<()> {
    let config = match model {
        "deit-b" => ModelConfig::deit_b(),
        "vit-b16" => ModelConfig::vit_b16(),
        "toy" => ModelConfig::toy(),
        m => match m.strip_prefix("custom:") {
            Some(path) => RunConfig::load(Path::new(path))?.model_config(),
            None => {
                return Err(VtpError::Config(format!(
                    "unknown model preset {m:?}; presets: {PRESETS}"
                )))
            }
        },
    };
    let image_size = image_size.unwrap_or(config.image_size);
    let report = match input {
        None => CostReport::baseline(&config, image_size)?,
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model.config != config {
                return Err(VtpError::checkpoint(
                    path,
                    format!("config: checkpoint architecture does not match --model {model}"),
                ));
            }
            let removed = if ckpt.model.is_pruned() {
                vtp_core::cost::gate_params(&config)
            } else {
                0
            };
            CostReport::new(&config, &ArchShape::of_model(&ckpt.model), image_size, removed)?
        }
    };
    let text = match format {
        Format::Table => report.to_table(),
        Format::Kv => report.to_kv(),
    };
    print!("{text}");
    Ok(())
}

fn cmd_pipeline(
    config: Option<&Path>,
    rate: Option<f64>,
    out_dir: &Path,
    resume: Option<ResumeArg>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let rate = rate.unwrap_or(cfg.prune.rate);
    let resume = resume.map(|r| match r {
        ResumeArg::Baseline => ResumeFrom::Baseline,
        ResumeArg::Sparse => ResumeFrom::Sparse,
        ResumeArg::Pruned => ResumeFrom::Pruned,
    });
    let summary = run_pipeline(&cfg, rate, out_dir, resume, &mut std::io::stderr())?;
    eprintln!(
        "params_reduced_pct={:.2} flops_reduced_pct={:.2} final_eval_acc={:.4}",
        summary.report.params_reduced_pct, summary.report.flops_reduced_pct, summary.final_eval_acc
    );
    Ok(())
}

fn fail(kind: &str, reason: &str, code: u8) -> ExitCode {
    eprintln!("error: kind={kind} reason={reason:?}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail("config", first.trim_start_matches("error: "), 1);
        }
    };
    let result = match &cli.command {
        Command::Train { config, stage, input, out, seed, metrics } => cmd_train(
            config.as_deref(),
            *stage,
            input.as_deref(),
            out,
            *seed,
            metrics.as_deref(),
        ),
        Command::Prune { config, input, rate, out, report } => {
            cmd_prune(config.as_deref(), input, *rate, out, report)
        }
        Command::Analyze { model, image_size, input, format } => {
            cmd_analyze(model, *image_size, input.as_deref(), *format)
        }
        Command::Pipeline { config, rate, out_dir, resume_from } => {
            cmd_pipeline(config.as_deref(), *rate, out_dir, *resume_from)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), e.exit_code() as u8),
    }
}
