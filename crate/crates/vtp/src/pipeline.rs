//! Stage runners shared by the CLI commands and the full pipeline.

use std::io::Write;
use std::path::{Path, PathBuf};

use vtp_core::cost::CostReport;
use vtp_core::data::{make_dataset, Dataset};
use vtp_core::prune::{apply_plan, plan_for_rate, PrunePlan};
use vtp_core::train::{evaluate, train, Stage, TrainConfig, TrainReport};
use vtp_core::VitModel;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, StageTag};
use crate::config::RunConfig;
use crate::error::{Result, VtpError};
use crate::metrics::append_metrics;
use crate::report::write_report;

pub const BASELINE_CKPT: &str = "baseline.ckpt";
pub const SPARSE_CKPT: &str = "sparse.ckpt";
pub const PRUNED_CKPT: &str = "pruned.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_KV: &str = "report.kv";
pub const METRICS_LOG: &str = "metrics.log";

/// Everything a successful pipeline run leaves in its output directory.
pub const ARTIFACTS: [&str; 7] = [
    BASELINE_CKPT,
    SPARSE_CKPT,
    PRUNED_CKPT,
    FINAL_CKPT,
    REPORT_TXT,
    REPORT_KV,
    METRICS_LOG,
];

pub struct Datasets {
    pub train: Dataset,
    pub eval: Dataset,
}

impl Datasets {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let (train, eval) = make_dataset(&cfg.dataset_spec())?;
        Ok(Self { train, eval })
    }
}

pub fn stage_tag(stage: Stage) -> StageTag {
    match stage {
        Stage::Baseline => StageTag::Baseline,
        Stage::Sparsity => StageTag::Sparsity,
        Stage::Finetune => StageTag::Finetune,
    }
}

/// Starting model for `stage`: a fresh initialization for baseline, otherwise
/// the input checkpoint, which must carry the expected stage tag.
pub fn stage_input(
    cfg: &RunConfig,
    stage: Stage,
    input: Option<(&Path, Checkpoint)>,
    init_seed: u64,
) -> Result<VitModel> {
    let expected = match stage {
        Stage::Baseline => None,
        Stage::Sparsity => Some(StageTag::Baseline),
        Stage::Finetune => Some(StageTag::Pruned),
    };
    match (expected, input) {
        (None, None) => Ok(VitModel::init(&cfg.model_config(), init_seed)?),
        (None, Some((path, ckpt))) => {
            check_config(cfg, path, &ckpt)?;
            if ckpt.model.is_pruned() {
                return Err(VtpError::checkpoint(path, "stage: baseline input must be unpruned"));
            }
            Ok(ckpt.model)
        }
        (Some(tag), Some((path, ckpt))) => {
            check_config(cfg, path, &ckpt)?;
            if ckpt.stage != tag {
                return Err(VtpError::checkpoint(
                    path,
                    format!(
                        "stage: {} stage needs a {} checkpoint, found {}",
                        stage.name(),
                        tag.name(),
                        ckpt.stage.name()
                    ),
                ));
            }
            Ok(ckpt.model)
        }
        (Some(_), None) => Err(VtpError::Config(format!(
            "--in is required for the {} stage",
            stage.name()
        ))),
    }
}

pub fn check_config(cfg: &RunConfig, path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.model.config != cfg.model_config() {
        return Err(VtpError::checkpoint(
            path,
            "config: checkpoint model does not match the [model] section",
        ));
    }
    Ok(())
}

/// Trains `model` for one stage and packages the result as a checkpoint.
pub fn run_stage(
    mut model: VitModel,
    data: &Datasets,
    tc: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    let report = train(&mut model, &data.train, &data.eval, tc)?;
    let ckpt = Checkpoint {
        model,
        stage: stage_tag(tc.stage),
        optimizer: Some(report.optimizer.clone()),
        rng: Some(RngState {
            seed: tc.seed,
            stream: tc.stage.stream(),
            word_pos: report.rng_word_pos.to_string(),
        }),
    };
    Ok((ckpt, report))
}

/// Thresholds the gates of a soft model at `rate` and slices it.
pub fn prune_model(model: &VitModel, rate: f64) -> Result<(VitModel, PrunePlan, CostReport)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(VtpError::Config(format!("rate {rate} outside [0, 1)")));
    }
    let plan = plan_for_rate(model, rate)?;
    let hard = apply_plan(model, &plan)?;
    let report = CostReport::for_model(&hard)?;
    Ok((hard, plan, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumeFrom {
    Baseline,
    Sparse,
    Pruned,
}

impl ResumeFrom {
    pub fn file(self) -> &'static str {
        match self {
            ResumeFrom::Baseline => BASELINE_CKPT,
            ResumeFrom::Sparse => SPARSE_CKPT,
            ResumeFrom::Pruned => PRUNED_CKPT,
        }
    }
}

/// Eval accuracies after each stage; `None` for stages skipped by a resume.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub baseline_eval_acc: Option<f64>,
    pub sparse_eval_acc: Option<f64>,
    pub pruned_eval_acc: f64,
    pub final_eval_acc: f64,
    pub report: CostReport,
}

fn tagged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

fn load_expecting(path: &Path, cfg: &RunConfig, tag: StageTag) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    check_config(cfg, path, &ckpt)?;
    if ckpt.stage != tag {
        return Err(VtpError::checkpoint(
            path,
            format!("stage: expected {}, found {}", tag.name(), ckpt.stage.name()),
        ));
    }
    Ok(ckpt)
}

/// Runs baseline, sparsity, prune and fine-tune, writing the seven artifacts to
/// `out_dir`. With `resume`, only the named checkpoint in `out_dir` is read and
/// the stages before it are skipped; metrics are appended to the existing log.
pub fn run_pipeline(
    cfg: &RunConfig,
    rate: f64,
    out_dir: &Path,
    resume: Option<ResumeFrom>,
    log: &mut dyn Write,
) -> Result<PipelineSummary> {
    if !(0.0..1.0).contains(&rate) {
        return Err(VtpError::Config(format!("--rate {rate} outside [0, 1)")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| VtpError::io(out_dir, e))?;
    let path = |name: &str| -> PathBuf { out_dir.join(name) };
    let metrics = path(METRICS_LOG);
    if resume.is_none() && metrics.exists() {
        std::fs::remove_file(&metrics).map_err(|e| VtpError::io(&metrics, e))?;
    }
    let data = Datasets::new(cfg)?;
    let mut say = |line: String| {
        let _ = writeln!(log, "{line}");
    };

    let mut baseline_eval_acc = None;
    let mut sparse_eval_acc = None;
    let mut pruned = match resume {
        Some(ResumeFrom::Pruned) => Some(
            tagged("prune", load_expecting(&path(PRUNED_CKPT), cfg, StageTag::Pruned))?.model,
        ),
        _ => None,
    };
    if pruned.is_none() {
        let sparse = match resume {
            Some(ResumeFrom::Sparse) => {
                tagged("sparsity", load_expecting(&path(SPARSE_CKPT), cfg, StageTag::Sparsity))?
                    .model
            }
            _ => {
                let baseline = match resume {
                    Some(ResumeFrom::Baseline) => tagged(
                        "baseline",
                        load_expecting(&path(BASELINE_CKPT), cfg, StageTag::Baseline),
                    )?
                    .model,
                    _ => tagged("baseline", (|| {
                        let model = VitModel::init(&cfg.model_config(), cfg.train_baseline.seed)?;
                        let (ckpt, report) =
                            run_stage(model, &data, &cfg.stage_config(Stage::Baseline))?;
                        save_checkpoint(&ckpt, &path(BASELINE_CKPT))?;
                        append_metrics(&metrics, &report.history)?;
                        Ok(ckpt.model)
                    })())?,
                };
                let acc = evaluate(&baseline, &data.eval, 100)?;
                say(format!("stage=baseline eval_acc={acc:.4}"));
                baseline_eval_acc = Some(acc);
                tagged("sparsity", (|| {
                    let (ckpt, report) =
                        run_stage(baseline, &data, &cfg.stage_config(Stage::Sparsity))?;
                    save_checkpoint(&ckpt, &path(SPARSE_CKPT))?;
                    append_metrics(&metrics, &report.history)?;
                    Ok(ckpt.model)
                })())?
            }
        };
        let acc = evaluate(&sparse, &data.eval, 100)?;
        say(format!("stage=sparsity eval_acc={acc:.4}"));
        sparse_eval_acc = Some(acc);
        pruned = Some(tagged("prune", (|| {
            let (hard, plan, _) = prune_model(&sparse, rate)?;
            say(format!(
                "stage=prune pruned={} of={} achieved_rate={:.4}",
                plan.total_pruned(),
                plan.total_scores(),
                plan.achieved_rate
            ));
            let ckpt = Checkpoint {
                model: hard,
                stage: StageTag::Pruned,
                optimizer: None,
                rng: None,
            };
            save_checkpoint(&ckpt, &path(PRUNED_CKPT))?;
            Ok(ckpt.model)
        })())?);
    }
    let pruned = pruned.expect("set above");
    let pruned_eval_acc = evaluate(&pruned, &data.eval, 100)?;
    say(format!("stage=prune eval_acc={pruned_eval_acc:.4}"));

    let (final_model, report) = tagged("finetune", (|| {
        let (ckpt, report) = run_stage(pruned, &data, &cfg.stage_config(Stage::Finetune))?;
        save_checkpoint(&ckpt, &path(FINAL_CKPT))?;
        append_metrics(&metrics, &report.history)?;
        let cost = CostReport::for_model(&ckpt.model)?;
        write_report(&cost, &path(REPORT_TXT), &path(REPORT_KV))?;
        Ok((ckpt.model, cost))
    })())?;
    let final_eval_acc = evaluate(&final_model, &data.eval, 100)?;
    say(format!("stage=finetune eval_acc={final_eval_acc:.4}"));

    Ok(PipelineSummary {
        baseline_eval_acc,
        sparse_eval_acc,
        pruned_eval_acc,
        final_eval_acc,
        report,
    })
}
