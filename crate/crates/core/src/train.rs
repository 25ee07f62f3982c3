//! Training stages and evaluation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::graph::Graph;
use crate::model::{Mode, VitModel};
use crate::optim::{cosine_lr, AdamWConfig, OptimizerState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Baseline,
    Sparsity,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Baseline, Stage::Sparsity, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Sparsity => "sparsity",
            Stage::Finetune => "finetune",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    /// ChaCha stream of the stage's shuffling RNG.
    pub fn stream(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// ℓ1 weight on the importance scores; nonzero only for the sparsity stage.
    pub lambda: f64,
    pub seed: u64,
    /// Optimizer steps between metric records.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return fail(format!(
                "{}: epochs, batch_size and eval_every must be >= 1",
                self.stage.name()
            ));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return fail(format!(
                "{}: need 0 <= min_lr ({}) <= base_lr ({})",
                self.stage.name(),
                self.min_lr,
                self.base_lr
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("{}: weight_decay must be >= 0", self.stage.name()));
        }
        let sparse = self.stage == Stage::Sparsity;
        if sparse != (self.lambda > 0.0) || !(self.lambda >= 0.0) {
            return fail(format!(
                "{}: lambda {} must be > 0 exactly for the sparsity stage",
                self.stage.name(),
                self.lambda
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// One metric record, emitted every `eval_every` steps and after the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub stage: Stage,
    /// Optimizer steps completed.
    pub step: usize,
    pub lr: f64,
    /// Mean training objective over the steps since the previous record.
    pub loss: f64,
    pub eval_acc: f64,
    /// Median `|â|` over all gates (soft models only).
    pub gate_median_abs: Option<f64>,
    pub gate_q10_abs: Option<f64>,
    pub gate_q90_abs: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<MetricRecord>,
    pub optimizer: OptimizerState,
    pub steps: usize,
    /// Shuffle-stream position after training, for checkpointing.
    pub rng_word_pos: u128,
}

/// `q`-quantile (nearest rank) of all `|â|`, or `None` for pruned models.
pub fn gate_quantile(model: &VitModel, q: f64) -> Option<f64> {
    let mut mags: Vec<f64> = model
        .gates()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
        .collect();
    if mags.is_empty() {
        return None;
    }
    mags.sort_by(f64::total_cmp);
    let idx = (libm::round(q * (mags.len() - 1) as f64) as usize).min(mags.len() - 1);
    Some(mags[idx])
}

/// Median of all `|â|` (mean of the two middle values for even counts).
pub fn gate_median_abs(model: &VitModel) -> Option<f64> {
    let mut mags: Vec<f64> = model
        .gates()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
        .collect();
    if mags.is_empty() {
        return None;
    }
    mags.sort_by(f64::total_cmp);
    let n = mags.len();
    Some(if n % 2 == 1 {
        mags[n / 2]
    } else {
        0.5 * (mags[n / 2 - 1] + mags[n / 2])
    })
}

fn check_compatible(model: &VitModel, split: &Dataset) -> Result<()> {
    let c = &model.config;
    if split.channels != c.in_channels
        || split.image_size != c.image_size
        || split.num_classes != c.num_classes
    {
        return Err(Error::Config(format!(
            "dataset ({} channels, {}px, {} classes) does not fit model ({} channels, {}px, {} classes)",
            split.channels, split.image_size, split.num_classes, c.in_channels, c.image_size, c.num_classes
        )));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Top-1 predictions for every sample, in order.
pub fn predict(model: &VitModel, split: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    check_compatible(model, split)?;
    let all: Vec<usize> = (0..split.len()).collect();
    let mut out = Vec::with_capacity(split.len());
    for chunk in all.chunks(batch_size.max(1)) {
        let (images, _) = split.batch(chunk);
        let logits = model.logits(&images)?;
        out.extend(logits.data().chunks_exact(model.config.num_classes).map(argmax));
    }
    Ok(out)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &VitModel, split: &Dataset, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(model, split, batch_size)?;
    let correct = preds.iter().zip(&split.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / split.len() as f64)
}

/// Runs one training stage in place.
///
/// Objective is cross-entropy, plus `lambda · Σ|â|` when `lambda > 0`. The
/// learning rate follows a cosine decay over all steps. Gates of soft models
/// are trained in every stage and never weight-decayed.
pub fn train(model: &mut VitModel, train: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(model, train)?;
    check_compatible(model, eval)?;
    match (cfg.stage, model.is_pruned()) {
        (Stage::Finetune, false) => {
            return Err(Error::State("finetune stage expects a pruned model".into()))
        }
        (Stage::Baseline | Stage::Sparsity, true) => {
            return Err(Error::State(format!(
                "{} stage expects an unpruned gated model",
                cfg.stage.name()
            )))
        }
        _ => {}
    }
    let mode: Mode = model.mode();
    let decay: Vec<bool> = model.params().iter().map(|(_, k, _)| k.decays()).collect();
    let mut opt = OptimizerState::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.params().iter().map(|(_, _, t)| t.len()),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stage.stream());

    let per_epoch = cfg.steps_per_epoch(train.len());
    let total = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total, cfg.base_lr, cfg.min_lr);
            let (images, labels) = train.batch(chunk);
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &images, mode)?;
            let mut loss = g.cross_entropy(fwd.logits, &labels)?;
            if cfg.lambda > 0.0 {
                let penalty = g.l1_penalty(&fwd.gates, cfg.lambda)?;
                loss = g.add(loss, penalty)?;
            }
            let loss_value = g.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::NumericalAbort {
                    step,
                    lr,
                    loss: loss_value,
                });
            }
            let grads = g.backward(loss)?;
            model.store_grads(&grads, &fwd)?;
            {
                let mut params: Vec<_> = model.params_mut().into_iter().map(|(_, _, t)| t).collect();
                opt.step(&mut params, &decay, lr)?;
            }
            model.zero_grad();
            loss_sum += loss_value;
            loss_count += 1;
            step += 1;
            if step % cfg.eval_every == 0 || step == total {
                history.push(MetricRecord {
                    stage: cfg.stage,
                    step,
                    lr,
                    loss: loss_sum / loss_count as f64,
                    eval_acc: evaluate(model, eval, 100)?,
                    gate_median_abs: gate_median_abs(model),
                    gate_q10_abs: gate_quantile(model, 0.1),
                    gate_q90_abs: gate_quantile(model, 0.9),
                });
                loss_sum = 0.0;
                loss_count = 0;
            }
        }
    }
    Ok(TrainReport {
        history,
        optimizer: opt,
        steps: step,
        rng_word_pos: rng.get_word_pos(),
    })
}
