//! The staged training protocol.
//!
//! Task-dependent and multi-task networks are trained in three stages:
//! encoder and decoder alone on the segmentation loss, then only the final
//! classification layer with everything else frozen, then the whole network
//! end to end. The single-task baseline has no decoder and runs one
//! end-to-end stage on the classification loss.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{SliceWindow, WindowBatch};
use crate::error::{Error, Result};
use crate::eval;
use crate::loss::{self, LossConfig};
use crate::model::{ArchConfig, Model, ParamStore, Variant};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Element;

pub const FINAL_LAYER: [&str; 2] = ["head.final.weight", "head.final.bias"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    /// Encoder and decoder on the segmentation loss.
    Segmentation,
    /// Final classification layer only.
    FinalLayer,
    /// Everything.
    EndToEnd,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Segmentation, Stage::FinalLayer, Stage::EndToEnd];

    pub fn number(self) -> u8 {
        match self {
            Stage::Segmentation => 1,
            Stage::FinalLayer => 2,
            Stage::EndToEnd => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Stage> {
        match n {
            1 => Ok(Stage::Segmentation),
            2 => Ok(Stage::FinalLayer),
            3 => Ok(Stage::EndToEnd),
            _ => Err(Error::invalid(format!("no training stage {n}; stages are 1, 2 and 3"))),
        }
    }

    /// Segmentation weight used by this stage.
    ///
    /// The single-task network has no segmentation output, so its only
    /// stage runs at zero.
    pub fn lambda(self, variant: Variant) -> f64 {
        if !variant.has_decoder() {
            return 0.0;
        }
        match self {
            Stage::Segmentation => 1.0,
            Stage::FinalLayer => 0.0,
            Stage::EndToEnd => 0.5,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Names of the parameters updated during `stage`.
pub fn freeze_mask<T: Element>(model: &Model<T>, stage: Stage) -> Result<BTreeSet<String>> {
    let variant = model.variant();
    if stage != Stage::EndToEnd && !variant.has_decoder() {
        return Err(Error::invalid(format!(
            "stage {stage} needs a segmentation decoder, which {variant} does not have"
        )));
    }
    let keep = |name: &str| match stage {
        Stage::Segmentation => ["enc.", "bottleneck.", "dec."].iter().any(|p| name.starts_with(p)),
        Stage::FinalLayer => FINAL_LAYER.contains(&name),
        Stage::EndToEnd => true,
    };
    Ok(model.param_names().filter(|n| keep(n)).map(String::from).collect())
}

/// Stages a variant goes through, in order.
pub fn stages_for(variant: Variant) -> &'static [Stage] {
    if variant.has_decoder() {
        &Stage::ALL
    } else {
        &[Stage::EndToEnd]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Negative windows drawn per positive window each epoch; infinity
    /// uses every window.
    pub negatives_per_positive: f64,
    /// Keep the parameters from the epoch with the best validation AUC.
    pub select_best_epoch: bool,
}

impl StageConfig {
    pub fn new(stage: Stage, variant: Variant) -> Self {
        StageConfig {
            stage,
            lambda: stage.lambda(variant),
            epochs: 1,
            batch_size: 16,
            shuffle_seed: 0,
            negatives_per_positive: 3.0,
            select_best_epoch: false,
        }
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        let expected = self.stage.lambda(variant);
        if self.lambda != expected {
            return Err(Error::config(format!(
                "stage {} of {variant} trains with lambda {expected}, got {}",
                self.stage, self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.negatives_per_positive > 0.0) {
            return Err(Error::config(format!(
                "negatives_per_positive must be positive, got {}",
                self.negatives_per_positive
            )));
        }
        Ok(())
    }
}

/// Settings for a full protocol run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs for stages 1, 2 and 3.
    pub stage_epochs: [usize; 3],
    /// Epochs for the single-task network's one stage. Defaults to the sum
    /// of `stage_epochs`, so every variant sees the data equally often.
    pub single_task_epochs: Option<usize>,
    pub batch_size: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    /// Negative windows drawn per positive window each epoch; `inf` uses
    /// every window.
    pub negatives_per_positive: f64,
    /// Restore the best-validation-AUC epoch at the end of the last stage.
    pub select_best_epoch: bool,
    /// Optimizer steps per learning-rate decay. Defaults to the number of
    /// steps in one epoch of the stage being trained.
    pub decay_period: Option<u64>,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage_epochs: [8, 4, 8],
            single_task_epochs: None,
            batch_size: 16,
            init_seed: 0,
            shuffle_seed: 0,
            negatives_per_positive: 3.0,
            select_best_epoch: true,
            decay_period: None,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.negatives_per_positive > 0.0) {
            return Err(Error::config("negatives_per_positive must be positive"));
        }
        if self.decay_period == Some(0) {
            return Err(Error::config("decay_period must be positive"));
        }
        Ok(())
    }

    pub fn stage_config(&self, stage: Stage, variant: Variant) -> StageConfig {
        let epochs = if variant.has_decoder() {
            self.stage_epochs[stage.number() as usize - 1]
        } else {
            self.single_task_epochs
                .unwrap_or_else(|| self.stage_epochs.iter().sum())
        };
        StageConfig {
            epochs,
            batch_size: self.batch_size,
            shuffle_seed: self.shuffle_seed,
            negatives_per_positive: self.negatives_per_positive,
            select_best_epoch: self.select_best_epoch && stage == Stage::EndToEnd,
            ..StageConfig::new(stage, variant)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Counts across all stages.
    pub step: u64,
    pub effective_lr: f64,
    pub l_cls: f64,
    pub l_seg: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub lambda: f64,
    pub epochs: usize,
    pub steps: u64,
    pub trainable_params: usize,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageRecord>,
}

impl TrainLog {
    pub fn last_step(&self) -> Option<u64> {
        self.steps.last().map(|s| s.step)
    }

    fn next_step(&self) -> u64 {
        self.last_step().map_or(0, |s| s + 1)
    }

    pub fn write_steps_csv(&self, w: impl Write) -> Result<()> {
        write_csv(w, &self.steps)
    }

    pub fn write_epochs_csv(&self, w: impl Write) -> Result<()> {
        write_csv(w, &self.epochs)
    }

    pub fn write_stages_csv(&self, w: impl Write) -> Result<()> {
        write_csv(w, &self.stages)
    }

    /// Writes `train_steps.csv`, `train_epochs.csv` and `train_stages.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_steps_csv(std::fs::File::create(dir.join("train_steps.csv"))?)?;
        self.write_epochs_csv(std::fs::File::create(dir.join("train_epochs.csv"))?)?;
        self.write_stages_csv(std::fs::File::create(dir.join("train_stages.csv"))?)?;
        Ok(())
    }
}

pub(crate) fn write_csv<R: Serialize>(w: impl Write, rows: &[R]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for row in rows {
        csv.serialize(row).map_err(csv_error)?;
    }
    csv.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::format("csv", format!("{other:?}")),
    }
}

/// Window order for one epoch: every positive plus a seeded draw of
/// negatives, shuffled together.
pub fn epoch_order(
    windows: &[SliceWindow],
    negatives_per_positive: f64,
    seed: u64,
    stage: Stage,
    epoch: usize,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage.number() as u64) << 32) | epoch as u64);
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        (0..windows.len()).partition(|&i| windows[i].label == 1);
    if negatives_per_positive.is_finite() && !pos.is_empty() {
        let want = ((pos.len() as f64 * negatives_per_positive).round() as usize).min(neg.len());
        neg.shuffle(&mut rng);
        neg.truncate(want);
    }
    pos.append(&mut neg);
    pos.shuffle(&mut rng);
    pos
}

/// Optimizer steps in one epoch of `config` over `windows`.
pub fn steps_per_epoch(windows: &[SliceWindow], config: &StageConfig) -> usize {
    let positives = windows.iter().filter(|w| w.label == 1).count();
    let negatives = windows.len() - positives;
    let len = if config.negatives_per_positive.is_finite() && positives > 0 {
        positives + ((positives as f64 * config.negatives_per_positive).round() as usize).min(negatives)
    } else {
        windows.len()
    };
    len.div_ceil(config.batch_size.max(1))
}

struct StepLosses {
    l_cls: f64,
    l_seg: f64,
    l_total: f64,
}

/// Forward, backward and one optimizer update on a single batch.
fn train_step<T: Element>(
    model: &mut Model<T>,
    batch: &WindowBatch<T>,
    trainable: &BTreeSet<String>,
    loss_config: &LossConfig,
    adam: &mut AdamState<T>,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &batch.images, &batch.voxel_volumes, |n| {
        trainable.contains(n)
    })?;
    let l_cls = loss::classification_loss(&mut g, &batch.labels, out.cls, loss_config)?;
    let (l_seg, l_total) = match out.seg {
        Some(seg) => {
            let l_seg = loss::segmentation_loss(&mut g, &batch.masks, seg, loss_config)?;
            (Some(l_seg), loss::combined_loss(&mut g, l_cls, l_seg, loss_config.lambda)?)
        }
        None => (None, l_cls),
    };
    let losses = StepLosses {
        l_cls: g.value(l_cls).item().map_or(f64::NAN, Element::to_f64),
        l_seg: l_seg.map_or(0.0, |v| g.value(v).item().map_or(f64::NAN, Element::to_f64)),
        l_total: g.value(l_total).item().map_or(f64::NAN, Element::to_f64),
    };
    if !losses.l_total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = g.backward(l_total)?.into_named();
    adam.step(model.params_mut(), &grads)?;
    Ok(losses)
}

/// Slice-level AUC of `model` on `windows`, or `None` when they hold a
/// single class.
pub fn validation_auc<T: Element>(
    model: &Model<T>,
    windows: &[SliceWindow],
    batch_size: usize,
) -> Result<Option<f64>> {
    let labels: Vec<bool> = windows.iter().map(|w| w.label == 1).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Ok(None);
    }
    let scores: Vec<f64> = model
        .predict_windows(windows, batch_size)?
        .into_iter()
        .map(Element::to_f64)
        .collect();
    eval::roc_auc(&labels, &scores).map(Some)
}

/// Run one stage, updating only the parameters in its freeze mask.
///
/// A non-finite loss or gradient aborts with [`Error::Diverged`]; the
/// model then holds the parameters after the last good step.
pub fn train_stage<T: Element>(
    model: &mut Model<T>,
    train: &[SliceWindow],
    validation: Option<&[SliceWindow]>,
    config: &StageConfig,
    loss_config: &LossConfig,
    adam: &mut AdamState<T>,
    log: &mut TrainLog,
) -> Result<()> {
    config.validate(model.variant())?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let trainable = freeze_mask(model, config.stage)?;
    let loss_config = LossConfig {
        lambda: config.lambda,
        ..loss_config.clone()
    };
    loss_config.validate()?;

    let first_step = log.next_step();
    let mut best: Option<(usize, f64, ParamStore<T>)> = None;
    for epoch in 0..config.epochs {
        let order = epoch_order(
            train,
            config.negatives_per_positive,
            config.shuffle_seed,
            config.stage,
            epoch,
        );
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&SliceWindow> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = WindowBatch::from_windows(&refs)?;
            let step = log.next_step();
            let effective_lr = adam.effective_lr();
            let losses = train_step(model, &batch, &trainable, &loss_config, adam).map_err(|e| {
                if e.is_numerical() {
                    Error::Diverged {
                        stage: config.stage.to_string(),
                        step,
                        last_good_step: log.last_step().filter(|&s| s >= first_step),
                    }
                } else {
                    e
                }
            })?;
            total += losses.l_total;
            batches += 1;
            log.steps.push(StepRecord {
                stage: config.stage.number(),
                epoch,
                step,
                effective_lr,
                l_cls: losses.l_cls,
                l_seg: losses.l_seg,
                l_total: losses.l_total,
            });
        }
        let val_auc = match validation {
            Some(v) => validation_auc(model, v, config.batch_size.max(32))?,
            None => None,
        };
        log.epochs.push(EpochRecord {
            stage: config.stage.number(),
            epoch,
            mean_loss: total / batches.max(1) as f64,
            val_auc,
        });
        if config.select_best_epoch {
            if let Some(auc) = val_auc {
                if best.as_ref().is_none_or(|(_, b, _)| auc > *b) {
                    best = Some((epoch, auc, model.params().clone()));
                }
            }
        }
    }

    let (best_epoch, best_val_auc) = match best {
        Some((epoch, auc, params)) => {
            *model.params_mut() = params;
            (Some(epoch), Some(auc))
        }
        None => (None, None),
    };
    log.stages.push(StageRecord {
        stage: config.stage.number(),
        lambda: config.lambda,
        epochs: config.epochs,
        steps: log.next_step() - first_step,
        trainable_params: trainable.len(),
        best_epoch,
        best_val_auc,
    });
    Ok(())
}

/// Initialise a network and run every stage of its protocol, each with a
/// fresh optimizer.
pub fn run_protocol<T: Element>(
    arch: &ArchConfig,
    config: &TrainConfig,
    train: &[SliceWindow],
    validation: Option<&[SliceWindow]>,
) -> Result<(Model<T>, TrainLog)> {
    config.validate()?;
    let mut model = Model::new(arch, config.init_seed)?;
    let mut log = TrainLog::default();
    for &stage in stages_for(arch.variant) {
        let stage_config = config.stage_config(stage, arch.variant);
        let decay_period = match config.decay_period {
            Some(p) => p,
            None => steps_per_epoch(train, &stage_config) as u64,
        };
        let mut adam = AdamState::new(AdamConfig {
            decay_period: decay_period.max(1),
            ..config.adam.clone()
        })?;
        train_stage(
            &mut model,
            train,
            validation,
            &stage_config,
            &config.loss,
            &mut adam,
            &mut log,
        )?;
    }
    Ok((model, log))
}
