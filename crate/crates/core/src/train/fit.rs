use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::mean_species_rmse;
use crate::model::{Checkpoint, NormMode, PhenoFormer, CHECKPOINT_FORMAT};
use crate::rng::stream;
use crate::synth::Dataset;

use super::{
    fit_thermal_time, lambda_schedule, predict_thermal_time, BatchStream, Method, Selection, ThermalTimeModel,
    TrainConfig, Trainer,
};

const HOLDOUT_STREAM: u64 = 4;
const THERMAL_FORMAT: &str = "thermal-time-checkpoint";

/// Index sets of one run. `target` holds the unlabeled target-domain inputs
/// used by adaptation methods; their labels are never read.
#[derive(Clone, Copy, Debug)]
pub struct FitData<'a> {
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub target: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    /// Mean domain-objective value (rank, binary or CORAL term).
    pub train_rank: f64,
    pub val_rmse: f64,
}

#[derive(Clone, Debug)]
pub enum FittedModel {
    Neural(Box<PhenoFormer>),
    ThermalTime(ThermalTimeModel),
}

#[derive(Serialize, Deserialize)]
struct ThermalCheckpoint {
    format: String,
    model: ThermalTimeModel,
}

impl FittedModel {
    /// Day-of-year predictions on target-domain inputs.
    pub fn predict(&self, data: &Dataset, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Neural(m) => m.predict(&data.series(idx), NormMode::TargetEval),
            Self::ThermalTime(m) => Ok(predict_thermal_time(m, data, idx)),
        }
    }

    /// `(channels, days, species)` the model expects.
    pub fn layout(&self) -> (Option<usize>, Option<usize>, usize) {
        match self {
            Self::Neural(m) => (Some(m.config().channels), Some(m.config().seq_len), m.config().species),
            Self::ThermalTime(m) => (None, None, m.species.len()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            Self::Neural(m) => m.save(path),
            Self::ThermalTime(m) => {
                let ck = ThermalCheckpoint {
                    format: THERMAL_FORMAT.into(),
                    model: m.clone(),
                };
                fs::write(path, serde_json::to_vec(&ck)?)?;
                Ok(())
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {
                let ck: Checkpoint = serde_json::from_value(value)?;
                Ok(Self::Neural(Box::new(PhenoFormer::from_checkpoint(ck)?)))
            }
            Some(THERMAL_FORMAT) => {
                let ck: ThermalCheckpoint = serde_json::from_value(value)?;
                Ok(Self::ThermalTime(ck.model))
            }
            other => Err(Error::Checkpoint(format!("unknown checkpoint format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: FittedModel,
    pub curves: Vec<EpochRecord>,
    /// 1-based epoch of the kept model; 0 for models without epochs.
    pub selected_epoch: usize,
    pub epochs_trained: usize,
    pub wall_clock_s: f64,
}

/// Trains `cfg.method` and keeps the epoch with the lowest validation RMSE
/// (mean over species). The batch-norm baseline is adapted to the target
/// inputs after selection.
pub fn fit(data: &Dataset, split: FitData<'_>, cfg: &TrainConfig) -> Result<RunResult> {
    let started = Instant::now();
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::EmptyPartition("train".into()));
    }
    if cfg.method == Method::ThermalTime {
        let model = fit_thermal_time(data, split.train, &cfg.thermal)?;
        return Ok(RunResult {
            model: FittedModel::ThermalTime(model),
            curves: Vec::new(),
            selected_epoch: 0,
            epochs_trained: 0,
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
    }

    let (train, val, val_mode) = match cfg.selection {
        Selection::TargetValidation => (split.train.to_vec(), split.val.to_vec(), NormMode::TargetEval),
        Selection::SourceHoldout { fraction } => {
            let mut order = split.train.to_vec();
            order.shuffle(&mut stream(cfg.seed, &[HOLDOUT_STREAM]));
            let n = ((fraction * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
            let holdout = order.split_off(order.len() - n);
            order.sort_unstable();
            (order, holdout, NormMode::SourceEval)
        }
    };
    let val_labels = data.labels(&val);
    if !val_labels.iter().any(|l| l.iter().any(Option::is_some)) {
        return Err(Error::EmptyPartition("validation set has no labels".into()));
    }

    let mut trainer = Trainer::new(data, &train, cfg.clone())?;
    let mut batches = if trainer.recipe().uses_target() {
        BatchStream::balanced(&train, split.target, cfg.batch_size, cfg.seed)?
    } else {
        BatchStream::source_only(&train, cfg.batch_size, cfg.seed)?
    };
    let total_steps = (cfg.max_epochs * batches.batches_per_epoch()) as f64;
    let val_series = data.series(&val);

    let mut curves = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, PhenoFormer)> = None;
    for epoch in 1..=cfg.max_epochs {
        let epoch_batches = batches.epoch();
        let (mut mse, mut adv) = (0.0, 0.0);
        for batch in &epoch_batches {
            let lambda = cfg
                .fixed_lambda
                .unwrap_or_else(|| lambda_schedule(trainer.steps() as f64 / total_steps, cfg.steepness));
            let losses = trainer.step(batch, lambda)?;
            mse += losses.mse;
            adv += losses.adversarial;
        }
        let n = epoch_batches.len() as f64;
        let preds = trainer.model().predict(&val_series, val_mode)?;
        let val_rmse = mean_species_rmse(&val_labels, &preds, data.species);
        curves.push(EpochRecord {
            epoch,
            train_mse: mse / n,
            train_rank: adv / n,
            val_rmse,
        });
        log::debug!("{} epoch {epoch}: train_mse {:.4} val_rmse {val_rmse:.3}", cfg.method, mse / n);
        if best.as_ref().is_none_or(|(b, _, _)| val_rmse < *b) {
            best = Some((val_rmse, epoch, trainer.model().clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }

    let epochs_trained = curves.len();
    let (_, selected_epoch, mut model) = best.expect("at least one epoch");
    if trainer.recipe().batch_norm {
        model.adapt_batch_norm(&data.series(split.target), NormMode::TargetEval)?;
    }
    Ok(RunResult {
        model: FittedModel::Neural(Box::new(model)),
        curves,
        selected_epoch,
        epochs_trained,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}
