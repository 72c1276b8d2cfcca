//! Losses, learning-rate schedule and the mini-batch training loop shared
//! by query-prediction pretraining and keyphrase fine-tuning.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compute::checkpoint::{encode_checkpoint, load_checkpoint, write_atomic};
use crate::compute::{Adam, Gradients, ParamStore, Tape};
use crate::dataset::{to_jsonl, IngestedDocument};
use crate::doc::{build_labels, truncate, Document, SpanTarget};
use crate::error::{Error, Result};
use crate::model::{SpanDistribution, SpanModel};

/// A document paired with its span-level target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub document: Document,
    pub target: SpanTarget,
}

/// Truncates and labels documents. Documents without labels or without any
/// matchable gold phrase are returned as `(id, reason)` pairs.
pub fn prepare_examples(
    docs: &[IngestedDocument],
    max_len: usize,
    max_ngram: usize,
) -> (Vec<Example>, Vec<(String, String)>) {
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for d in docs {
        let Some(mut labeled) = d.labeled() else {
            skipped.push((d.document.id.clone(), "no keyphrases".to_string()));
            continue;
        };
        labeled.document = truncate(&labeled.document, max_len);
        match build_labels(&labeled, max_ngram) {
            Ok(target) => examples.push(Example {
                document: labeled.document,
                target,
            }),
            Err(e) => skipped.push((d.document.id.clone(), e.to_string())),
        }
    }
    (examples, skipped)
}

/// `−Σ y·log f` over all spans. Target mass on a masked span is an error.
pub fn keyphrase_loss(distribution: &SpanDistribution, target: &SpanTarget) -> Result<f64> {
    if distribution.probs.len() != target.target.len() {
        return Err(Error::Shape(format!(
            "distribution has {} spans, target {}",
            distribution.probs.len(),
            target.target.len()
        )));
    }
    let mut loss = 0.0;
    for ((&y, &f), &valid) in target.target.iter().zip(&distribution.probs).zip(&distribution.mask) {
        if y > 0.0 {
            if !valid {
                return Err(Error::InvalidTarget("target mass on a masked span".into()));
            }
            loss -= y * f.ln();
        }
    }
    Ok(loss)
}

/// Same functional form as [`keyphrase_loss`], over click-query targets.
pub fn query_prediction_loss(distribution: &SpanDistribution, target: &SpanTarget) -> Result<f64> {
    keyphrase_loss(distribution, target)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Pretrain,
    #[default]
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Steps over which the learning rate decays; defaults to
    /// `max_epochs · ⌈train / batch_size⌉`.
    pub planned_total_steps: Option<u64>,
    pub validation_fraction: f64,
    pub max_len: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr_start: 1e-3,
            lr_end: 1e-4,
            batch_size: 16,
            max_epochs: 20,
            seed: 0,
            planned_total_steps: None,
            validation_fraction: 0.1,
            max_len: 256,
        }
    }
}

impl TrainingConfig {
    pub fn full_scale() -> Self {
        Self {
            lr_start: 0.3,
            lr_end: 0.001,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Geometric interpolation from `lr_start` to `lr_end` over `total_steps`,
/// constant `lr_end` afterwards.
pub fn lr_schedule(step: u64, total_steps: u64, lr_start: f64, lr_end: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_end;
    }
    let t = step as f64 / total_steps as f64;
    (lr_start.ln() + t * (lr_end.ln() - lr_start.ln())).exp()
}

/// Seeded split into `(train, validation)`; the validation share is rounded down.
pub fn split_validation(examples: Vec<Example>, fraction: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let n_valid = (examples.len() as f64 * fraction).floor() as usize;
    if n_valid == 0 {
        return (examples, Vec::new());
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5B11));
    let valid_set: std::collections::HashSet<usize> = order[..n_valid].iter().copied().collect();
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (i, e) in examples.into_iter().enumerate() {
        if valid_set.contains(&i) {
            valid.push(e);
        } else {
            train.push(e);
        }
    }
    (train, valid)
}

/// Mini-batches of indices. Documents are ordered by length with random
/// tie-breaking, cut into batches, and the batch order is shuffled.
pub fn make_batches<R: Rng>(lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut keyed: Vec<(usize, u64, usize)> = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| (len, rng.gen::<u64>(), i))
        .collect();
    keyed.sort_unstable();
    let mut batches: Vec<Vec<usize>> = keyed
        .chunks(batch_size.max(1))
        .map(|c| c.iter().map(|&(_, _, i)| i).collect())
        .collect();
    batches.shuffle(rng);
    batches
}

fn mix_seed(seed: u64, step: u64, slot: u64) -> u64 {
    let mut z = seed
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(slot.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and parameter gradients for one example. With `dropout_seed`
/// set, dropout is active.
pub fn example_gradient(
    model: &SpanModel,
    store: &ParamStore,
    example: &Example,
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients)> {
    let mut tape = match dropout_seed {
        Some(seed) => Tape::training(store, ChaCha8Rng::seed_from_u64(seed)),
        None => Tape::new(store),
    };
    let loss = model.loss(&mut tape, &example.document, &example.target)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

/// Mean inference-mode loss over `examples`.
pub fn mean_loss(model: &SpanModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let losses = examples
        .par_iter()
        .map(|e| keyphrase_loss(&model.distribution(&e.document)?, &e.target))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub skipped_documents: usize,
    pub validation_loss: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub mode: TrainingMode,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub total_steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    Stop,
}

/// Examples ready for a run plus the number excluded during preparation.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub skipped: usize,
}

/// Trains `model` in place. After each epoch `on_epoch` sees the record and
/// the current model and may stop the run. When validation data exists the
/// parameters with the lowest validation loss are restored at the end.
pub fn run_training(
    model: &mut SpanModel,
    data: &TrainingData,
    config: &TrainingConfig,
    mode: TrainingMode,
    on_epoch: &mut dyn FnMut(&EpochRecord, &SpanModel) -> Result<EpochControl>,
) -> Result<TrainRunRecord> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let batches_per_epoch = data.train.len().div_ceil(config.batch_size) as u64;
    let total_steps = config
        .planned_total_steps
        .unwrap_or(batches_per_epoch * config.max_epochs as u64);
    let lengths: Vec<usize> = data.train.iter().map(|e| e.document.len()).collect();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::default();
    let mut step = 0u64;
    let mut record = TrainRunRecord {
        mode,
        epochs: Vec::new(),
        best_epoch: None,
        total_steps: 0,
    };
    let mut best: Option<(f64, ParamStore)> = None;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut lr = config.lr_start;
        for batch in make_batches(&lengths, config.batch_size, &mut batch_rng) {
            lr = lr_schedule(step, total_steps, config.lr_start, config.lr_end);
            let store = &model.params;
            let frozen_model: &SpanModel = model;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let seed = mix_seed(config.seed, step, slot as u64);
                    example_gradient(frozen_model, store, &data.train[i], Some(seed))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / results.len() as f64;
            let mut batch_loss = 0.0;
            for (loss, _) in &results {
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            for (_, grads) in &results {
                model.params.accumulate(grads, scale);
            }
            adam.step(&mut model.params, lr)?;
            loss_sum += batch_loss;
            step += 1;
        }
        let validation_loss = if data.validation.is_empty() {
            None
        } else {
            Some(mean_loss(model, &data.validation)?)
        };
        let rec = EpochRecord {
            epoch,
            step,
            learning_rate: lr,
            mean_loss: loss_sum / data.train.len() as f64,
            skipped_documents: data.skipped,
            validation_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        match validation_loss {
            Some(v) if best.as_ref().map_or(true, |(b, _)| v < *b) => {
                best = Some((v, model.params.clone()));
                record.best_epoch = Some(epoch);
            }
            None => record.best_epoch = Some(epoch),
            _ => {}
        }
        record.epochs.push(rec.clone());
        record.total_steps = step;
        if on_epoch(&rec, model)? == EpochControl::Stop {
            break;
        }
    }
    if let Some((_, params)) = best {
        model.params.load_values(&params)?;
    }
    Ok(record)
}

/// Layout: `config.json`, `metrics.jsonl`, `epoch-N.ckpt`, `best.ckpt`.
#[derive(Clone, Debug)]
pub struct RunDirectory {
    root: PathBuf,
    records: Vec<EpochRecord>,
}

impl RunDirectory {
    pub fn create(root: &Path, config_json: &str) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        write_atomic(&root.join("config.json"), config_json.as_bytes())?;
        Ok(Self {
            root: root.to_path_buf(),
            records: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        self.records.push(record.clone());
        write_atomic(&self.root.join("metrics.jsonl"), to_jsonl(&self.records)?.as_bytes())
    }

    pub fn save_epoch(&self, model: &SpanModel, epoch: usize) -> Result<PathBuf> {
        let path = self.root.join(format!("epoch-{epoch}.ckpt"));
        write_atomic(&path, &encode_checkpoint(&model.snapshot_json(), &model.params))?;
        Ok(path)
    }

    pub fn save_best(&self, model: &SpanModel) -> Result<PathBuf> {
        let path = self.root.join("best.ckpt");
        write_atomic(&path, &encode_checkpoint(&model.snapshot_json(), &model.params))?;
        Ok(path)
    }
}

/// Accepts a checkpoint file, a run directory, or an alias such as
/// `run/best` naming `run/best.ckpt`.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if path.is_dir() {
        let best = path.join("best.ckpt");
        if best.is_file() {
            return Ok(best);
        }
    }
    let with_ext = path.with_extension("ckpt");
    if with_ext.is_file() {
        return Ok(with_ext);
    }
    Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())))
}

pub fn load_model(path: &Path) -> Result<SpanModel> {
    SpanModel::from_checkpoint(&load_checkpoint(&resolve_checkpoint(path)?)?)
}
