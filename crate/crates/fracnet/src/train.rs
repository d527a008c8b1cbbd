//! The optimization loop: shuffled epochs of forward/loss/backward/Adam,
//! a validation pass per epoch, plateau scheduling on the validation loss,
//! and best-validation-loss checkpointing.
//!
//! Training is deterministic for a fixed seed: batch order, dropout masks,
//! and parameter updates all derive from it, and the persisted log and
//! checkpoint bytes are identical across runs.

use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::data::DataError;
use crate::fixture::{self, FixtureError, RawTensor};
use crate::graph::{Graph, Mode};
use crate::metrics::{ConfusionCounts, MetricsError};
use crate::model::{self, ModelError, ModelSpec};
use crate::optim::{adam_step, AdamState, OptimError, PlateauConfig};
use crate::params::Params;
use crate::rng::derive_seed;
use crate::tensor::{argmax_rows, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training requires non-empty train and validation splits")]
    EmptySplit,
    #[error("training requires at least one epoch")]
    NoEpochs,
    #[error("log line {line}: {reason}")]
    MalformedLogRow { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub scheduler: PlateauConfig,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            beta1: crate::optim::DEFAULT_BETA1,
            beta2: crate::optim::DEFAULT_BETA2,
            epsilon: crate::optim::DEFAULT_EPSILON,
            scheduler: PlateauConfig::default(),
            seed: 42,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Per-epoch history. Wall-clock times ride along for reporting but are not
/// part of the persisted log or of equality.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub wall_secs: Vec<f64>,
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

pub const LOG_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == LOG_HEADER => {}
            Some((_, header)) => {
                return Err(TrainError::MalformedLogRow {
                    line: 1,
                    reason: format!("unexpected header {header:?}"),
                })
            }
            None => {
                return Err(TrainError::MalformedLogRow {
                    line: 1,
                    reason: "empty log".into(),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(TrainError::MalformedLogRow {
                    line: i + 1,
                    reason: format!("expected 6 fields, got {}", fields.len()),
                });
            }
            let parse_f = |s: &str| -> Result<f64, TrainError> {
                s.trim().parse().map_err(|_| TrainError::MalformedLogRow {
                    line: i + 1,
                    reason: format!("bad number {s:?}"),
                })
            };
            let epoch: usize =
                fields[0]
                    .trim()
                    .parse()
                    .map_err(|_| TrainError::MalformedLogRow {
                        line: i + 1,
                        reason: format!("bad epoch {:?}", fields[0]),
                    })?;
            records.push(EpochRecord {
                epoch,
                train_loss: parse_f(fields[1])?,
                train_acc: parse_f(fields[2])?,
                val_loss: parse_f(fields[3])?,
                val_acc: parse_f(fields[4])?,
                lr: parse_f(fields[5])?,
            });
        }
        Ok(Self {
            records,
            wall_secs: Vec::new(),
        })
    }
}

/// A split loaded into memory: normalized image tensors plus class indices.
#[derive(Debug, Clone, Default)]
pub struct LoadedSplit {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn stack_batch(data: &LoadedSplit, indices: &[usize]) -> Tensor<f32> {
    let sample_shape = data.images[indices[0]].shape().to_vec();
    let per = data.images[indices[0]].numel();
    let mut buf = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        buf.extend_from_slice(data.images[i].data());
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&sample_shape);
    Tensor::from_vec(&shape, buf).expect("stacked batch shape")
}

fn one_hot(data: &LoadedSplit, indices: &[usize], classes: usize) -> Tensor<f32> {
    let mut buf = vec![0.0f32; indices.len() * classes];
    for (row, &i) in indices.iter().enumerate() {
        buf[row * classes + data.labels[i]] = 1.0;
    }
    Tensor::from_vec(&[indices.len(), classes], buf).expect("one-hot shape")
}

/// Eval-mode pass over a split in manifest order: mean per-sample loss,
/// accuracy, and confusion counts.
pub fn eval_pass(
    spec: &ModelSpec,
    params: &mut Params<f32>,
    data: &LoadedSplit,
    batch_size: usize,
) -> Result<(f64, f64, ConfusionCounts), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let n = data.len();
    let mut loss_sum = 0.0f64;
    let mut predictions = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = stack_batch(data, chunk);
        let t = one_hot(data, chunk, spec.num_classes);
        let mut g = Graph::new();
        let logits = model::forward(spec, params, &mut g, &x, Mode::Eval, 0)?;
        let loss = g.softmax_cross_entropy(logits, &t)?;
        loss_sum += g.value(loss).data()[0] as f64 * chunk.len() as f64;
        predictions.extend(argmax_rows(g.value(logits)));
    }
    let counts = ConfusionCounts::from_predictions(&predictions, &data.labels)?;
    let correct = predictions
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok((loss_sum / n as f64, correct as f64 / n as f64, counts))
}

/// Eval-mode confusion counts over a split (argmax over the two logits,
/// ties to class 0).
pub fn evaluate(
    spec: &ModelSpec,
    params: &mut Params<f32>,
    data: &LoadedSplit,
    batch_size: usize,
) -> Result<ConfusionCounts, TrainError> {
    let (_, _, counts) = eval_pass(spec, params, data, batch_size)?;
    Ok(counts)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_params: Params<f32>,
    pub best_adam: AdamState<f32>,
}

/// Runs the full loop: per epoch, seeded-shuffled train batches through
/// forward / cross-entropy / backward / Adam, then a validation pass; the
/// plateau rule adjusts the rate from the validation-loss history and the
/// minimum-validation-loss parameters are kept as the checkpoint.
pub fn train(
    spec: &ModelSpec,
    params: &mut Params<f32>,
    train_data: &LoadedSplit,
    val_data: &LoadedSplit,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if train_data.is_empty() || val_data.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if config.epochs == 0 {
        return Err(TrainError::NoEpochs);
    }
    let mut adam = AdamState::new(params, config.beta1, config.beta2, config.epsilon);
    let mut lr = config.learning_rate;
    let mut log = TrainLog::default();
    let mut val_history: Vec<f64> = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Params<f32>, AdamState<f32>)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let batches = crate::data::make_batches(
            train_data.len(),
            config.batch_size,
            config.seed,
            epoch,
            false,
        )?;
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let x = stack_batch(train_data, batch);
            let t = one_hot(train_data, batch, spec.num_classes);
            let mut g = Graph::new();
            let dropout_seed = derive_seed(config.seed, &[0xd09, epoch as u64, bi as u64]);
            let logits = model::forward(spec, params, &mut g, &x, Mode::Train, dropout_seed)?;
            let loss_node = g.softmax_cross_entropy(logits, &t)?;
            let loss = g.value(loss_node).data()[0] as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += loss * batch.len() as f64;
            correct += argmax_rows(g.value(logits))
                .iter()
                .zip(batch.iter().map(|&i| train_data.labels[i]))
                .filter(|(p, l)| **p == *l)
                .count();

            params.zero_grads();
            let grads = g.backward(loss_node)?;
            grads.accumulate_into(params);
            adam_step(params, &mut adam, lr, config.grad_clip)?;
        }
        let train_loss = loss_sum / train_data.len() as f64;
        let train_acc = correct as f64 / train_data.len() as f64;

        let (val_loss, val_acc, _) = eval_pass(spec, params, val_data, config.batch_size)?;
        val_history.push(val_loss);

        let is_best = best
            .as_ref()
            .map(|(_, b, _, _)| val_loss < *b)
            .unwrap_or(true);
        if is_best {
            best = Some((epoch, val_loss, params.clone(), adam.clone()));
        }

        log.records.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            lr,
        });
        log.wall_secs.push(started.elapsed().as_secs_f64());

        lr = crate::optim::plateau_schedule(
            &val_history,
            lr,
            config.scheduler.factor,
            config.scheduler.patience,
            config.scheduler.min_lr,
        );
    }

    let (best_epoch, best_val_loss, best_params, best_adam) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_loss,
        best_params,
        best_adam,
    })
}

// ---- checkpoint container ------------------------------------------------------

pub const CHECKPOINT_MODEL: &str = "model.json";
pub const CHECKPOINT_PARAMS: &str = "params.tnsr";
pub const CHECKPOINT_OPTIMIZER: &str = "optimizer.tnsr";
pub const CHECKPOINT_LOG: &str = "log.csv";

/// Writes the checkpoint directory: model.json, params.tnsr, optimizer.tnsr,
/// and log.csv. All bytes are deterministic for identical inputs.
pub fn save_checkpoint(
    dir: &Path,
    spec: &ModelSpec,
    params: &Params<f32>,
    adam: &AdamState<f32>,
    log: &TrainLog,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = model::model_to_json(spec)?;
    let hash = model::arch_hash(spec)?;
    std::fs::write(dir.join(CHECKPOINT_MODEL), &json).map_err(io_err(dir))?;

    let mut params_buf = Vec::new();
    fixture::write_params(&mut params_buf, hash, params)?;
    std::fs::write(dir.join(CHECKPOINT_PARAMS), params_buf).map_err(io_err(dir))?;

    let mut entries: Vec<(String, RawTensor)> = Vec::new();
    let trainable: Vec<&str> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(_, e)| e.name.as_str())
        .collect();
    for ((m, v), name) in adam.moments().zip(&trainable) {
        let shape = [m.len()];
        entries.push((
            format!("{name}.m"),
            RawTensor::from_tensor(&Tensor::from_vec(&shape, m.to_vec())?),
        ));
        entries.push((
            format!("{name}.v"),
            RawTensor::from_tensor(&Tensor::from_vec(&shape, v.to_vec())?),
        ));
    }
    entries.push((
        "__step".into(),
        RawTensor::from_tensor(&Tensor::from_vec(&[1], vec![adam.step_count() as f32])?),
    ));
    let mut opt_buf = Vec::new();
    fixture::write_container(&mut opt_buf, hash, &entries)?;
    std::fs::write(dir.join(CHECKPOINT_OPTIMIZER), opt_buf).map_err(io_err(dir))?;

    std::fs::write(dir.join(CHECKPOINT_LOG), log.to_csv()).map_err(io_err(dir))?;
    Ok(())
}

/// Restores the architecture and parameters, verifying the architecture
/// fingerprint recorded in the parameter container.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelSpec, Params<f32>), TrainError> {
    let model_path = dir.join(CHECKPOINT_MODEL);
    let json = std::fs::read_to_string(&model_path).map_err(io_err(&model_path))?;
    let spec = model::model_from_json(&json)?;
    let hash = model::arch_hash(&spec)?;
    let mut params: Params<f32> = model::init_params(&spec, 0)?;
    let params_path = dir.join(CHECKPOINT_PARAMS);
    let bytes = std::fs::read(&params_path).map_err(io_err(&params_path))?;
    fixture::read_params_into(&mut bytes.as_slice(), Some(hash), &mut params)?;
    Ok((spec, params))
}
