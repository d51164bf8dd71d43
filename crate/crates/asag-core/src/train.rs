//! Optimizer, training loop, early stopping, deterministic seeding, and
//! the binary checkpoint format.
//!
//! A single thread owns the parameters and optimizer state for the whole
//! run; everything random flows from one root seed through named
//! substreams, so `(seed, config, dataset)` determines every parameter
//! bit-exactly after every step.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batches, AnswerPair, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{accuracy, auc, score_pairs, ScoredExample};
use crate::model::{batch_loss, init_params, model_forward, ModelConfig, ModelParams};
use crate::nn::Dropout;
use crate::scalar::Scalar;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Named substreams split from one root seed. Each label maps to an
/// independent generator, so adding a new consumer never perturbs the
/// draws an existing one sees.
#[derive(Debug, Clone, Copy)]
pub struct SeedStreams {
    root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        SeedStreams { root }
    }

    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        let mut bytes = self.root.to_le_bytes().to_vec();
        bytes.extend_from_slice(label.as_bytes());
        ChaCha8Rng::seed_from_u64(fnv1a(&bytes))
    }
}

/// One root generator for a run.
pub fn set_global_seed(seed: u64) -> SeedStreams {
    SeedStreams::new(seed)
}

/// Optimizer hyperparameters and the training-loop knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation-AUC improvement.
    pub patience: Option<usize>,
    /// Global-norm gradient clipping threshold.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 20,
            patience: Some(5),
            grad_clip: Some(5.0),
        }
    }
}

struct AdamSlot<F: Scalar> {
    name: String,
    m: Vec<F>,
    v: Vec<F>,
}

/// Bias-corrected Adam. Moment buffers mirror the parameter tensors in
/// [`ModelParams::named_tensors`] order.
pub struct AdamState<F: Scalar = f64> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    pub step: u64,
    slots: Vec<AdamSlot<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ModelParams<F>, cfg: &TrainConfig) -> Self {
        let slots = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| AdamSlot {
                name,
                m: vec![F::zero(); t.numel()],
                v: vec![F::zero(); t.numel()],
            })
            .collect();
        AdamState {
            lr: F::from_f64(cfg.learning_rate),
            beta1: F::from_f64(cfg.beta1),
            beta2: F::from_f64(cfg.beta2),
            epsilon: F::from_f64(cfg.epsilon),
            step: 0,
            slots,
        }
    }
}

/// One bias-corrected update from the gradients currently stored on the
/// parameter tensors. Gradients are left untouched; the caller zeroes
/// them between steps. A missing gradient counts as zero.
pub fn adam_step<F: Scalar>(state: &mut AdamState<F>, params: &ModelParams<F>) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = F::one() - state.beta1.powi(t);
    let bias2 = F::one() - state.beta2.powi(t);
    let one = F::one();
    for ((_, tensor), slot) in params.named_tensors().into_iter().zip(&mut state.slots) {
        let grad = match tensor.grad() {
            Some(g) => g,
            None => vec![F::zero(); tensor.numel()],
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {}", slot.name),
            });
        }
        tensor.with_data_mut(|data| {
            for i in 0..data.len() {
                slot.m[i] = state.beta1 * slot.m[i] + (one - state.beta1) * grad[i];
                slot.v[i] = state.beta2 * slot.v[i] + (one - state.beta2) * grad[i] * grad[i];
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                data[i] = data[i] - state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
            }
        });
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm.
pub fn clip_gradients<F: Scalar>(params: &ModelParams<F>, max_norm: f64) -> f64 {
    let mut total = 0.0f64;
    let named = params.named_tensors();
    for (_, t) in &named {
        if let Some(g) = t.grad() {
            for v in g {
                let v = v.to_f64_lossy();
                total += v * v;
            }
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for (_, t) in &named {
            if let Some(g) = t.grad() {
                let scaled: Vec<F> = g.into_iter().map(|v| v * scale).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

/// Metrics of one completed epoch. The wall time is informational and
/// never written to the metrics file (the file must be byte-identical
/// across reruns of the same seed).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_auc: f64,
    pub wall_time_s: f64,
}

impl EpochRecord {
    pub fn metrics_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch,
            self.train_loss,
            self.train_accuracy,
            self.val_loss,
            self.val_accuracy,
            self.val_auc
        )
    }

    pub fn console_line(&self) -> String {
        format!(
            "epoch {:>3}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}  val_auc {:.4}  ({:.1}s)",
            self.epoch,
            self.train_loss,
            self.train_accuracy,
            self.val_loss,
            self.val_accuracy,
            self.val_auc,
            self.wall_time_s
        )
    }
}

pub const METRICS_HEADER: &str = "epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc\tval_auc";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    /// Tab-separated metrics file: one header line, one line per epoch.
    pub fn metrics_file(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&e.metrics_line());
            out.push('\n');
        }
        out
    }
}

/// Copy of every parameter value at some training point.
pub struct ParamSnapshot<F: Scalar = f64> {
    pub epoch: usize,
    pub val_auc: f64,
    tensors: Vec<(String, Vec<F>)>,
}

impl<F: Scalar> ParamSnapshot<F> {
    pub fn capture(params: &ModelParams<F>, epoch: usize, val_auc: f64) -> Self {
        ParamSnapshot {
            epoch,
            val_auc,
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| (name, t.to_vec()))
                .collect(),
        }
    }

    pub fn restore(&self, params: &ModelParams<F>) -> Result<()> {
        for ((name, saved), (cur_name, tensor)) in
            self.tensors.iter().zip(params.named_tensors())
        {
            if *name != cur_name {
                return Err(Error::Checkpoint(format!(
                    "snapshot tensor {name} does not match parameter {cur_name}"
                )));
            }
            tensor.set_data(saved.clone())?;
        }
        Ok(())
    }
}

fn mean_log_loss(scored: &[ScoredExample]) -> f64 {
    let total: f64 = scored
        .iter()
        .map(|e| {
            let p = if e.label == 1 { e.score } else { 1.0 - e.score };
            -(p.max(1e-12)).ln()
        })
        .sum();
    total / scored.len() as f64
}

/// Minimize the mean cross entropy with Adam: per batch forward, loss,
/// backward, clip, step. Validation metrics are computed each epoch and
/// the best-validation-AUC parameter snapshot is retained. Training
/// aborts with a coordinate-bearing error if a loss turns non-finite.
pub fn fit<F: Scalar>(
    cfg: &TrainConfig,
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    train: &[AnswerPair],
    validation: &[AnswerPair],
) -> Result<(TrainReport, ParamSnapshot<F>)> {
    fit_with_progress(cfg, params, vocab, train, validation, &mut |_| {
        std::ops::ControlFlow::Continue(())
    })
}

/// [`fit`] with a per-epoch callback that can report progress and stop
/// training early.
pub fn fit_with_progress<F: Scalar>(
    cfg: &TrainConfig,
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    train: &[AnswerPair],
    validation: &[AnswerPair],
    progress: &mut dyn FnMut(&EpochRecord) -> std::ops::ControlFlow<()>,
) -> Result<(TrainReport, ParamSnapshot<F>)> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::EmptyInput(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let streams = set_global_seed(params.config.seed);
    let mut shuffle_rng = streams.stream("batch-shuffle");
    let dropout = (params.config.dropout_rate > 0.0)
        .then(|| Dropout::new(params.config.dropout_rate, streams.stream("dropout")));

    let mut adam = AdamState::new(params, cfg);
    let mut report = TrainReport::default();
    let mut best: Option<ParamSnapshot<F>> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let batches = make_batches(
            train,
            vocab,
            params.config.max_len,
            cfg.batch_size,
            &mut shuffle_rng,
            true,
        );
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_index, batch) in batches.iter().enumerate() {
            let probs = model_forward(params, batch, dropout.as_ref())?;
            let loss = batch_loss(&probs, &batch.labels)?;
            let loss_value = loss.item().to_f64_lossy();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("loss at epoch {epoch}, batch {batch_index}"),
                });
            }
            params.zero_grads();
            loss.backward()?;
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(params, max_norm);
            }
            adam_step(&mut adam, params)?;

            loss_sum += loss_value * batch.len() as f64;
            let pv = probs.data();
            for (b, &label) in batch.labels.iter().enumerate() {
                let right = pv[b * 2 + 1].to_f64_lossy() >= 0.5;
                if right == (label == 1) {
                    correct += 1;
                }
            }
        }

        let val_scored = score_pairs(params, vocab, validation)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss: mean_log_loss(&val_scored),
            val_accuracy: accuracy(&val_scored, 0.5)?,
            val_auc: auc(&val_scored)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        let improved = best
            .as_ref()
            .map_or(true, |b| record.val_auc > b.val_auc);
        if improved {
            best = Some(ParamSnapshot::capture(params, epoch, record.val_auc));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        let flow = progress(&record);
        report.epochs.push(record);
        if flow.is_break() {
            break;
        }
        if let Some(patience) = cfg.patience {
            if since_best > patience {
                break;
            }
        }
    }

    let best = best.unwrap_or_else(|| ParamSnapshot::capture(params, 0, f64::NAN));
    Ok((report, best))
}

// ---------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------
//
// Layout (little-endian):
//   u32  format version (1)
//   u64  config length, then that many bytes of UTF-8 `key=value` lines
//   repeated until 8 bytes remain:
//     u32 name length, name bytes,
//     u32 rank, rank x u64 extents,
//     numel x f64 row-major payload
//   u64  FNV-1a 64 checksum of all preceding bytes

pub const CHECKPOINT_VERSION: u32 = 1;
pub const VOCAB_SIDECAR: &str = "vocab.txt";

const CONFIG_KEYS: [&str; 12] = [
    "vocab_size",
    "d_emb",
    "d_model",
    "head_count",
    "d_ffn",
    "max_len",
    "encoder_layers",
    "aggregation_layers",
    "pooling_dim",
    "dropout_rate",
    "share_encoders",
    "seed",
];

pub fn config_to_kv(config: &ModelConfig) -> String {
    let mut out = String::new();
    for key in CONFIG_KEYS {
        let value = match key {
            "vocab_size" => config.vocab_size.to_string(),
            "d_emb" => config.d_emb.to_string(),
            "d_model" => config.d_model.to_string(),
            "head_count" => config.head_count.to_string(),
            "d_ffn" => config.d_ffn.to_string(),
            "max_len" => config.max_len.to_string(),
            "encoder_layers" => config.encoder_layers.to_string(),
            "aggregation_layers" => config.aggregation_layers.to_string(),
            "pooling_dim" => config.pooling_dim.to_string(),
            "dropout_rate" => config.dropout_rate.to_string(),
            "share_encoders" => config.share_encoders.to_string(),
            "seed" => config.seed.to_string(),
            _ => unreachable!(),
        };
        out.push_str(key);
        out.push('=');
        out.push_str(&value);
        out.push('\n');
    }
    out
}

pub fn config_from_kv(text: &str) -> Result<ModelConfig> {
    let mut config = ModelConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
            "config line {} is not key=value: {line:?}",
            lineno + 1
        )))?;
        let key = key.trim();
        let value = value.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("duplicate config key {key:?}")));
        }
        let bad = |_| Error::Config(format!("bad value {value:?} for {key}"));
        match key {
            "vocab_size" => config.vocab_size = value.parse().map_err(bad)?,
            "d_emb" => config.d_emb = value.parse().map_err(bad)?,
            "d_model" => config.d_model = value.parse().map_err(bad)?,
            "head_count" => config.head_count = value.parse().map_err(bad)?,
            "d_ffn" => config.d_ffn = value.parse().map_err(bad)?,
            "max_len" => config.max_len = value.parse().map_err(bad)?,
            "encoder_layers" => config.encoder_layers = value.parse().map_err(bad)?,
            "aggregation_layers" => config.aggregation_layers = value.parse().map_err(bad)?,
            "pooling_dim" => config.pooling_dim = value.parse().map_err(bad)?,
            "dropout_rate" => {
                config.dropout_rate = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))?
            }
            "share_encoders" => {
                config.share_encoders = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))?
            }
            "seed" => config.seed = value.parse().map_err(bad)?,
            _ => unreachable!(),
        }
    }
    Ok(config)
}

pub fn save_checkpoint<F: Scalar>(params: &ModelParams<F>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_blob = config_to_kv(&params.config).into_bytes();
    bytes.extend_from_slice(&(config_blob.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&config_blob);
    for (name, tensor) in params.named_tensors() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &extent in shape {
            bytes.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for v in tensor.data().iter() {
            bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    let checksum = fnv1a(&bytes);
    bytes.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, bytes)
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("file ends mid-record".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<ModelParams<F>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    if bytes.len() < 12 {
        return Err(Error::Checkpoint("file too short to hold a checkpoint".into()));
    }
    let body_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = fnv1a(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }

    let mut cursor = Cursor {
        bytes: &bytes[..body_len],
        pos: 0,
    };
    let version = cursor.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let config_len = cursor.u64()? as usize;
    let config_text = std::str::from_utf8(cursor.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;
    let config = config_from_kv(config_text)?;

    let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    while cursor.pos < body_len {
        let name_len = cursor.u32()? as usize;
        let name = std::str::from_utf8(cursor.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cursor.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cursor.take(numel * 8)?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, shape, values));
    }

    // Materialize the parameter structure from the config, then overwrite
    // every tensor with the stored payload, validating shapes by name.
    let params: ModelParams<F> =
        init_params(&config, &mut set_global_seed(config.seed).stream("init"))?;
    let named = params.named_tensors();
    if records.len() != named.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, config implies {}",
            records.len(),
            named.len()
        )));
    }
    for ((name, shape, values), (expected_name, tensor)) in records.into_iter().zip(named) {
        if name != expected_name {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor {name:?} where {expected_name:?} belongs"
            )));
        }
        if shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, config implies {:?}",
                tensor.shape()
            )));
        }
        tensor.set_data(values.into_iter().map(F::from_f64).collect())?;
        tensor.zero_grad();
    }
    Ok(params)
}

fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(VOCAB_SIDECAR)
}

/// Write the vocabulary (one token per line, id order) next to a
/// checkpoint so grading and evaluation need no other artifact.
pub fn write_vocab_sidecar(vocab: &Vocabulary, checkpoint: &Path) -> Result<()> {
    let path = sidecar_path(checkpoint);
    let mut out = String::new();
    for token in vocab.tokens() {
        out.push_str(token);
        out.push('\n');
    }
    std::fs::write(&path, out)
        .map_err(|e| Error::io(format!("writing vocabulary {}", path.display()), e))
}

pub fn load_vocab_sidecar(checkpoint: &Path) -> Result<Vocabulary> {
    let path = sidecar_path(checkpoint);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading vocabulary {}", path.display()), e))?;
    Vocabulary::from_id_ordered(text.lines().map(str::to_string).collect())
}
