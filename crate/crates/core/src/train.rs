//! Weighted log loss, the AdaGrad training loop and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::dataset::{BrandTable, EncodedInstance, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::models::{Model, ModelConfig, ModelParams};
use crate::nn::{Adagrad, Matrix, ParamTensors};

/// Probabilities are clamped into `[LOSS_CLAMP, 1 - LOSS_CLAMP]` before the log.
pub const LOSS_CLAMP: f64 = 1e-7;

/// `-ln p` for positives, `-w ln(1 - p)` for negatives.
pub fn instance_loss(p: f64, label: u8, negative_weight: f64) -> f64 {
    instance_loss_clamped(p, label, negative_weight, LOSS_CLAMP)
}

pub fn instance_loss_clamped(p: f64, label: u8, negative_weight: f64, clamp: f64) -> f64 {
    let p = p.clamp(clamp, 1.0 - clamp);
    if label == 1 {
        -p.ln()
    } else {
        -negative_weight * (1.0 - p).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adagrad_eps: f64,
    /// Weight `w` of the negative-instance loss.
    pub negative_weight: f64,
    pub clamp_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Workers per mini-batch. Results are deterministic for a fixed value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: Adagrad::DEFAULT_LR,
            adagrad_eps: Adagrad::DEFAULT_EPS,
            negative_weight: 0.5,
            clamp_eps: LOSS_CLAMP,
            clip_norm: 5.0,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Contract("batch size and threads must be at least 1".into()));
        }
        if !(self.negative_weight > 0.0 && self.negative_weight <= 1.0) {
            return Err(Error::Contract(format!(
                "negative weight must be in (0, 1], got {}",
                self.negative_weight
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) || !(self.clip_norm > 0.0) {
            return Err(Error::Contract("clamp epsilon and clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// AUC of the scores seen during the epoch (before each update).
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab_hash: String,
    pub params: ModelParams,
    pub optimizer: Adagrad,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn model(&self) -> Model {
        Model {
            config: self.model_config,
            params: self.params.clone(),
        }
    }

    /// Warning text when `vocab` is not the vocabulary the model was trained on.
    pub fn vocab_warning(&self, vocab: &Vocabulary) -> Option<String> {
        let found = vocab.fingerprint();
        (found != self.vocab_hash).then(|| {
            format!(
                "checkpoint was trained with vocabulary {}, data uses {}",
                self.vocab_hash, found
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochStats>,
}

/// Trains a fresh model from `config`-seeded initialization.
pub fn train(
    instances: &[EncodedInstance],
    table: &BrandTable,
    model_config: ModelConfig,
    config: TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if instances.is_empty() {
        return Err(Error::EmptyDataset("training set construction".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(model_config, &mut init_rng)?;
    let mut optimizer = Adagrad::new(&model.params, config.learning_rate, config.adagrad_eps)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);

    let mut buffers: Vec<ModelParams> = (0..config.threads).map(|_| model.params.zeros_like()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut scores = vec![0.0; instances.len()];
        let labels: Vec<u8> = order.iter().map(|&i| instances[i].label).collect();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let results = batch_gradients(&model, instances, table, batch, &config, &mut buffers)?;
            for (offset, (p, loss)) in results.into_iter().enumerate() {
                loss_sum += loss;
                scores[b * config.batch_size + offset] = p;
            }
            let (first, rest) = buffers.split_first_mut().expect("at least one buffer");
            for other in rest.iter() {
                first.add_assign(other);
            }
            first.scale(1.0 / batch.len() as f64);
            let norm = first.global_norm();
            if !norm.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient norm in epoch {epoch}")));
            }
            if norm > config.clip_norm {
                first.scale(config.clip_norm / norm);
            }
            optimizer.step(&mut model.params, first)?;
        }
        if !model.params.is_finite() {
            return Err(Error::Diverged(format!("parameters became non-finite in epoch {epoch}")));
        }
        let mean_loss = loss_sum / instances.len() as f64;
        let epoch_auc = auc(&scores, &labels).ok();
        log::info!(
            "epoch {}: mean loss {:.6}, auc {}",
            epoch + 1,
            mean_loss,
            epoch_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        trace.push(EpochStats {
            epoch: epoch + 1,
            mean_loss,
            auc: epoch_auc,
        });
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            model_config,
            train_config: config,
            vocab_hash: table.vocab.fingerprint(),
            params: model.params,
            optimizer,
        },
        trace,
    })
}

/// Fills `buffers` with per-worker gradient sums over `batch` and returns
/// `(p, loss)` per instance in batch order.
fn batch_gradients(
    model: &Model,
    instances: &[EncodedInstance],
    table: &BrandTable,
    batch: &[usize],
    config: &TrainConfig,
    buffers: &mut [ModelParams],
) -> Result<Vec<(f64, f64)>> {
    let work = |idx: &[usize], grads: &mut ModelParams| -> Result<Vec<(f64, f64)>> {
        grads.fill(0.0);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            let inst = &instances[i];
            let fwd = model.forward(inst, table)?;
            model.backward(inst, table, &fwd, config.negative_weight, grads)?;
            let loss = instance_loss_clamped(fwd.p, inst.label, config.negative_weight, config.clamp_eps);
            if !loss.is_finite() || !fwd.p.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss on training instance {i} (p = {})",
                    fwd.p
                )));
            }
            out.push((fwd.p, loss));
        }
        Ok(out)
    };

    if buffers.len() == 1 {
        return work(batch, &mut buffers[0]);
    }
    let chunk = batch.len().div_ceil(buffers.len());
    let parts: Vec<Result<Vec<(f64, f64)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = buffers
            .iter_mut()
            .enumerate()
            .map(|(w, grads)| {
                let lo = (w * chunk).min(batch.len());
                let hi = ((w + 1) * chunk).min(batch.len());
                let idx = &batch[lo..hi];
                let work = &work;
                scope.spawn(move || work(idx, grads))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(batch.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint file
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TensorOut<'a> {
    name: &'a str,
    shape: [usize; 2],
    values: Box<RawValue>,
}

#[derive(Deserialize)]
struct TensorIn {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize)]
struct OptimizerOut<'a> {
    learning_rate: f64,
    eps: f64,
    accumulators: Vec<TensorOut<'a>>,
}

#[derive(Deserialize)]
struct OptimizerIn {
    learning_rate: f64,
    eps: f64,
    accumulators: Vec<TensorIn>,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    version: u32,
    vocab_hash: &'a str,
    model_config: &'a ModelConfig,
    train_config: &'a TrainConfig,
    value_count: usize,
    parameters: Vec<TensorOut<'a>>,
    optimizer: OptimizerOut<'a>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    vocab_hash: String,
    model_config: ModelConfig,
    train_config: TrainConfig,
    value_count: usize,
    parameters: Vec<TensorIn>,
    optimizer: OptimizerIn,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

/// 17 significant digits: enough for every `f64` to survive a text round trip.
fn format_values(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 25 + 2);
    s.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("{v:.16e}"));
    }
    s.push(']');
    s
}

fn tensor_out<'a>(name: &'a str, m: &Matrix) -> Result<TensorOut<'a>> {
    if !m.is_finite() {
        return Err(Error::NumericDomain(format!("tensor {name} holds non-finite values")));
    }
    Ok(TensorOut {
        name,
        shape: [m.rows(), m.cols()],
        values: RawValue::from_string(format_values(m.as_slice()))?,
    })
}

/// Serializes a checkpoint to its UTF-8 JSON text.
pub fn checkpoint_to_string(ckpt: &Checkpoint) -> Result<String> {
    let tensors = ckpt.params.tensors();
    let parameters = tensors
        .iter()
        .map(|(n, m)| tensor_out(n, m))
        .collect::<Result<Vec<_>>>()?;
    let accumulators = tensors
        .iter()
        .zip(ckpt.optimizer.accumulators())
        .map(|((n, _), m)| tensor_out(n, m))
        .collect::<Result<Vec<_>>>()?;
    let doc = CheckpointOut {
        version: Checkpoint::VERSION,
        vocab_hash: &ckpt.vocab_hash,
        model_config: &ckpt.model_config,
        train_config: &ckpt.train_config,
        value_count: ckpt.params.num_values(),
        parameters,
        optimizer: OptimizerOut {
            learning_rate: ckpt.optimizer.lr,
            eps: ckpt.optimizer.eps,
            accumulators,
        },
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

fn fill_tensors(
    target: Vec<(&'static str, &mut Matrix)>,
    source: Vec<TensorIn>,
    what: &str,
) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::CheckpointIntegrity(format!(
            "{what}: expected {} tensors, found {}",
            target.len(),
            source.len()
        )));
    }
    for ((name, m), t) in target.into_iter().zip(source) {
        if t.name != name || t.shape != [m.rows(), m.cols()] || t.values.len() != m.len() {
            return Err(Error::CheckpointIntegrity(format!(
                "{what}: tensor {} {:?} with {} values does not match expected {} {:?}",
                t.name,
                t.shape,
                t.values.len(),
                name,
                m.shape()
            )));
        }
        m.as_mut_slice().copy_from_slice(&t.values);
    }
    Ok(())
}

/// Parses checkpoint text produced by [`checkpoint_to_string`].
pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let probe: VersionProbe = serde_json::from_str(text)
        .map_err(|e| Error::CheckpointIntegrity(format!("unreadable checkpoint: {e}")))?;
    if probe.version != Checkpoint::VERSION {
        return Err(Error::CheckpointVersion {
            found: probe.version,
            expected: Checkpoint::VERSION,
        });
    }
    let doc: CheckpointIn = serde_json::from_str(text)
        .map_err(|e| Error::CheckpointIntegrity(format!("malformed checkpoint: {e}")))?;
    let mut params = ModelParams::zeros(&doc.model_config)
        .map_err(|e| Error::CheckpointIntegrity(e.to_string()))?;
    fill_tensors(params.tensors_mut(), doc.parameters, "parameters")?;
    if params.num_values() != doc.value_count {
        return Err(Error::CheckpointIntegrity(format!(
            "value count {} does not match {}",
            doc.value_count,
            params.num_values()
        )));
    }
    let mut accumulators = params.zeros_like();
    fill_tensors(accumulators.tensors_mut(), doc.optimizer.accumulators, "optimizer")?;
    let accumulators = accumulators.tensors().into_iter().map(|(_, m)| m.clone()).collect();
    Ok(Checkpoint {
        model_config: doc.model_config,
        train_config: doc.train_config,
        vocab_hash: doc.vocab_hash,
        params,
        optimizer: Adagrad::from_accumulators(doc.optimizer.learning_rate, doc.optimizer.eps, accumulators),
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let text = checkpoint_to_string(ckpt)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
