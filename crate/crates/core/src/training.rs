//! Mini-batch training with selective freezing, early stopping on a held
//! out slice of the training pairs, and evaluation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::checkpoint::{Checkpoint, RngPositions};
use crate::dataset::{PairDataset, PairRecord};
use crate::encoders::EmbeddingStore;
use crate::error::{Error, Result};
use crate::heads::Prediction;
use crate::metrics::{report, MetricsReport, ScoredBatch};
use crate::model::{pair_inputs, Architecture, Model, ModelConfig};
use crate::nn::Mode;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::splits::{validate_split, SplitManifest};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Share of the manifest's train pairs held out for early stopping.
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default)]
    pub model: ModelConfig,
}

mod defaults {
    pub fn epochs() -> usize {
        50
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn val_fraction() -> f64 {
        0.1
    }
    pub fn patience() -> usize {
        10
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            adam: AdamConfig::default(),
            val_fraction: defaults::val_fraction(),
            patience: defaults::patience(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        self.adam.validate()?;
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-pair loss over the epoch's mini-batches (dropout active).
    pub train_loss: f64,
    /// Mean per-pair loss over the training pairs in eval mode.
    pub train_eval_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub stopped: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation loss (the last epoch when there is no validation
    /// slice).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochLog>,
    /// Set when a numeric fault ended training; `last` then holds the last
    /// good state.
    pub fault: Option<String>,
}

// purposes of the derived random streams
const STREAM_VALIDATION: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, purpose, a, b)`.
pub fn substream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(splitmix(seed) ^ purpose) ^ a) ^ b);
    ChaCha8Rng::seed_from_u64(key)
}

/// Splits the manifest's train ids into `(train, validation)`.
pub fn validation_split(cfg: &TrainConfig, train_ids: &[String]) -> (Vec<String>, Vec<String>) {
    let n = train_ids.len();
    let k = ((cfg.val_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    if k == 0 {
        return (train_ids.to_vec(), Vec::new());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(cfg.seed, STREAM_VALIDATION, 0, 0));
    let mut val: Vec<usize> = idx[..k].to_vec();
    let mut train: Vec<usize> = idx[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (
        train.into_iter().map(|i| train_ids[i].clone()).collect(),
        val.into_iter().map(|i| train_ids[i].clone()).collect(),
    )
}

fn check_inputs(cfg: &TrainConfig, ds: &PairDataset, manifest: &SplitManifest) -> Result<()> {
    cfg.validate()?;
    if cfg.model.label_space != ds.space {
        return Err(Error::Config(format!(
            "model label space {:?} does not match dataset {:?}",
            cfg.model.label_space, ds.space
        )));
    }
    if manifest.dataset_sha256 != ds.sha256() {
        return Err(Error::InvalidManifest("manifest was generated for a different dataset".into()));
    }
    let violations = validate_split(ds, manifest)?;
    if let Some(v) = violations.first() {
        return Err(Error::InvalidManifest(format!(
            "{} violation(s), first: {:?} on {:?}: {}",
            violations.len(),
            v.rule,
            v.pair_id,
            v.detail
        )));
    }
    if manifest.train.is_empty() {
        return Err(Error::EmptyInput("manifest has no training pairs".into()));
    }
    Ok(())
}

struct EvalPass {
    mean_loss: f64,
    acc: f64,
}

fn eval_pass(arch: &Architecture, params: &ParamStore, recs: &[&PairRecord]) -> Result<EvalPass> {
    let rows: Vec<(f64, bool)> = recs
        .par_iter()
        .map(|r| {
            let mut g = Graph::new();
            let (a, b) = pair_inputs(r);
            let logits = arch.logits_graph(&mut g, params, &a, &b, &mut Mode::Eval)?;
            let space = arch.label_space();
            let class = space.class_index(r.label)?;
            let loss = crate::heads::loss_graph(&mut g, logits, class, &space)?;
            let pred = crate::heads::probs_from_logits(g.value(logits).data(), &space)?;
            Ok((g.value(loss).data()[0], pred.argmax() == class))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    Ok(EvalPass {
        mean_loss: rows.iter().map(|r| r.0).sum::<f64>() / n,
        acc: rows.iter().filter(|r| r.1).count() as f64 / n,
    })
}

/// Loss and summed gradients of one mini-batch, reduced in batch order.
fn batch_gradients(
    arch: &Architecture,
    params: &ParamStore,
    recs: &[&PairRecord],
    idx: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<(f64, Gradients)> {
    let dropout = arch.config.dropout;
    let parts: Vec<(f64, Gradients)> = idx
        .par_iter()
        .map(|&i| {
            let mut rng = substream(seed, STREAM_DROPOUT, epoch as u64, i as u64);
            let mut mode = Mode::Train { dropout, rng: &mut rng };
            let mut g = Graph::new();
            let loss = arch.pair_loss_graph(&mut g, params, recs[i], &mut mode)?;
            let value = g.value(loss).data()[0];
            Ok((value, g.backward(loss)?))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grads = Gradients::default();
    for (l, g) in &parts {
        total += l;
        grads.accumulate(g);
    }
    Ok((total, grads))
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    arch: Architecture,
    train: Vec<&'a PairRecord>,
    val: Vec<&'a PairRecord>,
    dataset_sha256: String,
}

impl Trainer<'_> {
    fn snapshot(&self, params: &ParamStore, opt: &AdamState, epoch: usize, history: &[EpochLog], es: &EarlyStopState) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: params.clone(),
            optimizer: opt.clone(),
            epoch,
            history: history.to_vec(),
            rng: RngPositions {
                seed: self.cfg.seed,
                next_epoch: epoch,
            },
            early_stop: es.clone(),
            dataset_sha256: self.dataset_sha256.clone(),
        }
    }

    fn run(&self, start: Checkpoint, best: Option<Checkpoint>) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let mut params = start.params;
        let mut opt = start.optimizer;
        let mut history = start.history;
        let mut es = start.early_stop;
        let mut best = best;
        let mut fault = None;
        let mut last_epoch = start.epoch;
        let n = self.train.len();

        for epoch in start.epoch..cfg.epochs {
            if es.stopped {
                break;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut substream(cfg.seed, STREAM_SHUFFLE, epoch as u64, 0));
            let mut loss_sum = 0.0;
            let mut faulted = false;
            let before = (params.clone(), opt.clone());
            for chunk in order.chunks(cfg.batch_size) {
                let (loss, mut grads) = batch_gradients(&self.arch, &params, &self.train, chunk, cfg.seed, epoch)?;
                if !loss.is_finite() {
                    fault = Some(format!("non-finite loss in epoch {}", epoch + 1));
                    faulted = true;
                    break;
                }
                grads.scale(1.0 / chunk.len() as f64);
                match adam_step(&mut params, &grads, &mut opt, &cfg.adam) {
                    Ok(()) => {}
                    Err(Error::NumericFault(m)) => {
                        fault = Some(format!("epoch {}: {m}", epoch + 1));
                        faulted = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
                loss_sum += loss;
            }
            if faulted {
                // roll back to the end of the last complete epoch
                params = before.0;
                opt = before.1;
                break;
            }
            let train_eval = eval_pass(&self.arch, &params, &self.train)?;
            let val = if self.val.is_empty() {
                None
            } else {
                Some(eval_pass(&self.arch, &params, &self.val)?)
            };
            history.push(EpochLog {
                epoch: epoch + 1,
                train_loss: loss_sum / n as f64,
                train_eval_loss: train_eval.mean_loss,
                train_acc: train_eval.acc,
                val_loss: val.as_ref().map(|v| v.mean_loss),
                val_acc: val.as_ref().map(|v| v.acc),
            });
            last_epoch = epoch + 1;

            let improved = match (&val, es.best_val_loss) {
                (None, _) => true,
                (Some(v), None) => v.mean_loss.is_finite(),
                (Some(v), Some(b)) => v.mean_loss < b,
            };
            if improved {
                es.best_val_loss = val.as_ref().map(|v| v.mean_loss);
                es.best_epoch = epoch + 1;
                es.epochs_since_best = 0;
            } else {
                es.epochs_since_best += 1;
                if cfg.patience > 0 && es.epochs_since_best >= cfg.patience {
                    es.stopped = true;
                }
            }
            if improved {
                best = Some(self.snapshot(&params, &opt, epoch + 1, &history, &es));
            }
        }

        let last = self.snapshot(&params, &opt, last_epoch, &history, &es);
        let mut best = best.unwrap_or_else(|| last.clone());
        // the best snapshot carries the full history for reporting
        best.history = history.clone();
        Ok(TrainOutcome {
            best,
            last,
            history,
            fault,
        })
    }
}

fn trainer<'a>(
    cfg: &'a TrainConfig,
    ds: &'a PairDataset,
    manifest: &SplitManifest,
    embeddings: Option<Arc<EmbeddingStore>>,
) -> Result<Trainer<'a>> {
    check_inputs(cfg, ds, manifest)?;
    let mut arch = Architecture::new(cfg.model.clone())?;
    if let Some(e) = embeddings {
        arch = arch.with_embeddings(e);
    }
    let (train_ids, val_ids) = validation_split(cfg, &manifest.train);
    Ok(Trainer {
        cfg,
        arch,
        train: ds.select(&train_ids)?,
        val: ds.select(&val_ids)?,
        dataset_sha256: ds.sha256(),
    })
}

/// Trains from freshly initialized parameters.
pub fn train(cfg: &TrainConfig, ds: &PairDataset, manifest: &SplitManifest) -> Result<TrainOutcome> {
    train_with_embeddings(cfg, ds, manifest, None)
}

pub fn train_with_embeddings(
    cfg: &TrainConfig,
    ds: &PairDataset,
    manifest: &SplitManifest,
    embeddings: Option<Arc<EmbeddingStore>>,
) -> Result<TrainOutcome> {
    let t = trainer(cfg, ds, manifest, embeddings)?;
    let params = t.arch.init_params(cfg.seed);
    let opt = AdamState::new(&params);
    let start = t.snapshot(&params, &opt, 0, &[], &EarlyStopState::default());
    t.run(start, None)
}

/// Continues a run from `last` up to `epochs`. `best` is the best snapshot
/// of the interrupted run; when omitted, `last` stands in for it if it was
/// the best epoch. Resuming from the last and best checkpoints of a shorter
/// run reproduces the longer run.
pub fn resume(
    last: &Checkpoint,
    best: Option<&Checkpoint>,
    ds: &PairDataset,
    manifest: &SplitManifest,
    epochs: usize,
) -> Result<TrainOutcome> {
    let mut cfg = last.config.clone();
    cfg.epochs = epochs;
    let t = trainer(&cfg, ds, manifest, None)?;
    t.arch.check_params(&last.params)?;
    if last.dataset_sha256 != t.dataset_sha256 {
        return Err(Error::Checkpoint("checkpoint was trained on a different dataset".into()));
    }
    let best = match best {
        Some(b) => {
            t.arch.check_params(&b.params)?;
            Some(b.clone())
        }
        None if last.epoch > 0 && last.early_stop.best_epoch == last.epoch => Some(last.clone()),
        None => None,
    }
    .map(|mut b| {
        b.config = cfg.clone();
        b
    });
    let mut start = last.clone();
    start.config = cfg.clone();
    t.run(start, best)
}

/// Parameters a run starts from (the reference point for drift).
pub fn initial_params(cfg: &TrainConfig) -> Result<ParamStore> {
    Ok(Architecture::new(cfg.model.clone())?.init_params(cfg.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairPrediction {
    pub pair_id: String,
    pub label: i64,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub predictions: Vec<PairPrediction>,
}

/// Eval-mode forward over `pair_ids` followed by the metrics report.
pub fn evaluate(arch: &Architecture, params: &ParamStore, ds: &PairDataset, pair_ids: &[String]) -> Result<Evaluation> {
    if arch.label_space() != ds.space {
        return Err(Error::Config(format!(
            "model label space {:?} does not match dataset {:?}",
            arch.label_space(),
            ds.space
        )));
    }
    arch.check_params(params)?;
    let recs = ds.select(pair_ids)?;
    if recs.is_empty() {
        return Err(Error::EmptyInput("no pairs to evaluate".into()));
    }
    let preds: Vec<Prediction> = recs
        .par_iter()
        .map(|r| {
            let (a, b) = pair_inputs(r);
            arch.predict(params, &a, &b)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<i64> = recs.iter().map(|r| r.label).collect();
    let metrics = report(&ScoredBatch::new(&preds, &labels, ds.space)?)?;
    Ok(Evaluation {
        metrics,
        predictions: recs
            .iter()
            .zip(preds)
            .map(|(r, p)| PairPrediction {
                pair_id: r.pair_id.clone(),
                label: r.label,
                probs: p.probs,
            })
            .collect(),
    })
}

/// Evaluates a checkpoint, possibly on a dataset it was not trained on,
/// and verifies that its parameters are byte-identical afterwards.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    ds: &PairDataset,
    pair_ids: &[String],
    embeddings: Option<Arc<EmbeddingStore>>,
) -> Result<Evaluation> {
    let mut arch = Architecture::new(ckpt.config.model.clone())?;
    if let Some(e) = embeddings {
        arch = arch.with_embeddings(e);
    }
    let before = ckpt.params.bytes_with_prefix("");
    let out = evaluate(&arch, &ckpt.params, ds, pair_ids)?;
    if ckpt.params.bytes_with_prefix("") != before {
        return Err(Error::Checkpoint("parameters changed during evaluation".into()));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        let arch = Architecture::new(self.config.model.clone())?;
        arch.check_params(&self.params)?;
        Ok(Model {
            arch,
            params: self.params.clone(),
        })
    }
}
