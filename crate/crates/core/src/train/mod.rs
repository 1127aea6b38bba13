//! Optimiser, schedule, training loops and checkpoints.

mod adam;
mod checkpoint;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_update, AdamConfig, AdamState, Moments};
pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, NamedTensor, MAGIC, VERSION,
};

use crate::data::{batch, sample_rng, Flips, PatchLabel, PatchSample, Sample};
use crate::error::{Result, ScanetError};
use crate::model::{Scanet, ScanetConfig};
use crate::nn::{ParamStore, Session};
use crate::objective::{bce_loss, confusion_from_masks, metrics_from_counts, total_loss, ConfusionCounts, LossWeights, Metrics};
use crate::tensor::{Precision, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub alpha: [f32; 4],
    pub seed: u64,
    /// Random horizontal and vertical flips of training samples.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gamma: 0.95,
            epochs: 100,
            batch_size: 16,
            eval_every: 5,
            alpha: [1.0; 4],
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr0", self.lr0), ("eps", self.eps), ("gamma", self.gamma)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(ScanetError::invalid(format!("{name} must be positive, got {v}")));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ScanetError::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(ScanetError::invalid("epochs, batch_size and eval_every must be at least 1"));
        }
        self.loss_weights().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha }
    }
}

/// Learning rate for a zero-based epoch: `lr0 * gamma^epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.gamma.powi(epoch as i32)
}

/// The six reported metrics plus the IoU mean, as written to history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub error_rate: f64,
    pub miou: f64,
}

impl From<&Metrics> for EvalSummary {
    fn from(m: &Metrics) -> Self {
        EvalSummary {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f_score: m.f_score,
            error_rate: m.error_rate,
            miou: m.miou,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub eval: Option<EvalSummary>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch of the best evaluation by MIoU.
    pub best_epoch: Option<usize>,
}

pub const HISTORY_HEADER: &str = "epoch,loss,lr,accuracy,precision,recall,f_score,error_rate,miou";

impl History {
    /// CSV text; floats use shortest round-trip formatting so equal runs give
    /// identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{:?},{:?}", r.epoch, r.loss, r.lr));
            match &r.eval {
                Some(e) => out.push_str(&format!(
                    ",{:?},{:?},{:?},{:?},{:?},{:?}",
                    e.accuracy, e.precision, e.recall, e.f_score, e.error_rate, e.miou
                )),
                None => out.push_str(",,,,,,"),
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn last_eval(&self) -> Option<&EvalSummary> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

/// Samples used for fitting and for evaluation.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const BEST_CHECKPOINT: &str = "best.sckp";
pub const FINAL_CHECKPOINT: &str = "final.sckp";
pub const HISTORY_FILE: &str = "history.csv";

const EVAL_BATCH: usize = 8;

/// Final-stage probability maps for a batch of images.
pub fn predict(model: &Scanet, store: &mut ParamStore, images: &Tensor, precision: Precision) -> Result<Tensor> {
    let mut s = match precision {
        Precision::F16 => Session::fp16(store),
        _ => Session::new(store, false),
    };
    let x = s.input(images.clone());
    let out = model.forward(&mut s, x)?;
    Ok(s.value(out.s[3]).clone())
}

/// Pooled confusion counts of `pred >= 0.5` over `samples`.
pub fn evaluate_counts(model: &Scanet, store: &mut ParamStore, samples: &[Sample]) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = batch(&refs)?;
        let pred = predict(model, store, &images, Precision::F32)?;
        counts += confusion_from_masks(&pred, &masks, 0.5)?;
    }
    Ok(counts)
}

pub fn evaluate(model: &Scanet, store: &mut ParamStore, samples: &[Sample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(ScanetError::invalid("cannot evaluate an empty sample set"));
    }
    metrics_from_counts(&evaluate_counts(model, store, samples)?)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Flip draws use a stream separate from the shuffle.
const AUGMENT_SALT: u64 = 0x6175_676d;

fn augmented(s: &Sample, seed: u64, draw: u64) -> Sample {
    let flips = Flips::sample(&mut sample_rng(seed ^ AUGMENT_SALT, draw));
    Sample { image: flips.apply(&s.image), mask: flips.apply(&s.mask), id: s.id.clone(), night: s.night }
}

/// Runs one optimisation step on a batch and returns the batch loss.
fn train_step(
    model: &Scanet,
    store: &mut ParamStore,
    state: &mut AdamState,
    images: Tensor,
    masks: &Tensor,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f32> {
    let loss = {
        let mut s = Session::new(store, true);
        let x = s.input(images);
        let out = model.forward(&mut s, x)?;
        let loss = total_loss(&mut s.tape, &out.s, masks, &cfg.loss_weights())?;
        let value = s.value(loss).item()?;
        if !value.is_finite() {
            return Ok(value);
        }
        s.backward(loss)?;
        value
    };
    adam_step(store, state, lr, &cfg.adam())?;
    store.zero_grads();
    Ok(loss)
}

/// Trains `store` in place.
///
/// Each epoch shuffles the training set (seeded), optionally flips samples,
/// and steps Adam once per batch with the final short batch kept. Every
/// `eval_every` epochs and after the last one, metrics are computed on the
/// test set, or on the training set when there is no test set. With
/// `out_dir`, writes the history CSV and the final and best-MIoU checkpoints.
pub fn train(
    model: &Scanet,
    store: &mut ParamStore,
    data: &TrainData,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(ScanetError::Dataset("training set is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let eval_set = if data.test.is_empty() { &data.train } else { &data.test };
    let mut state = AdamState::new();
    let mut history = History::default();
    let mut best_miou = f64::NEG_INFINITY;
    let n = data.train.len();
    store.zero_grads();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let order = epoch_order(n, cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<Sample> = if cfg.augment {
                idx.iter().map(|&i| augmented(&data.train[i], cfg.seed, (epoch * n + i) as u64)).collect()
            } else {
                idx.iter().map(|&i| data.train[i].clone()).collect()
            };
            let refs: Vec<&Sample> = items.iter().collect();
            let (images, masks) = batch(&refs)?;
            let loss = train_step(model, store, &mut state, images, &masks, lr, cfg)?;
            if !loss.is_finite() {
                return Err(ScanetError::Diverged { epoch: epoch + 1, batch: b + 1 });
            }
            loss_sum += loss as f64 * idx.len() as f64;
        }

        let number = epoch + 1;
        let eval = if number % cfg.eval_every == 0 || number == cfg.epochs {
            Some(EvalSummary::from(&evaluate(model, store, eval_set)?))
        } else {
            None
        };
        if let Some(e) = &eval {
            if e.miou > best_miou {
                best_miou = e.miou;
                history.best_epoch = Some(number);
                if let Some(dir) = out_dir {
                    let ck = Checkpoint::from_store(store, Some(&model.config), number, None);
                    save_checkpoint(&dir.join(BEST_CHECKPOINT), &ck)?;
                }
            }
        }
        let record = EpochRecord { epoch: number, loss: loss_sum / n as f64, lr, eval };
        on_epoch(&record);
        history.records.push(record);
    }

    if let Some(dir) = out_dir {
        history.write_csv(&dir.join(HISTORY_FILE))?;
        let ck = Checkpoint::from_store(store, Some(&model.config), cfg.epochs, Some(&state));
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &ck)?;
    }
    Ok(history)
}

/// Settings for the patch classification pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr0: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { lr0: 1e-3, gamma: 0.95, epochs: 50, batch_size: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Patch classification accuracy after the last epoch (eval mode).
    pub accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Smallest and largest head output seen in the final pass.
    pub output_range: (f32, f32),
}

pub const HEAD_WEIGHT: &str = "swpt_head.weight";
pub const HEAD_BIAS: &str = "swpt_head.bias";

fn head_forward(model: &Scanet, s: &mut Session, patches: Tensor) -> Result<crate::tensor::Var> {
    let x = s.input(patches);
    let taps = model.backbone.forward(s, x)?;
    let pooled = s.tape.global_avg_pool(taps[3])?;
    let (w, b) = (s.param(HEAD_WEIGHT)?, s.param(HEAD_BIAS)?);
    let logit = s.tape.fully_connected(pooled, w, b)?;
    Ok(s.tape.sigmoid(logit))
}

/// Classifies patches as cloud or sky with the backbone, a global average
/// pool and a single-output linear head. Updates the `backbone.*` entries of
/// `store` in place; the head is discarded.
pub fn pretrain_swpt(model: &Scanet, store: &mut ParamStore, patches: &[PatchSample], cfg: &PretrainConfig) -> Result<PretrainReport> {
    let positives = patches.iter().filter(|p| p.label == PatchLabel::Positive).count();
    let negatives = patches.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ScanetError::Dataset(format!(
            "patch set is single class ({positives} positive, {negatives} negative)"
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr0 > 0.0) {
        return Err(ScanetError::invalid("pre-training needs positive epochs, batch_size and lr0"));
    }
    let width = model.config.tap_widths[3];
    let mut work = store.subset("backbone.");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 1.0 / (width as f32).sqrt();
    work.add_param(HEAD_WEIGHT, Tensor::from_fn(Shape::new(1, width, 1, 1), |_| rng.gen_range(-bound..bound)))?;
    work.add_param(HEAD_BIAS, Tensor::zeros(Shape::new(1, 1, 1, 1)))?;

    let stack = |idx: &[usize]| -> Result<(Tensor, Tensor)> {
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &patches[i].patch).collect();
        let labels = idx
            .iter()
            .map(|&i| if patches[i].label == PatchLabel::Positive { 1.0 } else { 0.0 })
            .collect();
        Ok((Tensor::stack(&imgs)?, Tensor::from_vec(Shape::new(idx.len(), 1, 1, 1), labels)?))
    };

    let adam = AdamConfig::default();
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.epochs);
    work.zero_grads();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr0 * cfg.gamma.powi(epoch as i32);
        let mut sum = 0.0f64;
        for (b, idx) in epoch_order(patches.len(), cfg.seed, epoch).chunks(cfg.batch_size).enumerate() {
            let (imgs, labels) = stack(idx)?;
            let loss = {
                let mut s = Session::new(&mut work, true);
                let p = head_forward(model, &mut s, imgs)?;
                let y = s.input(labels);
                let loss = bce_loss(&mut s.tape, p, y)?;
                let v = s.value(loss).item()?;
                if !v.is_finite() {
                    return Err(ScanetError::Diverged { epoch: epoch + 1, batch: b + 1 });
                }
                s.backward(loss)?;
                v
            };
            adam_step(&mut work, &mut state, lr, &adam)?;
            work.zero_grads();
            sum += loss as f64 * idx.len() as f64;
        }
        losses.push(sum / patches.len() as f64);
    }

    let all: Vec<usize> = (0..patches.len()).collect();
    let mut correct = 0usize;
    let mut output_range = (f32::INFINITY, f32::NEG_INFINITY);
    for idx in all.chunks(64) {
        let (imgs, labels) = stack(idx)?;
        let mut s = Session::new(&mut work, false);
        let p = head_forward(model, &mut s, imgs)?;
        for (&p, &y) in s.value(p).data().iter().zip(labels.data()) {
            correct += usize::from((p >= 0.5) == (y >= 0.5));
            output_range = (output_range.0.min(p), output_range.1.max(p));
        }
    }
    store.load_matching(&work)?;
    Ok(PretrainReport { losses, accuracy: correct as f64 / patches.len() as f64, positives, negatives, output_range })
}

/// Builds a model and loads a checkpoint that carries its config.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(Scanet, ParamStore)> {
    let config: ScanetConfig = ck
        .meta
        .config
        .clone()
        .ok_or_else(|| ScanetError::Checkpoint("checkpoint has no model config".into()))?;
    let (model, mut store) = Scanet::build(config, 0)?;
    ck.load_into(&mut store, true)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests;
