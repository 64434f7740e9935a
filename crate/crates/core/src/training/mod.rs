//! Cross-entropy training with Adam, per-epoch learning-rate decay and
//! early stopping on validation accuracy.

mod checkpoint;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio_io::DatasetIndex;
use crate::autodiff::{Graph, Tensor, Var};
use crate::dsp::{FeatureMatrix, Featurizer};
use crate::error::{KwsError, Result};
use crate::layers::Mode;
use crate::models::{argmax, Model};
use crate::par;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
    /// Write real elapsed seconds to the metrics log. Off by default so
    /// that identical runs produce identical logs.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 40,
            batch_size: 64,
            base_lr: 1e-3,
            lr_decay: 0.97,
            patience: 10,
            seed: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(KwsError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.patience >= self.max_epochs {
            return fail(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return fail(format!("lr_decay {} must be positive", self.lr_decay));
        }
        Ok(())
    }
}

/// Learning rate for a 0-based epoch index.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.base_lr * config.lr_decay.powi(epoch as i32)
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn cross_entropy_loss<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(KwsError::shape(
            "cross_entropy_loss",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(KwsError::Data(format!("label {bad} outside [0, {c})")));
    }
    let g = logits.graph();
    let value = logits.value();
    // the row max is a constant: the loss does not depend on it
    let maxes: Vec<f64> = value
        .data()
        .chunks(c)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shifted = logits.sub(g.constant(Tensor::from_vec(&[n, 1], maxes)))?;
    let lse = shifted.exp().sum(1, true)?.log();
    let log_probs = shifted.sub(lse)?;
    let mut one_hot = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        one_hot[i * c + l] = 1.0;
    }
    let picked = log_probs.mul(g.constant(Tensor::from_vec(&[n, c], one_hot)))?;
    Ok(picked.sum_all()?.scale(-1.0 / n as f64))
}

/// Loss and number of correct argmax predictions for a logit tensor.
pub fn loss_and_correct(logits: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
    let g = Graph::new();
    let loss = cross_entropy_loss(g.constant(logits.clone()), labels)?;
    let c = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let value = loss.value().item();
    Ok((value, correct))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    /// Moment buffers keyed by parameter name.
    pub m: std::collections::BTreeMap<String, Tensor>,
    pub v: std::collections::BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Zeroed moments for every trainable parameter of `model`.
    pub fn new(model: &Model) -> Self {
        let zeros = || {
            model
                .params()
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(n, p)| (n.clone(), Tensor::zeros(p.value.shape())))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update of every trainable parameter from its gradient buffer.
pub fn adam_step(model: &mut Model, state: &mut AdamState, lr: f64) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in model.params_mut().iter_mut().filter(|(_, p)| p.trainable) {
        let (m, v) = match (state.m.get_mut(name), state.v.get_mut(name)) {
            (Some(m), Some(v)) if m.shape() == p.value.shape() && v.shape() == p.value.shape() => (m, v),
            _ => {
                return Err(KwsError::shape(
                    "adam_step",
                    format!("optimizer state does not match parameter '{name}'"),
                ))
            }
        };
        let grad = p.grad.data();
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            let g = grad[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * g;
            let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            theta[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Precomputed features with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    shape: (usize, usize),
    data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(features: &[FeatureMatrix], labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(KwsError::Data(format!(
                "{} feature matrices for {} labels",
                features.len(),
                labels.len()
            )));
        }
        let shape = features.first().map_or((0, 0), |f| (f.frames(), f.dim()));
        let mut data = Vec::with_capacity(features.len() * shape.0 * shape.1);
        for f in features {
            if (f.frames(), f.dim()) != shape {
                return Err(KwsError::shape(
                    "FeatureSet",
                    format!("{}x{} vs {}x{}", f.frames(), f.dim(), shape.0, shape.1),
                ));
            }
            data.extend_from_slice(&f.values.data);
        }
        Ok(Self { shape, data, labels })
    }

    /// Loads and featurizes every entry, labels indexed by `label_set`.
    pub fn from_index(index: &DatasetIndex, featurizer: &Featurizer, label_set: &[String]) -> Result<Self> {
        let labels = index
            .entries
            .iter()
            .map(|e| {
                label_set
                    .iter()
                    .position(|l| *l == e.label)
                    .ok_or_else(|| KwsError::Data(format!("label '{}' not in the class set", e.label)))
            })
            .collect::<Result<Vec<_>>>()?;
        let features = par::map(&index.entries, |e| featurizer.compute(&e.load()?))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Self::new(&features, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (T, D) of every sample.
    pub fn sample_shape(&self) -> (usize, usize) {
        self.shape
    }

    /// N×T×D tensor of the selected samples with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let stride = self.shape.0 * self.shape.1;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::from_vec(&[indices.len(), self.shape.0, self.shape.1], data),
            labels,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Infer-mode loss and accuracy over a whole set.
pub fn evaluate_set(model: &Model, data: &FeatureSet, batch_size: usize) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(KwsError::Data("cannot evaluate an empty set".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    let results = par::map(&chunks, |idx| {
        let (x, y) = data.batch(idx);
        loss_and_correct(&model.infer_logits(&x)?, &y)
    });
    let (mut loss, mut correct) = (0.0, 0);
    for (chunk, r) in chunks.iter().zip(results) {
        let (l, c) = r?;
        loss += l * chunk.len() as f64;
        correct += c;
    }
    let n = data.len() as f64;
    Ok(EpochMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Batch order of a 0-based epoch: a seeded shuffle, final partial batch kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One pass over `data` (0-based `epoch`): forward, loss, backward and an
/// Adam step per batch. Returns the sample-weighted mean loss and accuracy
/// of the train-mode forward passes.
pub fn train_epoch(
    model: &mut Model,
    data: &FeatureSet,
    state: &mut AdamState,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(KwsError::Data("empty training set".into()));
    }
    model.mode = Mode::Train;
    let lr = lr_schedule(epoch, config);
    let batches = epoch_batches(data.len(), config.batch_size, config.seed, epoch);
    // dropout masks come from a stream separate from the shuffle
    let mut rng = epoch_rng(config.seed.wrapping_add(1), epoch);
    let (mut loss_sum, mut correct) = (0.0, 0);
    for idx in &batches {
        let (x, y) = data.batch(idx);
        let g = Graph::new();
        let bound = model.bind(&g, true);
        let out = model.forward(&bound, g.constant(x), Mode::Train, &mut rng)?;
        let loss = cross_entropy_loss(out.logits, &y)?;
        let grads = g.backward(loss)?;
        let logits = out.logits.value();
        let c = logits.shape()[1];
        correct += logits
            .data()
            .chunks(c)
            .zip(&y)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        loss_sum += loss.value().item() * idx.len() as f64;
        model.zero_grad();
        model.accumulate_grads(&bound, &grads);
        model.apply_bn_updates(out.bn_updates);
        adam_step(model, state, lr)?;
    }
    let n = data.len() as f64;
    Ok(EpochMetrics {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch of the best validation accuracy (0 before any epoch).
    pub best_epoch: usize,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.lr, self.seconds
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = || KwsError::Data(format!("malformed metrics row '{line}'"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: num(1)?,
            train_acc: num(2)?,
            val_loss: num(3)?,
            val_acc: num(4)?,
            lr: num(5)?,
            seconds: num(6)?,
        })
    }
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv_row());
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| KwsError::io(path, e))
    }

    /// Parses a metrics log; `best_epoch` is recomputed from the rows.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == METRICS_HEADER => {}
            _ => {
                return Err(KwsError::Data(format!(
                    "metrics log must start with '{METRICS_HEADER}'"
                )))
            }
        }
        let records = lines.map(EpochRecord::parse_csv_row).collect::<Result<Vec<_>>>()?;
        let mut best = (0, f64::NEG_INFINITY);
        for r in &records {
            if r.val_acc > best.1 {
                best = (r.epoch, r.val_acc);
            }
        }
        Ok(Self {
            records,
            best_epoch: best.0,
        })
    }
}

/// Result of [`fit`]: the best snapshot, its optimizer state and the log.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub history: TrainHistory,
}

/// Training loop with a caller-supplied validation metric. `validate`
/// receives the model after each epoch and its 1-based index and returns
/// (val_loss, val_acc).
pub fn fit_with<V>(
    mut model: Model,
    train: &FeatureSet,
    config: &TrainConfig,
    mut validate: V,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome>
where
    V: FnMut(&Model, usize) -> Result<(f64, f64)>,
{
    config.validate()?;
    let mut state = AdamState::new(&model);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model, AdamState)> = None;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let lr = lr_schedule(epoch - 1, config);
        let metrics = train_epoch(&mut model, train, &mut state, config, epoch - 1)?;
        model.mode = Mode::Infer;
        let (val_loss, val_acc) = validate(&model, epoch)?;
        let seconds = if config.log_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let record = EpochRecord {
            epoch,
            train_loss: metrics.loss,
            train_acc: metrics.accuracy,
            val_loss,
            val_acc,
            lr,
            seconds,
        };
        on_epoch(&record);
        history.records.push(record);
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            history.best_epoch = epoch;
            best = Some((val_acc, model.clone(), state.clone()));
        }
        if epoch - history.best_epoch >= config.patience {
            break;
        }
    }
    let (_, mut model, adam) = best.expect("at least one epoch ran");
    model.mode = Mode::Infer;
    Ok(FitOutcome { model, adam, history })
}

/// [`fit_with`] validating on `val`.
pub fn fit(model: Model, train: &FeatureSet, val: &FeatureSet, config: &TrainConfig) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(KwsError::Data("train and validation splits must be non-empty".into()));
    }
    fit_with(
        model,
        train,
        config,
        |m, _| {
            let r = evaluate_set(m, val, config.batch_size)?;
            Ok((r.loss, r.accuracy))
        },
        |_| {},
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, ModelConfig};

    fn naive_ce(logits: &[f64], labels: &[usize], c: usize) -> f64 {
        let mut total = 0.0;
        for (row, &l) in logits.chunks(c).zip(labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= (row[l].exp() / z).ln();
        }
        total / labels.len() as f64
    }

    fn ce(logits: Tensor, labels: &[usize]) -> Result<f64> {
        let g = Graph::new();
        Ok(cross_entropy_loss(g.constant(logits), labels)?.value().item())
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = ce(Tensor::zeros(&[3, 20]), &[0, 5, 19]).unwrap();
        assert!((uniform - 20f64.ln()).abs() < 1e-12);
        let mut sat = vec![0.0; 4];
        sat[2] = 50.0;
        assert!(ce(Tensor::from_vec(&[1, 4], sat), &[2]).unwrap() < 1e-6);
        assert!(matches!(ce(Tensor::zeros(&[1, 3]), &[3]), Err(KwsError::Data(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::uniform(&[6, 5], 4.0, &mut rng);
        let labels = [0, 4, 2, 2, 1, 3];
        let got = ce(t.clone(), &labels).unwrap();
        assert!((got - naive_ce(t.data(), &labels, 5)).abs() < 1e-10);
    }

    #[test]
    fn lr_schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-3);
        assert!((lr_schedule(10, &c) - 7.374e-4).abs() < 1e-7);
        let flat = TrainConfig { lr_decay: 1.0, ..c };
        assert_eq!(lr_schedule(25, &flat), 1e-3);
    }

    fn tiny_model() -> Model {
        let mut c = ModelConfig::new(Arch::Cnn, 2, (8, 8));
        c.conv_channels = vec![1, 1, 1];
        c.dense_hidden = 2;
        Model::build(c).unwrap()
    }

    #[test]
    fn adam_zero_grad_and_zero_lr_keep_params() {
        let mut m = tiny_model();
        let before = m.clone();
        let mut s = AdamState::new(&m);
        adam_step(&mut m, &mut s, 1e-3).unwrap();
        assert_eq!(m.params(), before.params());
        for p in m.params_mut().values_mut() {
            p.grad.data_mut().fill(0.3);
        }
        let snapshot = m.clone();
        adam_step(&mut m, &mut s, 0.0).unwrap();
        for (a, b) in m.params().values().zip(snapshot.params().values()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.5, -3.0, 1e-3] {
            let mut m = tiny_model();
            let before = m.clone();
            for p in m.params_mut().values_mut() {
                p.grad.data_mut().fill(g);
            }
            let mut s = AdamState::new(&m);
            adam_step(&mut m, &mut s, 1e-2).unwrap();
            assert_eq!(s.t, 1);
            for (a, b) in m
                .params()
                .values()
                .zip(before.params().values())
                .filter(|(a, _)| a.trainable)
            {
                for (x, y) in a.value.data().iter().zip(b.value.data()) {
                    let step = (y - x) * g.signum();
                    assert!((step - 1e-2).abs() < 1e-7, "{step}");
                }
            }
        }
    }

    #[test]
    fn batches_cover_every_sample() {
        let b = epoch_batches(130, 64, 7, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
        assert_eq!(epoch_batches(64, 64, 1, 3).len(), 1);
        assert_eq!(b, epoch_batches(130, 64, 7, 0));
        assert_ne!(b, epoch_batches(130, 64, 7, 1));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let h = TrainHistory {
            records: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 1.5,
                    train_acc: 0.25,
                    val_loss: 1.25,
                    val_acc: 0.5,
                    lr: 1e-3,
                    seconds: 0.0,
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 1.0,
                    train_acc: 0.5,
                    val_loss: 1.0,
                    val_acc: 0.75,
                    lr: 9.7e-4,
                    seconds: 0.0,
                },
            ],
            best_epoch: 2,
        };
        let text = h.to_csv();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(TrainHistory::parse_csv(&text).unwrap(), h);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            patience: 40,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
