//! Binary checkpoint: `KWSA`, u32 version, u32-length-prefixed UTF-8
//! metadata of `key=value` lines, then each tensor as u32 name length,
//! name, u32 rank, u32 dims and little-endian f64 values. Model tensors come
//! first in name order, followed by the Adam moments (`adam.m:<name>`,
//! `adam.v:<name>`).

use std::collections::BTreeMap;
use std::path::Path;

use super::{AdamState, EpochRecord, TrainConfig, TrainHistory};
use crate::audio_io::SplitRatios;
use crate::autodiff::Tensor;
use crate::config::{parse, KeyValue};
use crate::dsp::DspConfig;
use crate::error::{KwsError, Result};
use crate::layers::Mode;
use crate::models::{Arch, Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KWSA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub dsp: DspConfig,
    /// Class names in index order.
    pub labels: Vec<String>,
    pub adam: Option<AdamState>,
    pub history: TrainHistory,
    /// Ratios of the split the run trained on.
    pub split: SplitRatios,
}

fn bad(msg: impl Into<String>) -> KwsError {
    KwsError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in 4 bytes")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn metadata(ck: &Checkpoint) -> Result<String> {
    let mut lines = Vec::new();
    let mut section = |prefix: &str, pairs: Vec<(&'static str, String)>| {
        for (k, v) in pairs {
            lines.push(format!("{prefix}.{k}={v}"));
        }
    };
    section("model", ck.model.config.pairs());
    section("train", ck.train.pairs());
    section("dsp", ck.dsp.pairs());
    let mode = match ck.model.mode {
        Mode::Train => "train",
        Mode::Infer => "infer",
    };
    lines.push(format!("model.mode={mode}"));
    lines.push(format!("split.train={}", ck.split.train));
    lines.push(format!("split.val={}", ck.split.val));
    lines.push(format!("split.test={}", ck.split.test));
    if let Some(l) = ck.labels.iter().find(|l| l.contains([',', '\n', '\r']) || l.is_empty()) {
        return Err(bad(format!("label {l:?} cannot be stored")));
    }
    lines.push(format!("labels={}", ck.labels.join(",")));
    if let Some(a) = &ck.adam {
        lines.push(format!("adam.t={}", a.t));
        lines.push(format!("adam.beta1={}", a.beta1));
        lines.push(format!("adam.beta2={}", a.beta2));
        lines.push(format!("adam.epsilon={}", a.epsilon));
    }
    lines.push(format!("history.best_epoch={}", ck.history.best_epoch));
    for r in &ck.history.records {
        // full precision, unlike the metrics log
        lines.push(format!(
            "history.record={},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr, r.seconds
        ));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    Ok(text)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = metadata(ck)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(meta.as_bytes());
    for (name, t) in ck.model.named_tensors() {
        put_tensor(&mut out, name, t)?;
    }
    if let Some(a) = &ck.adam {
        for (name, t) in &a.m {
            put_tensor(&mut out, &format!("adam.m:{name}"), t)?;
        }
        for (name, t) in &a.v {
            put_tensor(&mut out, &format!("adam.v:{name}"), t)?;
        }
    }
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, bytes).map_err(|e| KwsError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let len = r.u32()?;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| bad("tensor name is not UTF-8"))?
        .to_string();
    let rank = r.u32()?;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(r.u32()?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| bad(format!("tensor '{name}' is too large")))?;
    let raw = r.take(numel)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let t = Tensor::new(&shape, data).map_err(|e| bad(format!("tensor '{name}': {e}")))?;
    Ok((name, t))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| bad("file too short for a checkpoint header"))? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()?;
    let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| bad("metadata is not UTF-8"))?;

    let mut model_cfg = ModelConfig::new(Arch::Cnn, 2, (1, 1));
    let mut train = TrainConfig::default();
    let mut dsp = DspConfig::default();
    let mut mode = Mode::Infer;
    let mut labels = Vec::new();
    let mut adam_meta: Option<AdamState> = None;
    let mut history = TrainHistory::default();
    let mut split = SplitRatios::default();
    for line in meta.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("metadata line '{line}' has no '='")))?;
        let fail = |m: String| bad(format!("metadata '{key}': {m}"));
        let adam = || AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        };
        let known = match key.split_once('.') {
            Some(("model", "mode")) => {
                mode = match value {
                    "train" => Mode::Train,
                    "infer" => Mode::Infer,
                    other => return Err(fail(format!("unknown mode '{other}'"))),
                };
                true
            }
            Some(("model", k)) => model_cfg.set_key(k, value).map_err(fail)?,
            Some(("train", k)) => train.set_key(k, value).map_err(fail)?,
            Some(("dsp", k)) => dsp.set_key(k, value).map_err(fail)?,
            Some(("adam", k)) => {
                let a = adam_meta.get_or_insert_with(adam);
                match k {
                    "t" => a.t = parse(value, "a step count").map_err(fail)?,
                    "beta1" => a.beta1 = parse(value, "a number").map_err(fail)?,
                    "beta2" => a.beta2 = parse(value, "a number").map_err(fail)?,
                    "epsilon" => a.epsilon = parse(value, "a number").map_err(fail)?,
                    _ => return Err(fail("unknown key".into())),
                }
                true
            }
            Some(("split", k)) => {
                let slot = match k {
                    "train" => &mut split.train,
                    "val" => &mut split.val,
                    "test" => &mut split.test,
                    _ => return Err(fail("unknown key".into())),
                };
                *slot = parse(value, "a ratio").map_err(fail)?;
                true
            }
            Some(("history", "best_epoch")) => {
                history.best_epoch = parse(value, "an epoch").map_err(fail)?;
                true
            }
            Some(("history", "record")) => {
                history
                    .records
                    .push(EpochRecord::parse_csv_row(value).map_err(|e| fail(e.to_string()))?);
                true
            }
            None if key == "labels" => {
                labels = value.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
                true
            }
            _ => false,
        };
        if !known {
            return Err(bad(format!("unknown metadata key '{key}'")));
        }
    }

    let mut model = Model::build(model_cfg).map_err(|e| bad(format!("stored model config: {e}")))?;
    model.mode = mode;
    let expected: Vec<String> = model.named_tensors().map(|(n, _)| n.clone()).collect();
    for name in &expected {
        let (got, t) = read_tensor(&mut r)?;
        if &got != name {
            return Err(bad(format!("expected tensor '{name}', found '{got}'")));
        }
        model.set_tensor(name, t).map_err(|e| bad(e.to_string()))?;
    }
    if let Some(a) = adam_meta.as_mut() {
        let trainable = model.trainable_names();
        for (prefix, slot) in [("adam.m:", &mut a.m), ("adam.v:", &mut a.v)] {
            for name in &trainable {
                let (got, t) = read_tensor(&mut r)?;
                if got != format!("{prefix}{name}") {
                    return Err(bad(format!("expected tensor '{prefix}{name}', found '{got}'")));
                }
                if t.shape() != model.params()[name].value.shape() {
                    return Err(bad(format!("optimizer tensor '{got}' has the wrong shape")));
                }
                slot.insert(name.clone(), t);
            }
        }
    }
    if !r.done() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if labels.len() != model.config.n_classes {
        return Err(bad(format!(
            "{} labels for a {}-class model",
            labels.len(),
            model.config.n_classes
        )));
    }
    Ok(Checkpoint {
        model,
        train,
        dsp,
        labels,
        adam: adam_meta,
        history,
        split,
    })
}
