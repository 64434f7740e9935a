//! The four compared architectures.
//!
//! All of them start from an N×T×D feature batch viewed as a one-channel
//! image. Convolution blocks are conv 3×3 → batch norm → ReLU → 2×2 max
//! pool → dropout. Recurrent models flatten the block output to a
//! N×T'×(C·D') sequence.
//!
//! | arch | body | head |
//! |------|------|------|
//! | `cnn` | 3 conv blocks, flatten | 3 dense layers |
//! | `cnn_bilstm` | 2 conv blocks, BiLSTM | dense |
//! | `attention_rnn` | 2 conv blocks, 2 stacked BiLSTMs, attention with a middle-step query | 2 dense |
//! | `multilayer_attention` | as `attention_rnn`, attention chained over conv, BiLSTM 1 and BiLSTM 2 outputs | 2 dense |

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Padding, Tensor, Var};
use crate::dsp::FeatureMatrix;
use crate::error::{KwsError, Result};
use crate::layers::{
    self, attention_read, batch_norm, bilstm_sequence, dense, dropout, glorot_limit, Activation, AttentionParams,
    ConvParams, LstmParams, LstmVars, Mode, RunningStats, LSTM_GATES,
};

pub const KERNEL: (usize, usize) = (3, 3);
pub const POOL: (usize, usize) = (2, 2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Cnn,
    CnnBilstm,
    AttentionRnn,
    MultilayerAttention,
}

impl Arch {
    pub const ALL: [Arch; 4] = [
        Arch::Cnn,
        Arch::CnnBilstm,
        Arch::AttentionRnn,
        Arch::MultilayerAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Cnn => "cnn",
            Arch::CnnBilstm => "cnn_bilstm",
            Arch::AttentionRnn => "attention_rnn",
            Arch::MultilayerAttention => "multilayer_attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Number of convolution blocks in the body.
    pub fn conv_blocks(self) -> usize {
        match self {
            Arch::Cnn => 3,
            _ => 2,
        }
    }

    fn lstm_layers(self) -> usize {
        match self {
            Arch::Cnn => 0,
            Arch::CnnBilstm => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_classes: usize,
    /// (T frames, D coefficients)
    pub input_shape: (usize, usize),
    pub conv_channels: Vec<usize>,
    pub conv_padding: Padding,
    pub lstm_hidden: usize,
    pub dense_hidden: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults: channels 32→64 (→64 for `cnn`), same padding, 64 LSTM
    /// units, 64 dense units, dropout 0.1, seed 0.
    pub fn new(arch: Arch, n_classes: usize, input_shape: (usize, usize)) -> Self {
        Self {
            arch,
            n_classes,
            input_shape,
            conv_channels: Self::default_channels(arch),
            conv_padding: Padding::Same,
            lstm_hidden: 64,
            dense_hidden: 64,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    pub fn default_channels(arch: Arch) -> Vec<usize> {
        match arch {
            Arch::Cnn => vec![32, 64, 64],
            _ => vec![32, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(KwsError::Config(m));
        if self.n_classes < 2 {
            return fail(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.input_shape.0 == 0 || self.input_shape.1 == 0 {
            return fail(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        if self.conv_channels.len() != self.arch.conv_blocks() {
            return fail(format!(
                "{} uses {} conv blocks, got channels {:?}",
                self.arch,
                self.arch.conv_blocks(),
                self.conv_channels
            ));
        }
        if self.conv_channels.contains(&0) || self.lstm_hidden == 0 || self.dense_hidden == 0 {
            return fail("channel, lstm_hidden and dense_hidden sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        self.plan().map(|_| ())
    }

    /// Spatial size after each conv block, failing on the first stage that
    /// does not fit.
    fn plan(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = self.input_shape;
        let mut sizes = Vec::new();
        for b in 0..self.arch.conv_blocks() {
            if self.conv_padding == Padding::Valid {
                if h < KERNEL.0 || w < KERNEL.1 {
                    return Err(KwsError::Config(format!(
                        "conv block {b}: {h}x{w} input smaller than the {}x{} kernel",
                        KERNEL.0, KERNEL.1
                    )));
                }
                h -= KERNEL.0 - 1;
                w -= KERNEL.1 - 1;
            }
            if h < POOL.0 || w < POOL.1 {
                return Err(KwsError::Config(format!(
                    "conv block {b}: {h}x{w} feature map smaller than the {}x{} pool",
                    POOL.0, POOL.1
                )));
            }
            h = (h - POOL.0) / POOL.0 + 1;
            w = (w - POOL.1) / POOL.1 + 1;
            sizes.push((h, w));
        }
        Ok(sizes)
    }

    /// (T', C·D') of the sequence fed to the recurrent layers.
    pub fn sequence_shape(&self) -> Result<(usize, usize)> {
        let sizes = self.plan()?;
        let (h, w) = *sizes.last().expect("at least one conv block");
        Ok((h, self.conv_channels.last().copied().unwrap_or(0) * w))
    }
}

/// A named tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// `false` for batch-norm running statistics.
    pub trainable: bool,
}

impl Param {
    fn new(value: Tensor, trainable: bool) -> Self {
        Self {
            grad: Tensor::zeros(value.shape()),
            value,
            trainable,
        }
    }
}

/// Trainable parameters bound into one graph, keyed by name.
#[derive(Debug, Clone)]
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Pairs `names` (as returned by [`Model::trainable_names`]) with `vars`.
    pub fn from_vars(names: &[String], vars: &[Var<'g>]) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(KwsError::Usage(format!(
                "{} names for {} vars",
                names.len(),
                vars.len()
            )));
        }
        Ok(Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| KwsError::Usage(format!("parameter '{name}' is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'g>)> {
        self.vars.iter()
    }

    fn lstm(&self, prefix: &str) -> Result<LstmVars<'g>> {
        let pick = |kind: &str| -> Result<[Var<'g>; 4]> {
            let v: Vec<Var<'g>> = LSTM_GATES
                .iter()
                .map(|g| self.get(&format!("{prefix}.{kind}_{g}")))
                .collect::<Result<_>>()?;
            Ok([v[0], v[1], v[2], v[3]])
        };
        LstmVars::new(pick("w")?, pick("u")?, pick("b")?)
    }
}

/// Graph outputs of one forward pass.
#[derive(Debug)]
pub struct ForwardOutput<'g> {
    /// N × n_classes, pre-softmax.
    pub logits: Var<'g>,
    /// Attention weights per stage (N × T' each), in stage order.
    pub stage_weights: Vec<Var<'g>>,
    /// New batch-norm running statistics (train mode only).
    pub bn_updates: Vec<(String, RunningStats)>,
}

/// How much of the fusion chain [`Model::forward_with`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// All three stages for `multilayer_attention`.
    Full,
    /// Only the final read, queried from the middle BiLSTM-2 step, which is
    /// exactly the `attention_rnn` head.
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    params: BTreeMap<String, Param>,
    pub mode: Mode,
}

impl Model {
    /// Builds and initializes the model deterministically from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let mut add = |name: String, t: Tensor, trainable: bool| {
            params.insert(name, Param::new(t, trainable));
        };
        let d_in = config.input_shape.1;
        let mut in_ch = 1;
        for (b, &ch) in config.conv_channels.iter().enumerate() {
            // batch-norm beta replaces the conv bias
            let conv = ConvParams::init(in_ch, ch, KERNEL, config.conv_padding, &mut rng);
            add(format!("conv{b}.kernel"), conv.kernels, true);
            add(format!("conv{b}.bn.gamma"), Tensor::ones(&[ch]), true);
            add(format!("conv{b}.bn.beta"), Tensor::zeros(&[ch]), true);
            let stats = RunningStats::new(ch);
            add(format!("conv{b}.bn.running_mean"), stats.mean, false);
            add(format!("conv{b}.bn.running_var"), stats.var, false);
            in_ch = ch;
        }
        let sizes = config.plan()?;
        let seq_dim = config.sequence_shape()?.1;
        let dense_layer = |name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let w = Tensor::uniform(&[fan_in, fan_out], glorot_limit(fan_in, fan_out), rng);
            (format!("{name}.w"), w, format!("{name}.b"), Tensor::zeros(&[fan_out]))
        };
        let mut dense_params = Vec::new();
        let two_h = 2 * config.lstm_hidden;
        let mut lstm_params = Vec::new();
        let mut lstm_in = seq_dim;
        for layer in 0..config.arch.lstm_layers() {
            for dir in ["fwd", "bwd"] {
                let p = LstmParams::init(lstm_in, config.lstm_hidden, &mut rng);
                for (suffix, t) in p.named() {
                    lstm_params.push((format!("lstm{layer}.{dir}.{suffix}"), t));
                }
            }
            lstm_in = two_h;
        }
        let mut attn_params = Vec::new();
        match config.arch {
            Arch::Cnn => {
                let (h, w) = *sizes.last().expect("conv blocks");
                let flat = config.conv_channels[2] * h * w;
                let dh = config.dense_hidden;
                dense_params.push(dense_layer("dense0", flat, dh, &mut rng));
                dense_params.push(dense_layer("dense1", dh, dh, &mut rng));
                dense_params.push(dense_layer("dense2", dh, config.n_classes, &mut rng));
            }
            Arch::CnnBilstm => {
                dense_params.push(dense_layer("out", two_h, config.n_classes, &mut rng));
            }
            Arch::AttentionRnn | Arch::MultilayerAttention => {
                if config.arch == Arch::MultilayerAttention {
                    attn_params.push((
                        "fusion1.query".to_string(),
                        AttentionParams::init(d_in, seq_dim, &mut rng).query_proj,
                    ));
                    attn_params.push((
                        "fusion2.query".to_string(),
                        AttentionParams::init(seq_dim, two_h, &mut rng).query_proj,
                    ));
                }
                attn_params.push((
                    "attn.query".to_string(),
                    AttentionParams::init(two_h, two_h, &mut rng).query_proj,
                ));
                dense_params.push(dense_layer("head0", two_h, config.dense_hidden, &mut rng));
                dense_params.push(dense_layer("head1", config.dense_hidden, config.n_classes, &mut rng));
            }
        }
        for (name, t) in lstm_params.into_iter().chain(attn_params) {
            add(name, t, true);
        }
        for (wn, w, bn, b) in dense_params {
            add(wn, w, true);
            add(bn, b, true);
        }
        Ok(Self {
            config,
            params,
            mode: Mode::Train,
        })
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Param> {
        &mut self.params
    }

    /// Every named tensor (trainable and running statistics), name order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().map(|(n, p)| (n, &p.value))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn trainable_tensors(&self) -> Vec<Tensor> {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.clone())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replaces a named tensor, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| KwsError::Usage(format!("no parameter '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(KwsError::shape(
                "set_tensor",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| KwsError::Usage(format!("no parameter '{name}'")))
    }

    /// Registers trainable parameters as graph leaves (`param` when
    /// `requires_grad`, `constant` otherwise).
    pub fn bind<'g>(&self, g: &'g Graph, requires_grad: bool) -> Bound<'g> {
        let vars = self
            .params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| {
                let v = if requires_grad {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the graph gradients of every bound parameter into its buffer.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_>, grads: &crate::autodiff::Gradients) {
        for (name, var) in bound.iter() {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), grads.get(*var)) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<(String, RunningStats)>) {
        for (prefix, stats) in updates {
            if let Some(p) = self.params.get_mut(&format!("{prefix}.running_mean")) {
                p.value = stats.mean;
            }
            if let Some(p) = self.params.get_mut(&format!("{prefix}.running_var")) {
                p.value = stats.var;
            }
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let (t, d) = self.config.input_shape;
        if shape.len() != 3 || shape[1] != t || shape[2] != d || shape[0] == 0 {
            return Err(KwsError::shape(
                "model_forward",
                format!("batch {shape:?}, model expects N×{t}×{d}"),
            ));
        }
        Ok(shape[0])
    }

    /// Forward pass of an N×T×D batch.
    pub fn forward<'g, R: Rng>(
        &self,
        bound: &Bound<'g>,
        input: Var<'g>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput<'g>> {
        self.forward_with(bound, input, mode, rng, Fusion::Full)
    }

    pub fn forward_with<'g, R: Rng>(
        &self,
        bound: &Bound<'g>,
        input: Var<'g>,
        mode: Mode,
        rng: &mut R,
        fusion: Fusion,
    ) -> Result<ForwardOutput<'g>> {
        let n = self.check_input(&input.shape())?;
        let g = input.graph();
        let cfg = &self.config;
        let (t_in, d_in) = cfg.input_shape;
        let mut bn_updates = Vec::new();
        let mut x = input.reshape(&[n, 1, t_in, d_in])?;
        for b in 0..cfg.conv_channels.len() {
            x = layers::conv2d(
                x,
                bound.get(&format!("conv{b}.kernel"))?,
                None,
                (1, 1),
                cfg.conv_padding,
            )?;
            let prefix = format!("conv{b}.bn");
            let stats = RunningStats {
                mean: self.tensor(&format!("{prefix}.running_mean"))?.clone(),
                var: self.tensor(&format!("{prefix}.running_var"))?.clone(),
            };
            let (y, update) = batch_norm(
                x,
                bound.get(&format!("{prefix}.gamma"))?,
                bound.get(&format!("{prefix}.beta"))?,
                &stats,
                mode,
            )?;
            if let Some(u) = update {
                bn_updates.push((prefix, u));
            }
            x = layers::max_pool(y.relu(), POOL, POOL)?;
            x = dropout(x, cfg.dropout_rate, mode, rng)?;
        }
        let dense_of = |x: Var<'g>, name: &str, act: Activation| -> Result<Var<'g>> {
            dense(
                x,
                bound.get(&format!("{name}.w"))?,
                bound.get(&format!("{name}.b"))?,
                act,
            )
        };
        if cfg.arch == Arch::Cnn {
            let flat = x.reshape(&[n, x.value().numel() / n])?;
            let h = dense_of(flat, "dense0", Activation::Relu)?;
            let h = dense_of(h, "dense1", Activation::Relu)?;
            let logits = dense_of(h, "dense2", Activation::None)?;
            return Ok(ForwardOutput {
                logits,
                stage_weights: Vec::new(),
                bn_updates,
            });
        }
        // N×C×T'×D' → N×T'×(C·D')
        let s = x.shape();
        let (c, tp, dp) = (s[1], s[2], s[3]);
        let conv_seq = x.transpose(&[0, 2, 1, 3])?.reshape(&[n, tp, c * dp])?;
        let two_h = 2 * cfg.lstm_hidden;
        let lstm0 = bilstm_sequence(conv_seq, &bound.lstm("lstm0.fwd")?, &bound.lstm("lstm0.bwd")?)?;
        if cfg.arch == Arch::CnnBilstm {
            let h = cfg.lstm_hidden;
            let last_fwd = lstm0.slice(1, tp - 1, tp)?.slice(2, 0, h)?.reshape(&[n, h])?;
            let last_bwd = lstm0.slice(1, 0, 1)?.slice(2, h, two_h)?.reshape(&[n, h])?;
            let summary = g.concat(&[last_fwd, last_bwd], 1)?;
            let logits = dense_of(summary, "out", Activation::None)?;
            return Ok(ForwardOutput {
                logits,
                stage_weights: Vec::new(),
                bn_updates,
            });
        }
        let lstm1 = bilstm_sequence(lstm0, &bound.lstm("lstm1.fwd")?, &bound.lstm("lstm1.bwd")?)?;
        let mut stage_weights = Vec::new();
        let final_summary = if cfg.arch == Arch::MultilayerAttention && fusion == Fusion::Full {
            // stage 1: raw features (time mean) against the conv sequence
            let raw_summary = input.mean(1, false)?;
            let (c1, a1) = attention_read(raw_summary, bound.get("fusion1.query")?, conv_seq, conv_seq)?;
            // stage 2: first context against the intermediate BiLSTM outputs
            let (c2, a2) = attention_read(c1, bound.get("fusion2.query")?, lstm0, lstm0)?;
            stage_weights.push(a1);
            stage_weights.push(a2);
            c2
        } else {
            lstm1.slice(1, tp / 2, tp / 2 + 1)?.reshape(&[n, two_h])?
        };
        // final read against the last BiLSTM outputs
        let (context, alpha) = attention_read(final_summary, bound.get("attn.query")?, lstm1, lstm1)?;
        stage_weights.push(alpha);
        let h = dense_of(context, "head0", Activation::Relu)?;
        let logits = dense_of(h, "head1", Activation::None)?;
        Ok(ForwardOutput {
            logits,
            stage_weights,
            bn_updates,
        })
    }

    /// Inference-mode logits for an N×T×D batch; no gradients, no state change.
    pub fn infer_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let input = g.constant(batch.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&bound, input, Mode::Infer, &mut rng)?;
        Ok(out.logits.value().as_ref().clone())
    }
}

/// Forward pass in the model's current mode. Train mode applies dropout
/// from `rng` and updates batch-norm running statistics.
pub fn model_forward(model: &mut Model, batch: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let g = Graph::new();
    let bound = model.bind(&g, false);
    let input = g.constant(batch.clone());
    let out = model.forward(&bound, input, model.mode, rng)?;
    let logits = out.logits.value().as_ref().clone();
    model.apply_bn_updates(out.bn_updates);
    Ok(logits)
}

/// Stacks feature matrices into an N×T×D tensor.
pub fn stack_features(features: &[&FeatureMatrix]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| KwsError::Data("empty feature batch".into()))?;
    let (t, d) = (first.frames(), first.dim());
    let mut data = Vec::with_capacity(features.len() * t * d);
    for f in features {
        if (f.frames(), f.dim()) != (t, d) {
            return Err(KwsError::shape(
                "stack_features",
                format!("{}x{} vs {t}x{d}", f.frames(), f.dim()),
            ));
        }
        data.extend_from_slice(&f.values.data);
    }
    Tensor::new(&[features.len(), t, d], data)
}

/// Inference on one T×D feature matrix of a `multilayer_attention` model:
/// logits and the three stage weight vectors.
pub fn multilayer_attention_forward(features: &FeatureMatrix, model: &Model) -> Result<(Tensor, [Tensor; 3])> {
    if model.arch() != Arch::MultilayerAttention {
        return Err(KwsError::Usage(format!(
            "multilayer_attention_forward on a {} model",
            model.arch()
        )));
    }
    let batch = stack_features(&[features])?;
    let g = Graph::new();
    let bound = model.bind(&g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&bound, g.constant(batch), Mode::Infer, &mut rng)?;
    let w: Vec<Tensor> = out
        .stage_weights
        .iter()
        .map(|v| {
            let t = v.value();
            Tensor::from_vec(&[t.numel()], t.data().to_vec())
        })
        .collect();
    let logits = out.logits.value();
    Ok((
        Tensor::from_vec(&[logits.numel()], logits.data().to_vec()),
        [w[0].clone(), w[1].clone(), w[2].clone()],
    ))
}

/// Softmax of a logit row.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode prediction: (label index, class probabilities).
pub fn predict(model: &Model, features: &FeatureMatrix) -> Result<(usize, Vec<f64>)> {
    let logits = model.infer_logits(&stack_features(&[features])?)?;
    let probs = softmax_row(logits.data());
    Ok((argmax(&probs), probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Arch) -> ModelConfig {
        let mut c = ModelConfig::new(arch, 3, (8, 8));
        c.conv_channels = vec![2; arch.conv_blocks()];
        c.lstm_hidden = 3;
        c.dense_hidden = 4;
        c.seed = 5;
        c
    }

    #[test]
    fn build_is_deterministic() {
        for arch in Arch::ALL {
            let a = Model::build(tiny(arch)).unwrap();
            let b = Model::build(tiny(arch)).unwrap();
            assert_eq!(a.params(), b.params());
        }
    }

    #[test]
    fn config_errors_name_stage() {
        let mut c = ModelConfig::new(Arch::Cnn, 20, (6, 4));
        let err = Model::build(c.clone()).unwrap_err();
        assert!(err.to_string().contains("conv block 2"), "{err}");
        c.conv_padding = Padding::Valid;
        let err = Model::build(c.clone()).unwrap_err();
        assert!(err.to_string().contains("conv block 1"), "{err}");
        c.input_shape = (2, 4);
        let err = Model::build(c).unwrap_err();
        assert!(err.to_string().contains("conv block 0"), "{err}");
        let c = ModelConfig::new(Arch::AttentionRnn, 1, (98, 40));
        assert!(Model::build(c).is_err());
        let mut c = ModelConfig::new(Arch::AttentionRnn, 2, (98, 40));
        c.conv_channels = vec![8, 8, 8];
        assert!(Model::build(c).is_err());
    }

    #[test]
    fn cnn_output_dim() {
        let mut c = ModelConfig::new(Arch::Cnn, 20, (98, 20));
        c.conv_channels = vec![4, 4, 4];
        c.dense_hidden = 8;
        let model = Model::build(c).unwrap();
        let logits = model.infer_logits(&Tensor::zeros(&[2, 98, 20])).unwrap();
        assert_eq!(logits.shape(), &[2, 20]);
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        for arch in Arch::ALL {
            let model = Model::build(tiny(arch)).unwrap();
            let logits = model.infer_logits(&Tensor::zeros(&[1, 8, 8])).unwrap();
            assert!(logits.all_finite());
            let p = softmax_row(logits.data());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_batch_shape() {
        let model = Model::build(tiny(Arch::Cnn)).unwrap();
        assert!(model.infer_logits(&Tensor::zeros(&[1, 8, 7])).is_err());
    }

    #[test]
    fn predict_tie_and_shift() {
        assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        let p = softmax_row(&[50.0, 0.0, 0.0]);
        assert!(p[0] > 0.999999);
        let uniform = softmax_row(&[2.0; 4]);
        assert!(uniform.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut model = Model::build(tiny(Arch::CnnBilstm)).unwrap();
        let before = model.params()["conv0.bn.running_mean"].value.clone();
        let batch = Tensor::from_vec(&[2, 8, 8], (0..128).map(|i| (i as f64 * 0.37).sin()).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        model_forward(&mut model, &batch, &mut rng).unwrap();
        assert_ne!(model.params()["conv0.bn.running_mean"].value, before);
        model.mode = Mode::Infer;
        let snapshot = model.clone();
        model_forward(&mut model, &batch, &mut rng).unwrap();
        assert_eq!(model, snapshot);
    }
}
