//! Neural building blocks expressed over autodiff [`Var`]s.
//!
//! Layers are functions of (input, parameter vars, mode, rng). Parameter
//! tensors live with the model; it binds them into a graph before a forward
//! pass.

use rand::Rng;

use crate::autodiff::{Graph, Padding, Tensor, Var};
use crate::error::{KwsError, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Glorot-uniform limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Convolution weights: kernels O×C×KH×KW and per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvParams {
    pub fn init(in_ch: usize, out_ch: usize, kernel: (usize, usize), padding: Padding, rng: &mut impl Rng) -> Self {
        let (kh, kw) = kernel;
        let limit = glorot_limit(in_ch * kh * kw, out_ch * kh * kw);
        Self {
            kernels: Tensor::uniform(&[out_ch, in_ch, kh, kw], limit, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride: (1, 1),
            padding,
        }
    }
}

pub fn conv2d<'g>(
    input: Var<'g>,
    kernels: Var<'g>,
    bias: Option<Var<'g>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Var<'g>> {
    input.conv2d(kernels, bias, stride, padding)
}

pub fn max_pool<'g>(input: Var<'g>, window: (usize, usize), stride: (usize, usize)) -> Result<Var<'g>> {
    input.max_pool(window, stride)
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

/// Shape `[1, C, 1, ...]` used to broadcast per-channel values.
fn channel_shape(rank: usize, c: usize) -> Vec<usize> {
    let mut s = vec![1; rank];
    s[1] = c;
    s
}

/// Batch normalization over every axis except 1 (channels) of an N×C or
/// N×C×H×W input. Train mode normalizes by the biased batch variance and
/// returns updated running statistics; infer mode uses `stats`.
pub fn batch_norm<'g>(
    input: Var<'g>,
    gamma: Var<'g>,
    beta: Var<'g>,
    stats: &RunningStats,
    mode: Mode,
) -> Result<(Var<'g>, Option<RunningStats>)> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(KwsError::shape(
            "batch_norm",
            format!("input {shape:?} has no channel axis"),
        ));
    }
    let c = shape[1];
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.shape() != [c] {
        return Err(KwsError::shape(
            "batch_norm",
            format!("{c} channels but gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let g = input.graph();
    let cs = channel_shape(shape.len(), c);
    let gamma_b = gamma.reshape(&cs)?;
    let beta_b = beta.reshape(&cs)?;
    match mode {
        Mode::Train => {
            // channels first, everything else flattened: C × (N·H·W)
            let mut perm: Vec<usize> = (0..shape.len()).collect();
            perm.swap(0, 1);
            let moved = input.transpose(&perm)?;
            let moved_shape = moved.shape();
            let flat = moved.reshape(&[c, input.value().numel() / c])?;
            let mean = flat.mean(1, true)?;
            let centered = flat.sub(mean)?;
            let var = centered.mul(centered)?.mean(1, true)?;
            let inv_std = var.offset(BATCH_NORM_EPS).powf(-0.5);
            let normed = centered.mul(inv_std)?.reshape(&moved_shape)?.transpose(&perm)?;
            let out = normed.mul(gamma_b)?.add(beta_b)?;
            let blend = |running: &Tensor, batch: &Tensor| {
                let data = running
                    .data()
                    .iter()
                    .zip(batch.data())
                    .map(|(r, b)| BATCH_NORM_MOMENTUM * r + (1.0 - BATCH_NORM_MOMENTUM) * b)
                    .collect();
                Tensor::from_vec(&[c], data)
            };
            let updated = RunningStats {
                mean: blend(&stats.mean, &mean.value()),
                var: blend(&stats.var, &var.value()),
            };
            Ok((out, Some(updated)))
        }
        Mode::Infer => {
            let mean = g.constant(stats.mean.reshaped(&cs)?);
            let inv_std = g.constant(stats.var.map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).reshaped(&cs)?);
            let out = input.sub(mean)?.mul(inv_std)?.mul(gamma_b)?.add(beta_b)?;
            Ok((out, None))
        }
    }
}

/// Inverted dropout: in train mode each element survives with probability
/// `1 − rate` and survivors are scaled by `1 / (1 − rate)`.
pub fn dropout<'g>(input: Var<'g>, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var<'g>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(KwsError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(input);
    }
    let shape = input.shape();
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(&shape);
    for m in mask.data_mut() {
        if rng.gen::<f64>() >= rate {
            *m = keep;
        }
    }
    input.mul(input.graph().constant(mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Tanh,
    Softmax,
}

/// `activation(input · weights + bias)` for an N×in input.
pub fn dense<'g>(input: Var<'g>, weights: Var<'g>, bias: Var<'g>, activation: Activation) -> Result<Var<'g>> {
    let z = input.matmul(weights)?.add(bias)?;
    Ok(match activation {
        Activation::None => z,
        Activation::Relu => z.relu(),
        Activation::Tanh => z.tanh(),
        Activation::Softmax => z.softmax(1)?,
    })
}

/// Gate order used for fused LSTM weights.
pub const LSTM_GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Per-gate LSTM weights: `w_*` input→hidden, `u_*` hidden→hidden, `b_*`.
/// Arrays are indexed in [`LSTM_GATES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w: [Tensor; 4],
    pub u: [Tensor; 4],
    pub b: [Tensor; 4],
    pub hidden: usize,
}

impl LstmParams {
    /// Glorot-uniform weights, zero biases except the forget gate at 1.0.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w = std::array::from_fn(|_| Tensor::uniform(&[input, hidden], glorot_limit(input, hidden), rng));
        let u = std::array::from_fn(|_| Tensor::uniform(&[hidden, hidden], glorot_limit(hidden, hidden), rng));
        let b = std::array::from_fn(|i| {
            if LSTM_GATES[i] == "f" {
                Tensor::ones(&[hidden])
            } else {
                Tensor::zeros(&[hidden])
            }
        });
        Self { w, u, b, hidden }
    }

    pub fn input_size(&self) -> usize {
        self.w[0].shape()[0]
    }

    /// `(suffix, tensor)` pairs such as `("w_i", ..)`.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(12);
        for (kind, set) in [("w", &self.w), ("u", &self.u), ("b", &self.b)] {
            for (gate, t) in LSTM_GATES.iter().zip(set.iter()) {
                out.push((format!("{kind}_{gate}"), t.clone()));
            }
        }
        out
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Result<LstmVars<'g>> {
        let leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        LstmVars::new(
            self.w.each_ref().map(leaf),
            self.u.each_ref().map(leaf),
            self.b.each_ref().map(leaf),
        )
    }
}

/// LSTM weights bound into a graph, gates fused along the column axis.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars<'g> {
    w: Var<'g>,
    u: Var<'g>,
    b: Var<'g>,
    hidden: usize,
}

impl<'g> LstmVars<'g> {
    pub fn new(w: [Var<'g>; 4], u: [Var<'g>; 4], b: [Var<'g>; 4]) -> Result<Self> {
        let ws = w[0].shape();
        if ws.len() != 2 {
            return Err(KwsError::shape("lstm", format!("w_i shape {ws:?}")));
        }
        let hidden = ws[1];
        for i in 0..4 {
            if w[i].shape() != ws || u[i].shape() != [hidden, hidden] || b[i].shape() != [hidden] {
                return Err(KwsError::shape(
                    "lstm",
                    format!(
                        "gate {}: w {:?}, u {:?}, b {:?} for hidden size {hidden}",
                        LSTM_GATES[i],
                        w[i].shape(),
                        u[i].shape(),
                        b[i].shape()
                    ),
                ));
            }
        }
        let g = w[0].graph();
        Ok(Self {
            w: g.concat(&w, 1)?,
            u: g.concat(&u, 1)?,
            b: g.concat(&b, 0)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn gates(&self, pre: Var<'g>, c: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let h = self.hidden;
        let i = pre.slice(1, 0, h)?.sigmoid();
        let f = pre.slice(1, h, 2 * h)?.sigmoid();
        let o = pre.slice(1, 2 * h, 3 * h)?.sigmoid();
        let cand = pre.slice(1, 3 * h, 4 * h)?.tanh();
        let c_next = f.mul(c)?.add(i.mul(cand)?)?;
        let h_next = o.mul(c_next.tanh())?;
        Ok((h_next, c_next))
    }

    /// One step for an N×in input and N×H state:
    /// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
    pub fn step(&self, x: Var<'g>, h: Var<'g>, c: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let pre = x.matmul(self.w)?.add(self.b)?.add(h.matmul(self.u)?)?;
        self.gates(pre, c)
    }

    /// Runs over an N×T×in sequence from zero state, returning N×T×H
    /// outputs in input time order. `reverse` scans right to left.
    pub fn sequence(&self, seq: Var<'g>, reverse: bool) -> Result<Var<'g>> {
        let s = seq.shape();
        if s.len() != 3 {
            return Err(KwsError::shape("lstm", format!("sequence must be N×T×D, got {s:?}")));
        }
        let (n, t_len, d) = (s[0], s[1], s[2]);
        let g = seq.graph();
        let h4 = 4 * self.hidden;
        let projected = seq
            .reshape(&[n * t_len, d])?
            .matmul(self.w)?
            .add(self.b)?
            .reshape(&[n, t_len, h4])?;
        let mut h = g.constant(Tensor::zeros(&[n, self.hidden]));
        let mut c = g.constant(Tensor::zeros(&[n, self.hidden]));
        let mut outputs = vec![None; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let pre = projected
                .slice(1, t, t + 1)?
                .reshape(&[n, h4])?
                .add(h.matmul(self.u)?)?;
            let (hn, cn) = self.gates(pre, c)?;
            h = hn;
            c = cn;
            outputs[t] = Some(h.reshape(&[n, 1, self.hidden])?);
        }
        let outputs: Vec<Var<'g>> = outputs.into_iter().flatten().collect();
        g.concat(&outputs, 1)
    }
}

/// Bidirectional LSTM: forward and backward outputs concatenated per step,
/// N×T×(H_fwd + H_bwd).
pub fn bilstm_sequence<'g>(seq: Var<'g>, fwd: &LstmVars<'g>, bwd: &LstmVars<'g>) -> Result<Var<'g>> {
    let f = fwd.sequence(seq, false)?;
    let b = bwd.sequence(seq, true)?;
    seq.graph().concat(&[f, b], 2)
}

/// Scaled dot-product attention for a batch.
///
/// `query` is N×d_k, `keys` N×T×d_k, `values` N×T×d_v. Scores are
/// `query·key_t / sqrt(d_k)`; returns the N×d_v context and N×T weights.
pub fn attention<'g>(query: Var<'g>, keys: Var<'g>, values: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let (qs, ks, vs) = (query.shape(), keys.shape(), values.shape());
    if qs.len() != 2 || ks.len() != 3 || vs.len() != 3 || qs[0] != ks[0] || qs[1] != ks[2] || vs[..2] != ks[..2] {
        return Err(KwsError::shape(
            "attention",
            format!("query {qs:?}, keys {ks:?}, values {vs:?}"),
        ));
    }
    let (n, t_len, dk) = (ks[0], ks[1], ks[2]);
    let scores = keys
        .mul(query.reshape(&[n, 1, dk])?)?
        .sum(2, false)?
        .scale(1.0 / (dk as f64).sqrt());
    let weights = scores.softmax(1)?;
    let context = values.mul(weights.reshape(&[n, t_len, 1])?)?.sum(1, false)?;
    Ok((context, weights))
}

/// Learned query projection feeding [`attention`]; the score scale is
/// `1/sqrt(d_k)` with `d_k` the projection's output width.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query_proj: Tensor,
}

impl AttentionParams {
    pub fn init(summary_dim: usize, key_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query_proj: Tensor::uniform(&[summary_dim, key_dim], glorot_limit(summary_dim, key_dim), rng),
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.query_proj.shape()[1] as f64).sqrt()
    }
}

/// Projects an N×d_s summary into a query and attends over `keys`/`values`.
pub fn attention_read<'g>(
    summary: Var<'g>,
    query_proj: Var<'g>,
    keys: Var<'g>,
    values: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    attention(summary.matmul(query_proj)?, keys, values)
}
