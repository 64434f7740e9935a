use rand::Rng;

use crate::error::{KwsError, Result};
use crate::par;

/// Dense row-major `f64` array. An empty shape is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(KwsError::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(shape, data).expect("tensor data length matches shape")
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[-limit, limit]`.
    pub fn uniform(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                if limit > 0.0 {
                    rng.gen_range(-limit..=limit)
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(KwsError::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(KwsError::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|d| {
            if d < off || shape[d - off] == 1 {
                0
            } else {
                own[d - off]
            }
        })
        .collect()
}

/// Visits every output index with the matching input offsets.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    let nd = out.len();
    let mut idx = vec![0; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn zip_broadcast(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(op, &a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; numel(&out)];
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(a.data[ia], b.data[ib]));
    Ok(Tensor { shape: out, data })
}

/// Sums `grad` (shaped like a broadcast result) back down to `target`.
pub(crate) fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let st = broadcast_strides(target, &grad.shape);
    let zero = vec![0; grad.shape.len()];
    let mut data = vec![0.0; numel(target)];
    for_each_broadcast(&grad.shape, &st, &zero, |o, it, _| data[it] += grad.data[o]);
    Tensor {
        shape: target.to_vec(),
        data,
    }
}

pub(crate) fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let out = broadcast_shape("broadcast", &t.shape, shape)?;
    if out != shape {
        return Err(KwsError::shape(
            "broadcast",
            format!("{:?} does not broadcast to {shape:?}", t.shape),
        ));
    }
    let st = broadcast_strides(&t.shape, shape);
    let zero = vec![0; shape.len()];
    let mut data = vec![0.0; numel(shape)];
    for_each_broadcast(shape, &st, &zero, |o, it, _| data[o] = t.data[it]);
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// (outer, axis_len, inner) decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(KwsError::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

pub(crate) fn sum_axis(t: &Tensor, axis: usize, keepdim: bool) -> Tensor {
    let (outer, n, inner) = axis_split(&t.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let src = &t.data[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = t.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Tensor { shape, data }
}

pub(crate) fn softmax_axis(t: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(&t.shape, axis);
    let mut data = t.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (data[at(j)] - max).exp();
                data[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                data[at(j)] /= total;
            }
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

/// dx = y ⊙ (dy − Σ_axis dy ⊙ y).
pub(crate) fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(&y.shape, axis);
    let mut data = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| dy.data[at(j)] * y.data[at(j)]).sum();
            for j in 0..n {
                data[at(j)] = y.data[at(j)] * (dy.data[at(j)] - dot);
            }
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data,
    }
}

/// Row-blocks below this many multiply-adds run on the calling thread.
const PAR_MATMUL_WORK: usize = 1 << 15;

/// `[m, k] × [k, n]`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(KwsError::shape("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    let row = |i: usize, dst: &mut [f64]| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (d, bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    };
    if n > 0 && m * n * k >= PAR_MATMUL_WORK && m > 1 {
        par::for_each_chunk_mut(&mut out, n, row);
    } else if n > 0 {
        for (i, dst) in out.chunks_mut(n).enumerate() {
            row(i, dst);
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub(crate) fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let nd = t.rank();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(KwsError::shape(
            "transpose",
            format!("invalid permutation {perm:?} for {:?}", t.shape),
        ));
    }
    let shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let src = strides(&t.shape);
    let sp: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let zero = vec![0; nd];
    let mut data = vec![0.0; t.numel()];
    for_each_broadcast(&shape, &sp, &zero, |o, i, _| data[o] = t.data[i]);
    Ok(Tensor { shape, data })
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| KwsError::shape("concat", "no inputs"))?;
    check_axis("concat", &first.shape, axis)?;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let same_other = same_rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !same_other {
            return Err(KwsError::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", p.shape, first.shape),
            ));
        }
    }
    let (outer, _, inner) = axis_split(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let len = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
        }
    }
    Ok(Tensor { shape, data })
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis("slice", &t.shape, axis)?;
    if start >= end || end > t.shape[axis] {
        return Err(KwsError::shape(
            "slice",
            format!("range {start}..{end} on axis {axis} of {:?}", t.shape),
        ));
    }
    let (outer, n, inner) = axis_split(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = end - start;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        data.extend_from_slice(&t.data[(o * n + start) * inner..(o * n + end) * inner]);
    }
    Ok(Tensor { shape, data })
}

/// Scatters `grad` (the slice) into zeros of `full` shape.
pub(crate) fn unslice(grad: &Tensor, full: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, n, inner) = axis_split(full, axis);
    let len = grad.shape[axis];
    let mut data = vec![0.0; numel(full)];
    for o in 0..outer {
        let dst = (o * n + start) * inner;
        data[dst..dst + len * inner].copy_from_slice(&grad.data[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor {
        shape: full.to_vec(),
        data,
    }
}
