//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use kws::autodiff::{Graph, Padding, Tensor, Var};
use kws::dsp::{Matrix, MelFilterBank};
use kws::models::{Arch, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

/// One-sided |X(k)|², k = 0..=n/2, by the O(N²) definition.
pub fn naive_dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

pub fn naive_mel_energies(spectra: &Matrix, bank: &MelFilterBank) -> Matrix {
    let mut out = Matrix::zeros(spectra.rows, bank.n_filters());
    for t in 0..spectra.rows {
        for m in 0..bank.n_filters() {
            let mut acc = 0.0;
            for k in 0..spectra.cols {
                acc += bank.weights.get(m, k) * spectra.get(t, k);
            }
            out.set(t, m, acc);
        }
    }
    out
}

pub fn naive_dct_ii(row: &[f64], n_out: usize) -> Vec<f64> {
    let m = row.len() as f64;
    (0..n_out)
        .map(|c| {
            let s = if c == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            s * row
                .iter()
                .enumerate()
                .map(|(i, x)| x * (PI * c as f64 * (2 * i + 1) as f64 / (2.0 * m)).cos())
                .sum::<f64>()
        })
        .collect()
}

fn same_pad(size: usize, k: usize, s: usize) -> (usize, usize) {
    let out = size.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(size);
    (out, total / 2)
}

/// Cross-correlation with nested loops over n, o, i, y, x, ky, kx.
pub fn naive_conv2d(x: &Tensor, k: &Tensor, bias: &[f64], stride: (usize, usize), padding: Padding) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ((oh, pt), (ow, pl)) = match padding {
        Padding::Same => (same_pad(h, kh, stride.0), same_pad(w, kw, stride.1)),
        Padding::Valid => (((h - kh) / stride.0 + 1, 0), ((w - kw) / stride.1 + 1, 0)),
    };
    let xv = |b: usize, ch: usize, yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data()[((b * c + ch) * h + yy as usize) * w + xx as usize]
        }
    };
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride.0 + dy) as isize - pt as isize;
                                let ix = (xx * stride.1 + dx) as isize - pl as isize;
                                acc += xv(b, ic, iy, ix) * k.data()[((oc * c + ic) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, oh, ow], out)
}

pub fn naive_max_pool(x: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h - window.0) / stride.0 + 1;
    let ow = (w - window.1) / stride.1 + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..window.0 {
                        for dx in 0..window.1 {
                            let v = x.data()[((b * c + ch) * h + y * stride.0 + dy) * w + xx * stride.1 + dx];
                            best = best.max(v);
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

/// `Σ w ⊙ y` with fixed random weights, so the scalar depends on every
/// output element non-trivially.
pub fn weighted_sum<'g>(y: Var<'g>, seed: u64) -> kws::Result<Var<'g>> {
    let shape = y.shape();
    let w = Tensor::uniform(&shape, 1.0, &mut rng(seed));
    y.mul(y.graph().constant(w))?.sum_all()
}

pub fn random_in(r: &mut impl Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

/// Smallest configs of each architecture that still exercise every stage.
pub fn tiny_config(arch: Arch) -> ModelConfig {
    let input = if arch == Arch::Cnn { (8, 8) } else { (6, 4) };
    let mut c = ModelConfig::new(arch, 2, input);
    c.conv_channels = vec![2; arch.conv_blocks()];
    c.lstm_hidden = 3;
    c.dense_hidden = 4;
    c.dropout_rate = 0.0;
    c.seed = 3;
    c
}

pub fn graph_value(f: impl for<'g> Fn(&'g Graph) -> kws::Result<Var<'g>>) -> Tensor {
    let g = Graph::new();
    f(&g).unwrap().value().as_ref().clone()
}
