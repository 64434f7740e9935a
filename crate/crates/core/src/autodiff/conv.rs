//! Convolution and pooling kernels (im2col + GEMM), shared by the graph's
//! forward and backward rules.

use super::tensor::Tensor;
use crate::error::{KwsError, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output is `ceil(input / stride)` on each axis.
    Same,
    /// No padding.
    Valid,
}

impl Padding {
    pub fn name(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "same" => Some(Padding::Same),
            "valid" => Some(Padding::Valid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pt: usize,
    pub pl: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: (usize, usize), padding: Padding) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(KwsError::shape(
                "conv2d",
                format!("input {input:?} and kernel {kernel:?} must both be rank 4"),
            ));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c {
            return Err(KwsError::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c}"),
            ));
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 || kh == 0 || kw == 0 || o == 0 {
            return Err(KwsError::shape("conv2d", "kernel dims and strides must be positive"));
        }
        let (oh, ow, pt, pl) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(sh);
                let ow = w.div_ceil(sw);
                let ph = ((oh - 1) * sh + kh).saturating_sub(h);
                let pw = ((ow - 1) * sw + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(KwsError::shape(
                        "conv2d",
                        format!("{h}x{w} input smaller than {kh}x{kw} kernel"),
                    ));
                }
                ((h - kh) / sh + 1, (w - kw) / sw + 1, 0, 0)
            }
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            sh,
            sw,
            pt,
            pl,
            oh,
            ow,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate for output position and kernel offset, if in bounds.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.sh + ky).checked_sub(self.pt)?;
        let ix = (ox * self.sw + kx).checked_sub(self.pl)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch() * p];
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                cols[r * p + oy * self.ow + ox] = x[(c * self.h + iy) * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                dx[(c * self.h + iy) * self.w + ix] += cols[r * p + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += av * bv;
            }
        }
    }
}

/// out[m×k] += a[m×n] · b[k×n]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, g: &ConvGeometry) -> Tensor {
    let (patch, p) = (g.patch(), g.positions());
    let in_len = g.c * g.h * g.w;
    let per_sample = par::map_range(g.n, |i| {
        let cols = g.im2col(&x.data()[i * in_len..(i + 1) * in_len]);
        let mut out = vec![0.0; g.o * p];
        if let Some(b) = bias {
            for (o, bv) in b.data().iter().enumerate() {
                out[o * p..(o + 1) * p].fill(*bv);
            }
        }
        gemm(kernel.data(), &cols, g.o, patch, p, &mut out);
        out
    });
    Tensor::from_vec(&[g.n, g.o, g.oh, g.ow], per_sample.concat())
}

/// Returns (d input, d kernel, d bias).
pub(crate) fn conv2d_backward(x: &Tensor, kernel: &Tensor, dy: &Tensor, g: &ConvGeometry) -> (Tensor, Tensor, Tensor) {
    let (patch, p) = (g.patch(), g.positions());
    let in_len = g.c * g.h * g.w;
    let parts = par::map_range(g.n, |i| {
        let cols = g.im2col(&x.data()[i * in_len..(i + 1) * in_len]);
        let dy_i = &dy.data()[i * g.o * p..(i + 1) * g.o * p];
        let mut dk = vec![0.0; g.o * patch];
        gemm_nt(dy_i, &cols, g.o, p, patch, &mut dk);
        let mut dcols = vec![0.0; patch * p];
        gemm_tn(kernel.data(), dy_i, g.o, patch, p, &mut dcols);
        let mut dx = vec![0.0; in_len];
        g.col2im(&dcols, &mut dx);
        (dx, dk)
    });
    let mut dk = vec![0.0; g.o * patch];
    let mut dx = Vec::with_capacity(g.n * in_len);
    for (dx_i, dk_i) in parts {
        dx.extend_from_slice(&dx_i);
        for (a, b) in dk.iter_mut().zip(&dk_i) {
            *a += b;
        }
    }
    let mut db = vec![0.0; g.o];
    for i in 0..g.n {
        for (o, d) in db.iter_mut().enumerate() {
            let start = (i * g.o + o) * p;
            *d += dy.data()[start..start + p].iter().sum::<f64>();
        }
    }
    (
        Tensor::from_vec(x.shape(), dx),
        Tensor::from_vec(kernel.shape(), dk),
        Tensor::from_vec(&[g.o], db),
    )
}

/// Max pooling over the last two axes of an N×C×H×W tensor. Returns the
/// output and, per output element, the flat input index of its maximum
/// (first in scan order on ties).
pub(crate) fn max_pool_forward(
    x: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(KwsError::shape("max_pool", format!("expected rank 4, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = window;
    let (sh, sw) = stride;
    if ph == 0 || pw == 0 || sh == 0 || sw == 0 || ph > h || pw > w {
        return Err(KwsError::shape(
            "max_pool",
            format!("window {ph}x{pw} stride {sh}x{sw} on {h}x{w}"),
        ));
    }
    let (oh, ow) = ((h - ph) / sh + 1, (w - pw) / sw + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * sh * w + ox * sw;
                for ky in 0..ph {
                    for kx in 0..pw {
                        let at = base + (oy * sh + ky) * w + ox * sw + kx;
                        if data[at] > data[best] {
                            best = at;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out), argmax))
}

pub(crate) fn max_pool_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&src, g) in argmax.iter().zip(dy.data()) {
        d[src] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_output_size() {
        let g = ConvGeometry::new(&[1, 1, 5, 7], &[1, 1, 3, 3], (2, 2), Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (3, 4));
        let g = ConvGeometry::new(&[1, 1, 5, 7], &[1, 1, 3, 3], (1, 1), Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow, g.pt, g.pl), (5, 7, 1, 1));
        let g = ConvGeometry::new(&[1, 1, 5, 7], &[1, 1, 3, 3], (1, 1), Padding::Valid).unwrap();
        assert_eq!((g.oh, g.ow), (3, 5));
        assert!(ConvGeometry::new(&[1, 2, 5, 7], &[1, 1, 3, 3], (1, 1), Padding::Valid).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 7], &[1, 1, 3, 3], (1, 1), Padding::Valid).is_err());
    }

    #[test]
    fn pool_tie_goes_to_first() {
        let x = Tensor::full(&[1, 1, 2, 2], 3.0);
        let (y, arg) = max_pool_forward(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(arg, vec![0]);
    }
}
