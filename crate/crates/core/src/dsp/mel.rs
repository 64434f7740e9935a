use super::{DspConfig, Matrix};
use crate::error::{KwsError, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters `H_m(k)` over the one-sided FFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterBank {
    /// M rows × (n_fft/2 + 1) columns.
    pub weights: Matrix,
    /// FFT bin of each of the M + 2 mel points, `f(0)..f(M+1)`.
    pub center_bins: Vec<usize>,
}

impl MelFilterBank {
    pub fn n_filters(&self) -> usize {
        self.weights.rows
    }

    pub fn n_bins(&self) -> usize {
        self.weights.cols
    }

    /// Row for filter `m` in 1..=M.
    pub fn filter(&self, m: usize) -> &[f64] {
        self.weights.row(m - 1)
    }
}

/// Builds M triangular filters with centers equally spaced in mel between
/// `fmin` and `fmax`, mapped to bins by `floor((n_fft + 1)·hz / sample_rate)`.
///
/// Filter m rises on `[f(m-1), f(m)]` and falls on `[f(m), f(m+1)]`. The
/// falling edge is deliberately on the upper interval; writing both edges
/// over `[f(m-1), f(m)]` would not describe a triangle.
pub fn build_mel_filterbank(config: &DspConfig) -> Result<MelFilterBank> {
    config.validate()?;
    let m_count = config.n_mel_filters;
    let n_bins = config.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax));
    let step = (hi - lo) / (m_count + 1) as f64;
    let center_bins: Vec<usize> = (0..m_count + 2)
        .map(|i| {
            let hz = mel_to_hz(lo + step * i as f64);
            ((config.n_fft + 1) as f64 * hz / config.sample_rate as f64).floor() as usize
        })
        .collect();
    for (i, pair) in center_bins.windows(2).enumerate() {
        if pair[0] >= pair[1] {
            return Err(KwsError::Dsp(format!(
                "mel points {i} and {} share FFT bin {}; use a larger n_fft or fewer filters",
                i + 1,
                pair[0]
            )));
        }
    }
    if center_bins[m_count + 1] >= n_bins {
        return Err(KwsError::Dsp(format!(
            "upper filter edge at bin {} beyond the {} one-sided bins",
            center_bins[m_count + 1],
            n_bins
        )));
    }
    let mut weights = Matrix::zeros(m_count, n_bins);
    for m in 1..=m_count {
        let (left, center, right) = (center_bins[m - 1], center_bins[m], center_bins[m + 1]);
        let row = weights.row_mut(m - 1);
        for (k, w) in row.iter_mut().enumerate().take(center + 1).skip(left) {
            *w = (k - left) as f64 / (center - left) as f64;
        }
        for (k, w) in row.iter_mut().enumerate().take(right + 1).skip(center) {
            *w = (right - k) as f64 / (right - center) as f64;
        }
    }
    Ok(MelFilterBank { weights, center_bins })
}

/// MELSPEC[t][m] = Σ_k H_m(k)·P[t][k].
pub fn mel_energies(spectra: &Matrix, bank: &MelFilterBank) -> Result<Matrix> {
    if spectra.cols != bank.n_bins() {
        return Err(KwsError::Dsp(format!(
            "spectrum has {} bins, filterbank expects {}",
            spectra.cols,
            bank.n_bins()
        )));
    }
    let mut out = Matrix::zeros(spectra.rows, bank.n_filters());
    for t in 0..spectra.rows {
        let p = spectra.row(t);
        for m in 0..bank.n_filters() {
            let (left, right) = (bank.center_bins[m], bank.center_bins[m + 2]);
            let h = bank.weights.row(m);
            let mut acc = 0.0;
            for k in left..=right {
                acc += h[k] * p[k];
            }
            out.set(t, m, acc);
        }
    }
    Ok(out)
}

/// Elementwise `ln(max(e, floor))`.
pub fn log_compress(energies: &Matrix, log_floor: f64) -> Matrix {
    Matrix {
        rows: energies.rows,
        cols: energies.cols,
        data: energies.data.iter().map(|e| e.max(log_floor).ln()).collect(),
    }
}

/// Orthonormal DCT-II basis, `n_out` rows × `n_in` columns.
pub fn dct_basis(n_in: usize, n_out: usize) -> Matrix {
    let mut basis = Matrix::zeros(n_out, n_in);
    let len = n_in as f64;
    for c in 0..n_out {
        let s = if c == 0 { (1.0 / len).sqrt() } else { (2.0 / len).sqrt() };
        for m in 0..n_in {
            let arg = std::f64::consts::PI * c as f64 * (2 * m + 1) as f64 / (2.0 * len);
            basis.set(c, m, s * arg.cos());
        }
    }
    basis
}

/// Orthonormal DCT-II of each row, keeping the first `n_out` coefficients.
pub fn dct_ii(input: &Matrix, n_out: usize) -> Result<Matrix> {
    if n_out > input.cols {
        return Err(KwsError::Dsp(format!(
            "cannot keep {n_out} coefficients of a {}-point DCT",
            input.cols
        )));
    }
    let basis = dct_basis(input.cols, n_out);
    Ok(project_rows(input, &basis))
}

/// Inverse of the full-length orthonormal DCT-II (a DCT-III).
pub fn dct_iii(coeffs: &Matrix) -> Matrix {
    let basis = dct_basis(coeffs.cols, coeffs.cols);
    let mut out = Matrix::zeros(coeffs.rows, coeffs.cols);
    for t in 0..coeffs.rows {
        let y = coeffs.row(t);
        for m in 0..coeffs.cols {
            let mut acc = 0.0;
            for (c, yc) in y.iter().enumerate() {
                acc += basis.get(c, m) * yc;
            }
            out.set(t, m, acc);
        }
    }
    out
}

pub(crate) fn project_rows(input: &Matrix, basis: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(input.rows, basis.rows);
    for t in 0..input.rows {
        let x = input.row(t);
        for c in 0..basis.rows {
            let acc: f64 = basis.row(c).iter().zip(x).map(|(b, v)| b * v).sum();
            out.set(t, c, acc);
        }
    }
    out
}
