//! MFCC / log-mel front end.
//!
//! The pipeline is pre-emphasis, framing, windowing, a radix-2 power
//! spectrum, triangular mel filtering, log compression and an orthonormal
//! DCT-II. Every stage is a free function so it can be tested on its own;
//! [`Featurizer`] caches the FFT plan, window, filterbank and DCT basis for
//! repeated use.

mod fft;
mod mel;

pub use fft::Radix2Fft;
pub use mel::{
    build_mel_filterbank, dct_basis, dct_ii, dct_iii, hz_to_mel, log_compress, mel_energies, mel_to_hz, MelFilterBank,
};

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::audio_io::AudioClip;
use crate::error::{KwsError, Result};
use crate::par;

/// Dense row-major matrix used by the DSP stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hamming,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hamming if len == 1 => vec![1.0],
            Window::Hamming => (0..len)
                .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
                .collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Hamming => "hamming",
            Window::Rectangular => "rectangular",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hamming" => Some(Window::Hamming),
            "rectangular" | "rect" => Some(Window::Rectangular),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Mfcc,
    LogMel,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::LogMel => "log_mel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mfcc" => Some(FeatureKind::Mfcc),
            "log_mel" | "logmel" => Some(FeatureKind::LogMel),
            _ => None,
        }
    }
}

/// Front-end parameters. Defaults: 16 kHz, 25 ms frames, 10 ms hop, 512-point
/// FFT, 40 mel filters over 20–8000 Hz, 20 MFCCs, α = 0.97, Hamming window.
#[derive(Debug, Clone, PartialEq)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop_len: usize,
    pub n_fft: usize,
    pub pre_emphasis_alpha: f64,
    pub n_mel_filters: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub window: Window,
    pub kind: FeatureKind,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            frame_len: 400,
            hop_len: 160,
            n_fft: 512,
            pre_emphasis_alpha: 0.97,
            n_mel_filters: 40,
            n_mfcc: 20,
            fmin: 20.0,
            fmax: 8000.0,
            log_floor: 1e-10,
            window: Window::Hamming,
            kind: FeatureKind::Mfcc,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(KwsError::Dsp(m));
        if self.sample_rate == 0 || self.frame_len == 0 || self.hop_len == 0 {
            return fail("sample_rate, frame_len and hop_len must be positive".into());
        }
        if self.hop_len > self.frame_len {
            return fail(format!("hop_len {} exceeds frame_len {}", self.hop_len, self.frame_len));
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < self.frame_len {
            return fail(format!(
                "n_fft {} must be a power of two >= frame_len {}",
                self.n_fft, self.frame_len
            ));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis_alpha) {
            return fail(format!("pre-emphasis alpha {} outside [0, 1)", self.pre_emphasis_alpha));
        }
        if self.n_mel_filters == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mel_filters {
            return fail(format!(
                "need 0 < n_mfcc ({}) <= n_mel_filters ({})",
                self.n_mfcc, self.n_mel_filters
            ));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return fail(format!(
                "need 0 <= fmin ({}) < fmax ({}) <= sample_rate/2",
                self.fmin, self.fmax
            ));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return fail(format!("log floor {} must be positive", self.log_floor));
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            1 + (len - self.frame_len) / self.hop_len
        }
    }

    /// Coefficients per frame for the configured feature kind.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            FeatureKind::Mfcc => self.n_mfcc,
            FeatureKind::LogMel => self.n_mel_filters,
        }
    }

    /// (T, D) of the features of a one-second clip.
    pub fn feature_shape(&self) -> (usize, usize) {
        (self.frame_count(self.sample_rate as usize), self.feature_dim())
    }
}

/// Time × coefficient feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.values.rows
    }

    pub fn dim(&self) -> usize {
        self.values.cols
    }

    /// One frame per line, comma-separated, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..self.values.rows {
            for (i, v) in self.values.row(t).iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// `y[0] = x[0]`, `y[n] = x[n] − α·x[n−1]`.
pub fn pre_emphasis(signal: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(signal.len());
    if let Some(&first) = signal.first() {
        out.push(first);
    }
    out.extend(signal.windows(2).map(|w| w[1] - alpha * w[0]));
    out
}

/// Slices overlapping frames; trailing samples that do not fill a frame are
/// dropped.
pub fn frame_signal(signal: &[f64], frame_len: usize, hop_len: usize) -> Result<Matrix> {
    if frame_len == 0 || hop_len == 0 {
        return Err(KwsError::Dsp("frame and hop lengths must be positive".into()));
    }
    if signal.len() < frame_len {
        return Err(KwsError::Dsp(format!(
            "signal of {} samples is shorter than one {frame_len}-sample frame",
            signal.len()
        )));
    }
    let count = 1 + (signal.len() - frame_len) / hop_len;
    let mut data = Vec::with_capacity(count * frame_len);
    for t in 0..count {
        data.extend_from_slice(&signal[t * hop_len..t * hop_len + frame_len]);
    }
    Ok(Matrix::from_vec(count, frame_len, data))
}

pub fn apply_window(frames: &Matrix, window: Window) -> Matrix {
    let w = window.coefficients(frames.cols);
    let mut out = frames.clone();
    for t in 0..out.rows {
        for (v, c) in out.row_mut(t).iter_mut().zip(&w) {
            *v *= c;
        }
    }
    out
}

/// One-sided power spectrum `|X(k)|²`, k = 0..=n_fft/2, per frame.
pub fn power_spectrum(frames: &Matrix, n_fft: usize) -> Result<Matrix> {
    if !n_fft.is_power_of_two() || n_fft < frames.cols {
        return Err(KwsError::Dsp(format!(
            "n_fft {n_fft} must be a power of two >= frame length {}",
            frames.cols
        )));
    }
    Ok(power_spectrum_with(&Radix2Fft::new(n_fft), frames))
}

fn power_spectrum_with(fft: &Radix2Fft, frames: &Matrix) -> Matrix {
    let bins = fft.len() / 2 + 1;
    let mut out = Matrix::zeros(frames.rows, bins);
    for t in 0..frames.rows {
        let (src, dst) = (frames.row(t), t * bins);
        fft.power(src, &mut out.data[dst..dst + bins]);
    }
    out
}

/// Cached front end for one [`DspConfig`].
#[derive(Debug, Clone)]
pub struct Featurizer {
    config: DspConfig,
    fft: Radix2Fft,
    window: Vec<f64>,
    bank: MelFilterBank,
    dct: Matrix,
}

impl Featurizer {
    pub fn new(config: DspConfig) -> Result<Self> {
        config.validate()?;
        let bank = build_mel_filterbank(&config)?;
        Ok(Self {
            fft: Radix2Fft::new(config.n_fft),
            window: config.window.coefficients(config.frame_len),
            dct: dct_basis(config.n_mel_filters, config.n_mfcc),
            bank,
            config,
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterBank {
        &self.bank
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.sample_rate() != self.config.sample_rate {
            return Err(KwsError::Dsp(format!(
                "clip sample rate {} does not match configured {}",
                clip.sample_rate(),
                self.config.sample_rate
            )));
        }
        self.compute_signal(clip.samples())
    }

    pub fn compute_signal(&self, signal: &[f64]) -> Result<FeatureMatrix> {
        let c = &self.config;
        let emphasized = pre_emphasis(signal, c.pre_emphasis_alpha);
        let mut frames = frame_signal(&emphasized, c.frame_len, c.hop_len)?;
        for t in 0..frames.rows {
            for (v, w) in frames.row_mut(t).iter_mut().zip(&self.window) {
                *v *= w;
            }
        }
        let spectra = power_spectrum_with(&self.fft, &frames);
        let energies = mel_energies(&spectra, &self.bank)?;
        let logmel = log_compress(&energies, c.log_floor);
        let values = match c.kind {
            FeatureKind::LogMel => logmel,
            FeatureKind::Mfcc => mel::project_rows(&logmel, &self.dct),
        };
        Ok(FeatureMatrix { values, kind: c.kind })
    }

    /// Featurizes clips on the data-parallel pool, preserving order.
    pub fn compute_batch(&self, clips: &[AudioClip]) -> Result<Vec<FeatureMatrix>> {
        par::map(clips, |c| self.compute(c)).into_iter().collect()
    }
}

/// Full pipeline for one clip: pre-emphasis → framing → window → power
/// spectrum → mel energies → log → DCT-II (skipped for log-mel features).
pub fn mfcc_pipeline(clip: &AudioClip, config: &DspConfig) -> Result<FeatureMatrix> {
    Featurizer::new(config.clone())?.compute(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pre_emphasis_cases() {
        assert_eq!(pre_emphasis(&[0.3, -0.2, 0.9], 0.0), vec![0.3, -0.2, 0.9]);
        let y = pre_emphasis(&[1.0, 1.0, 1.0], 0.97);
        assert_eq!(y[0], 1.0);
        assert!((y[1] - 0.03).abs() < 1e-15 && (y[2] - 0.03).abs() < 1e-15);
        assert!(pre_emphasis(&[], 0.5).is_empty());
    }

    #[test]
    fn framing_counts() {
        let s = vec![0.0; 16000];
        assert_eq!(frame_signal(&s, 400, 160).unwrap().rows, 98);
        assert_eq!(frame_signal(&s[..400], 400, 160).unwrap().rows, 1);
        assert!(matches!(frame_signal(&s[..399], 400, 160), Err(KwsError::Dsp(_))));
        let ramp: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let f = frame_signal(&ramp, 4, 3).unwrap();
        assert_eq!(f.rows, 3);
        assert_eq!(f.row(2), &[6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn hamming_values() {
        let w = Window::Hamming.coefficients(401);
        assert!((w[0] - 0.08).abs() < 1e-15);
        assert!((w[200] - 1.0).abs() < 1e-15);
        assert!((w[400] - 0.08).abs() < 1e-15);
        let frames = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(apply_window(&frames, Window::Rectangular), frames);
    }

    #[test]
    fn zero_frame_spectrum() {
        let p = power_spectrum(&Matrix::zeros(2, 400), 512).unwrap();
        assert_eq!((p.rows, p.cols), (2, 257));
        assert!(p.data.iter().all(|v| *v == 0.0));
        assert!(power_spectrum(&Matrix::zeros(1, 400), 256).is_err());
        assert!(power_spectrum(&Matrix::zeros(1, 400), 500).is_err());
    }

    #[test]
    fn default_pipeline_shape_and_determinism() {
        let samples: Vec<f64> = (0..16000).map(|n| 0.3 * (n as f64 * 0.05).sin()).collect();
        let clip = AudioClip::new(samples, 16000, None).unwrap();
        let a = mfcc_pipeline(&clip, &DspConfig::default()).unwrap();
        assert_eq!((a.frames(), a.dim()), (98, 20));
        assert_eq!(a.kind, FeatureKind::Mfcc);
        let b = mfcc_pipeline(&clip, &DspConfig::default()).unwrap();
        assert_eq!(a, b);
        let logmel = DspConfig {
            kind: FeatureKind::LogMel,
            ..DspConfig::default()
        };
        let l = mfcc_pipeline(&clip, &logmel).unwrap();
        assert_eq!((l.frames(), l.dim()), (98, 40));
        assert_eq!(DspConfig::default().feature_shape(), (98, 20));
    }

    #[test]
    fn zero_clip_is_constant() {
        let clip = AudioClip::new(vec![0.0; 16000], 16000, None).unwrap();
        let f = mfcc_pipeline(&clip, &DspConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        let expect0 = floor * 40f64.sqrt();
        for t in 0..f.frames() {
            let row = f.values.row(t);
            assert!((row[0] - expect0).abs() < 1e-9);
            assert!(row[1..].iter().all(|v| v.abs() < 1e-9));
            assert_eq!(row, f.values.row(0));
        }
    }

    #[test]
    fn sample_rate_mismatch() {
        let clip = AudioClip::new(vec![0.0; 8000], 8000, None).unwrap();
        assert!(mfcc_pipeline(&clip, &DspConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = [
            DspConfig {
                hop_len: 500,
                ..DspConfig::default()
            },
            DspConfig {
                n_fft: 384,
                ..DspConfig::default()
            },
            DspConfig {
                n_mfcc: 41,
                ..DspConfig::default()
            },
            DspConfig {
                fmax: 9000.0,
                ..DspConfig::default()
            },
            DspConfig {
                pre_emphasis_alpha: 1.0,
                ..DspConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
