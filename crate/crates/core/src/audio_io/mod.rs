//! Audio ingestion: WAV decoding, Speech-Commands-style dataset indexing,
//! stratified splits and a synthetic tone dataset for desk-scale runs.

mod dataset;
mod synth;
mod wav;

pub use dataset::{discover_labels, scan_dataset, split_dataset, ClipSource, DatasetEntry, DatasetIndex, SplitRatios};
pub use synth::{synth_dataset, SynthSpec, SYNTH_AMPLITUDE};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

use crate::error::{KwsError, Result};

/// A one-second mono clip with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    pub label: Option<String>,
}

impl AudioClip {
    /// Builds a clip, zero-padding or truncating `samples` to exactly one
    /// second at `sample_rate`.
    pub fn new(mut samples: Vec<f64>, sample_rate: u32, label: Option<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(KwsError::Format("sample rate must be positive".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(KwsError::Format(format!("sample {bad} outside [-1, 1] or not finite")));
        }
        samples.resize(sample_rate as usize, 0.0);
        Ok(Self {
            samples,
            sample_rate,
            label,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_and_truncates_to_one_second() {
        let short = AudioClip::new(vec![0.5; 10], 100, None).unwrap();
        assert_eq!(short.len(), 100);
        assert_eq!(short.samples()[9], 0.5);
        assert_eq!(short.samples()[10], 0.0);
        let long = AudioClip::new(vec![0.1; 250], 100, None).unwrap();
        assert_eq!(long.len(), 100);
    }

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(AudioClip::new(vec![1.5], 10, None).is_err());
        assert!(AudioClip::new(vec![f64::NAN], 10, None).is_err());
        assert!(AudioClip::new(vec![0.0], 0, None).is_err());
    }
}
