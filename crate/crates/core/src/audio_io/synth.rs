use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AudioClip, ClipSource, DatasetEntry, DatasetIndex};
use crate::error::{KwsError, Result};

/// Peak amplitude of the synthetic tones before noise is added.
pub const SYNTH_AMPLITUDE: f64 = 0.5;

/// A synthetic dataset of one pure tone per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub sample_rate: u32,
    pub class_frequencies: Vec<f64>,
    pub noise_amplitude: f64,
}

impl SynthSpec {
    /// `n_classes` tones at 250 Hz + 400 Hz steps, 16 kHz, noise 0.05.
    pub fn tones(n_classes: usize, clips_per_class: usize) -> Self {
        Self {
            n_classes,
            clips_per_class,
            sample_rate: 16000,
            class_frequencies: (0..n_classes).map(|c| 250.0 + 400.0 * c as f64).collect(),
            noise_amplitude: 0.05,
        }
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("tone{c}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KwsError::Config(format!("synth spec: {m}")));
        if self.n_classes == 0 || self.clips_per_class == 0 || self.sample_rate == 0 {
            return bad("n_classes, clips_per_class and sample_rate must be positive".into());
        }
        if self.class_frequencies.len() != self.n_classes {
            return bad(format!(
                "{} frequencies for {} classes",
                self.class_frequencies.len(),
                self.n_classes
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (i, f) in self.class_frequencies.iter().enumerate() {
            if !(f.is_finite() && *f > 0.0 && *f < nyquist) {
                return bad(format!("frequency {f} outside (0, {nyquist})"));
            }
            if self.class_frequencies[..i].contains(f) {
                return bad(format!("frequency {f} repeated"));
            }
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return bad(format!("noise amplitude {}", self.noise_amplitude));
        }
        Ok(())
    }
}

/// Generates the tone dataset in memory. Class `c` holds sines at
/// `class_frequencies[c]` with random phase plus uniform noise.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<DatasetIndex> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = spec.labels();
    let sr = spec.sample_rate as f64;
    let mut entries = Vec::with_capacity(spec.n_classes * spec.clips_per_class);
    for (c, label) in labels.iter().enumerate() {
        let freq = spec.class_frequencies[c];
        for i in 0..spec.clips_per_class {
            let phase = rng.gen_range(0.0..2.0 * PI);
            let samples = (0..spec.sample_rate)
                .map(|n| {
                    let tone = SYNTH_AMPLITUDE * (2.0 * PI * freq * n as f64 / sr + phase).sin();
                    let noise = if spec.noise_amplitude > 0.0 {
                        rng.gen_range(-spec.noise_amplitude..=spec.noise_amplitude)
                    } else {
                        0.0
                    };
                    (tone + noise).clamp(-1.0, 1.0)
                })
                .collect();
            let clip = AudioClip::new(samples, spec.sample_rate, Some(label.clone()))?;
            entries.push(DatasetEntry {
                source: ClipSource::Memory {
                    id: format!("{label}/{i:04}"),
                    clip: Arc::new(clip),
                },
                label: label.clone(),
            });
        }
    }
    DatasetIndex::new(entries, labels)
}
