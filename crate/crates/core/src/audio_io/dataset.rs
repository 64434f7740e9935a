use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{read_wav, AudioClip};
use crate::error::{KwsError, Result};

/// Where a dataset entry's audio lives.
#[derive(Debug, Clone)]
pub enum ClipSource {
    File(PathBuf),
    Memory { id: String, clip: Arc<AudioClip> },
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub source: ClipSource,
    pub label: String,
}

impl DatasetEntry {
    /// Loads (or clones) the clip and tags it with the entry label.
    pub fn load(&self) -> Result<AudioClip> {
        let mut clip = match &self.source {
            ClipSource::File(path) => read_wav(path)?,
            ClipSource::Memory { clip, .. } => clip.as_ref().clone(),
        };
        clip.label = Some(self.label.clone());
        Ok(clip)
    }

    /// File path or synthetic id, used for ordering and reporting.
    pub fn key(&self) -> String {
        match &self.source {
            ClipSource::File(p) => p.to_string_lossy().into_owned(),
            ClipSource::Memory { id, .. } => id.clone(),
        }
    }
}

/// Labelled entries plus the ordered label set that defines class indices.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
    label_set: Vec<String>,
}

impl DatasetIndex {
    pub fn new(entries: Vec<DatasetEntry>, label_set: Vec<String>) -> Result<Self> {
        for (i, l) in label_set.iter().enumerate() {
            if label_set[..i].contains(l) {
                return Err(KwsError::Dataset(format!("duplicate label '{l}'")));
            }
        }
        if let Some(e) = entries.iter().find(|e| !label_set.contains(&e.label)) {
            return Err(KwsError::Dataset(format!(
                "entry {} has label '{}' outside the label set",
                e.key(),
                e.label
            )));
        }
        Ok(Self { entries, label_set })
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries per label, in label-set order.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_set.len()];
        for e in &self.entries {
            if let Some(c) = self.class_index(&e.label) {
                counts[c] += 1;
            }
        }
        counts
    }
}

/// Indexes `<root>/<label>/*.wav` for each label in `label_set`.
pub fn scan_dataset(root: impl AsRef<Path>, label_set: &[String]) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let mut entries = Vec::new();
    for label in label_set {
        let dir = root.join(label);
        if !dir.is_dir() {
            return Err(KwsError::Dataset(format!(
                "label '{label}' has no directory {}",
                dir.display()
            )));
        }
        let listing = fs::read_dir(&dir).map_err(|e| KwsError::io(&dir, e))?;
        for item in listing {
            let path = item.map_err(|e| KwsError::io(&dir, e))?.path();
            let is_wav = path.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("wav"));
            if is_wav && path.is_file() {
                entries.push(DatasetEntry {
                    source: ClipSource::File(path),
                    label: label.clone(),
                });
            }
        }
    }
    entries.sort_by_key(|a| a.key());
    DatasetIndex::new(entries, label_set.to_vec())
}

/// Sorted subdirectory names of `root`, skipping `_`-prefixed ones such as
/// `_background_noise_`.
pub fn discover_labels(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let root = root.as_ref();
    let listing = fs::read_dir(root).map_err(|e| KwsError::io(root, e))?;
    let mut labels = Vec::new();
    for item in listing {
        let path = item.map_err(|e| KwsError::io(root, e))?.path();
        if !path.is_dir() {
            continue;
        }
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if !name.starts_with('_') && !name.starts_with('.') {
                labels.push(name.to_string());
            }
        }
    }
    labels.sort();
    Ok(labels)
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) || self.train <= 0.0 {
            return Err(KwsError::Split(format!(
                "ratios must be non-negative with a positive train share, got {self:?}"
            )));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(KwsError::Split(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Stratified, seeded three-way split. Each label is shuffled and divided on
/// its own; rounding remainders go to train, and every non-zero split gets
/// at least one entry of every label. Within a split, entries keep index order.
pub fn split_dataset(
    index: &DatasetIndex,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    ratios.validate()?;
    let nonzero = [ratios.train, ratios.val, ratios.test]
        .iter()
        .filter(|r| **r > 0.0)
        .count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for label in index.label_set() {
        let mut members: Vec<usize> = index
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| &e.label == label)
            .map(|(i, _)| i)
            .collect();
        let n = members.len();
        if n < nonzero {
            return Err(KwsError::Split(format!(
                "label '{label}' has {n} entries but {nonzero} non-empty splits are requested"
            )));
        }
        members.shuffle(&mut rng);
        let share = |r: f64| -> usize {
            if r == 0.0 {
                0
            } else {
                ((n as f64 * r + 1e-9).floor() as usize).max(1)
            }
        };
        let mut n_val = share(ratios.val);
        let mut n_test = share(ratios.test);
        while n_val + n_test >= n {
            if n_val >= n_test && n_val > 1 {
                n_val -= 1;
            } else {
                n_test -= 1;
            }
        }
        let n_train = n - n_val - n_test;
        parts[0].extend_from_slice(&members[..n_train]);
        parts[1].extend_from_slice(&members[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&members[n_train + n_val..]);
    }
    let build = |mut idx: Vec<usize>| {
        idx.sort_unstable();
        DatasetIndex {
            entries: idx.into_iter().map(|i| index.entries[i].clone()).collect(),
            label_set: index.label_set.clone(),
        }
    };
    let [train, val, test] = parts;
    Ok((build(train), build(val), build(test)))
}
