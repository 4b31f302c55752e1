//! RAVDESS discovery, filename labels, and reproducible train/test splits.
//!
//! RAVDESS encodes every recording's metadata in seven dash-separated
//! two-digit fields: `modality-vocal_channel-emotion-intensity-statement-repetition-actor.wav`,
//! e.g. `03-01-05-01-02-01-12.wav` is audio-only speech, angry, normal
//! intensity, statement 2, first repetition, actor 12.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::Matrix;
use crate::rng::XorShift64Star;

pub const NUM_EMOTIONS: usize = 8;

/// Emotion names indexed by `emotion_index` (RAVDESS code minus one).
pub const EMOTION_NAMES: [&str; NUM_EMOTIONS] = [
    "neutral",
    "calm",
    "happy",
    "sad",
    "angry",
    "fearful",
    "disgust",
    "surprised",
];

pub const VOCAL_SPEECH: u8 = 1;
pub const VOCAL_SONG: u8 = 2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{name}: {reason}")]
    Parse { name: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("no RAVDESS files found under {0}")]
    Empty(PathBuf),
    #[error("split fraction {fraction} of {total} entries leaves one side empty")]
    DegenerateSplit { fraction: f64, total: usize },
    #[error("duplicate path in index: {0}")]
    Duplicate(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RavdessLabel {
    pub modality: u8,
    pub vocal_channel: u8,
    pub emotion: u8,
    pub intensity: u8,
    pub statement: u8,
    pub repetition: u8,
    pub actor: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl RavdessLabel {
    /// Class index in `0..8`.
    pub fn emotion_index(&self) -> usize {
        usize::from(self.emotion - 1)
    }

    pub fn emotion_name(&self) -> &'static str {
        EMOTION_NAMES[self.emotion_index()]
    }

    /// Odd actor IDs are male, even are female. Metadata only.
    pub fn gender(&self) -> Gender {
        if self.actor % 2 == 1 {
            Gender::Male
        } else {
            Gender::Female
        }
    }

    pub fn is_song(&self) -> bool {
        self.vocal_channel == VOCAL_SONG
    }

    pub fn codes(&self) -> [u8; 7] {
        [
            self.modality,
            self.vocal_channel,
            self.emotion,
            self.intensity,
            self.statement,
            self.repetition,
            self.actor,
        ]
    }

    pub fn to_filename(&self) -> String {
        format!("{self}.wav")
    }
}

impl fmt::Display for RavdessLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.codes();
        write!(
            f,
            "{:02}-{:02}-{:02}-{:02}-{:02}-{:02}-{:02}",
            c[0], c[1], c[2], c[3], c[4], c[5], c[6]
        )
    }
}

/// Parses a RAVDESS basename such as `03-01-05-01-02-01-12.wav`.
pub fn parse_filename(name: &str) -> Result<RavdessLabel, DatasetError> {
    let err = |reason: String| DatasetError::Parse {
        name: name.to_string(),
        reason,
    };
    let base = Path::new(name)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or(name);
    let stem = base
        .strip_suffix(".wav")
        .or_else(|| base.strip_suffix(".WAV"))
        .ok_or_else(|| err("missing .wav extension".into()))?;
    let fields: Vec<&str> = stem.split('-').collect();
    if fields.len() != 7 {
        return Err(err(format!("expected 7 fields, found {}", fields.len())));
    }
    let mut codes = [0u8; 7];
    for (slot, field) in codes.iter_mut().zip(&fields) {
        if field.len() != 2 || !field.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err(format!("field {field:?} is not a two-digit number")));
        }
        *slot = field.parse().expect("two ascii digits");
    }
    let label = RavdessLabel {
        modality: codes[0],
        vocal_channel: codes[1],
        emotion: codes[2],
        intensity: codes[3],
        statement: codes[4],
        repetition: codes[5],
        actor: codes[6],
    };
    if !(1..=8).contains(&label.emotion) {
        return Err(err(format!("emotion code {} outside 1..=8", label.emotion)));
    }
    if !(1..=2).contains(&label.intensity) {
        return Err(err(format!(
            "intensity code {} outside 1..=2",
            label.intensity
        )));
    }
    if !(1..=24).contains(&label.actor) {
        return Err(err(format!("actor {} outside 1..=24", label.actor)));
    }
    Ok(label)
}

/// `1 × 8` one-hot row for the label's emotion.
pub fn label_to_onehot(label: &RavdessLabel) -> Matrix {
    onehot(label.emotion_index(), NUM_EMOTIONS)
}

pub fn onehot(class: usize, num_classes: usize) -> Matrix {
    Matrix::from_fn(1, num_classes, |_, c| if c == class { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: RavdessLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipWarning {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    entries: Vec<DatasetEntry>,
    class_counts: [usize; NUM_EMOTIONS],
    pub skipped: Vec<SkipWarning>,
}

impl DatasetIndex {
    pub fn new(mut entries: Vec<DatasetEntry>) -> Result<Self, DatasetError> {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        for w in entries.windows(2) {
            if w[0].path == w[1].path {
                return Err(DatasetError::Duplicate(w[0].path.clone()));
            }
        }
        let mut class_counts = [0; NUM_EMOTIONS];
        for e in &entries {
            class_counts[e.label.emotion_index()] += 1;
        }
        Ok(Self {
            entries,
            class_counts,
            skipped: Vec::new(),
        })
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_EMOTIONS] {
        self.class_counts
    }

    pub fn class_counts_of(&self, indices: &[usize]) -> [usize; NUM_EMOTIONS] {
        let mut counts = [0; NUM_EMOTIONS];
        for &i in indices {
            counts[self.entries[i].label.emotion_index()] += 1;
        }
        counts
    }

    /// JSON-lines audit listing: one object per entry.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let line = serde_json::json!({
                "path": e.path,
                "modality": e.label.modality,
                "vocal_channel": e.label.vocal_channel,
                "emotion": e.label.emotion,
                "emotion_index": e.label.emotion_index(),
                "emotion_name": e.label.emotion_name(),
                "intensity": e.label.intensity,
                "statement": e.label.statement,
                "repetition": e.label.repetition,
                "actor": e.label.actor,
                "gender": e.label.gender(),
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

/// Recursively collects RAVDESS `.wav` files under `root`, sorted by path.
/// Song recordings are excluded unless `include_song` is set.
pub fn scan_dataset(root: &Path, include_song: bool) -> Result<DatasetIndex, DatasetError> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let read = fs::read_dir(&dir).map_err(|source| DatasetError::Io {
            path: dir.clone(),
            source,
        })?;
        for item in read {
            let item = item.map_err(|source| DatasetError::Io {
                path: dir.clone(),
                source,
            })?;
            let path = item.path();
            let ft = item.file_type().map_err(|source| DatasetError::Io {
                path: path.clone(),
                source,
            })?;
            if ft.is_dir() {
                stack.push(path);
                continue;
            }
            let is_wav = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if !is_wav {
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            match parse_filename(name) {
                Ok(label) if label.is_song() && !include_song => {}
                Ok(label) => entries.push(DatasetEntry { path, label }),
                Err(e) => skipped.push(SkipWarning {
                    reason: e.to_string(),
                    path,
                }),
            }
        }
    }
    if entries.is_empty() {
        return Err(DatasetError::Empty(root.to_path_buf()));
    }
    skipped.sort_by(|a, b| a.path.cmp(&b.path));
    let mut index = DatasetIndex::new(entries)?;
    index.skipped = skipped;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub speaker_disjoint: bool,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Number of training items for `fraction` of `n`, rounding half away from zero.
pub fn train_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Shuffles `0..n` with [`XorShift64Star`] seeded by `seed` and cuts at
/// `round(fraction·n)`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<SplitSpec, DatasetError> {
    let k = train_count(n, fraction);
    if !(fraction > 0.0 && fraction < 1.0) || k == 0 || k >= n {
        return Err(DatasetError::DegenerateSplit { fraction, total: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    XorShift64Star::new(seed).shuffle(&mut order);
    let test = order.split_off(k);
    Ok(SplitSpec {
        train_fraction: fraction,
        seed,
        speaker_disjoint: false,
        train: order,
        test,
    })
}

pub fn split_dataset(
    index: &DatasetIndex,
    fraction: f64,
    seed: u64,
) -> Result<SplitSpec, DatasetError> {
    split_indices(index.len(), fraction, seed)
}

/// Speaker-disjoint variant: actors (sorted, then shuffled) are assigned to
/// train until `round(fraction · actors)` are taken.
pub fn split_by_speaker(
    index: &DatasetIndex,
    fraction: f64,
    seed: u64,
) -> Result<SplitSpec, DatasetError> {
    let actors: Vec<u8> = index
        .entries
        .iter()
        .map(|e| e.label.actor)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let k = train_count(actors.len(), fraction);
    if !(fraction > 0.0 && fraction < 1.0) || k == 0 || k >= actors.len() {
        return Err(DatasetError::DegenerateSplit {
            fraction,
            total: actors.len(),
        });
    }
    let mut order = actors;
    XorShift64Star::new(seed).shuffle(&mut order);
    let train_actors: BTreeSet<u8> = order[..k].iter().copied().collect();
    let (train, test) = (0..index.len()).partition(|&i| train_actors.contains(&index.entries[i].label.actor));
    Ok(SplitSpec {
        train_fraction: fraction,
        seed,
        speaker_disjoint: true,
        train,
        test,
    })
}
