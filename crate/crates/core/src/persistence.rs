//! Binary checkpoint and feature-archive files.
//!
//! Both use the same container:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic (`SERLSTM1` for checkpoints, `SERFEAT1` for feature archives) |
//! | 4     | format version, `u32` little-endian |
//! | 4     | header length `n`, `u32` little-endian |
//! | n     | UTF-8 JSON header; its `arrays` list is the manifest `{name, rows, cols, dtype, offset}` |
//! | ...   | raw `f64` little-endian arrays in manifest order; `offset` counts from the first array byte |

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataset::RavdessLabel;
use crate::features::{MfccConfig, Standardizer};
use crate::nn::{Model, ModelConfig, ModelParams};
use crate::numeric::Matrix;
use crate::optim::{AdamConfig, AdamState, LrSchedule};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SERLSTM1";
pub const FEATURES_MAGIC: &[u8; 8] = b"SERFEAT1";
pub const FORMAT_VERSION: u32 = 1;
const STANDARDIZER_ARRAY: &str = "feature.standardizer";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a {expected} file (magic {found:?})")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("corrupt file: array {name} truncated ({needed} bytes needed, {available} available)")]
    TruncatedArray {
        name: String,
        needed: usize,
        available: usize,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint configuration differs from the requested one in: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
    #[error("checkpoint holds no optimizer moments; it can be used for inference but not to resume training")]
    NoOptimizerState,
    #[error("header JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub offset: usize,
}

fn encode_container(magic: &[u8; 8], mut header: Value, arrays: &[(String, &Matrix)]) -> Result<Vec<u8>, PersistError> {
    let mut offset = 0;
    let manifest: Vec<ArrayEntry> = arrays
        .iter()
        .map(|(name, m)| {
            let e = ArrayEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                dtype: "f64".into(),
                offset,
            };
            offset += m.len() * 8;
            e
        })
        .collect();
    header["arrays"] = serde_json::to_value(&manifest)?;
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + offset);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, m) in arrays {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_container(bytes: &[u8], magic: &[u8; 8]) -> Result<(Value, Vec<(String, Matrix)>), PersistError> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(PersistError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        });
    }
    let word = |at: usize| -> Result<u32, PersistError> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| PersistError::Corrupt("truncated preamble".into()))
    };
    let version = word(8)?;
    if version != FORMAT_VERSION {
        return Err(PersistError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = word(12)? as usize;
    let header_bytes = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| PersistError::Corrupt("truncated header".into()))?;
    let header: Value = serde_json::from_slice(header_bytes)?;
    let manifest: Vec<ArrayEntry> = serde_json::from_value(
        header
            .get("arrays")
            .cloned()
            .ok_or_else(|| PersistError::Corrupt("header has no array manifest".into()))?,
    )?;
    let data = &bytes[16 + header_len..];
    let mut arrays = Vec::with_capacity(manifest.len());
    let mut expected_offset = 0;
    for e in manifest {
        if e.dtype != "f64" {
            return Err(PersistError::Corrupt(format!("array {} has unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected_offset {
            return Err(PersistError::Corrupt(format!("array {} has unexpected offset {}", e.name, e.offset)));
        }
        let needed = e.rows * e.cols * 8;
        let raw = data
            .get(e.offset..e.offset + needed)
            .ok_or(PersistError::TruncatedArray {
                name: e.name.clone(),
                needed,
                available: data.len().saturating_sub(e.offset),
            })?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::new(e.rows, e.cols, values)
            .map_err(|err| PersistError::Corrupt(format!("array {}: {err}", e.name)))?;
        expected_offset += needed;
        arrays.push((e.name, m));
    }
    if data.len() != expected_offset {
        return Err(PersistError::Corrupt(format!(
            "{} trailing bytes after the last array",
            data.len() - expected_offset
        )));
    }
    Ok((header, arrays))
}

fn read_file(path: &Path) -> Result<Vec<u8>, PersistError> {
    fs::read(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    fs::write(path, bytes).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Run provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub lr0: f64,
    pub schedule: LrSchedule,
    pub split_fraction: f64,
    pub speaker_disjoint: bool,
    pub test_accuracy: Option<f64>,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self {
            seed: 0,
            epoch: 0,
            lr0: 0.001,
            schedule: LrSchedule::default(),
            split_fraction: 0.8,
            speaker_disjoint: false,
            test_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub mfcc: MfccConfig,
    pub standardizer: Standardizer,
    pub meta: TrainingMeta,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    mfcc: MfccConfig,
    meta: TrainingMeta,
    optimizer: Option<OptimizerHeader>,
}

impl Checkpoint {
    /// Optimizer moments, required to resume training.
    pub fn resume_state(&self) -> Result<&AdamState, PersistError> {
        self.optimizer.as_ref().ok_or(PersistError::NoOptimizerState)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PersistError> {
        let header = CheckpointHeader {
            model: self.model.config.clone(),
            mfcc: self.mfcc.clone(),
            meta: self.meta.clone(),
            optimizer: self.optimizer.as_ref().map(|s| OptimizerHeader {
                config: s.config,
                t: s.t,
            }),
        };
        let std_matrix = self.standardizer.to_matrix();
        let mut arrays: Vec<(String, &Matrix)> = self.model.params.blocks();
        arrays.push((STANDARDIZER_ARRAY.to_string(), &std_matrix));
        if let Some(s) = &self.optimizer {
            for (name, m) in s.names.iter().zip(&s.m) {
                arrays.push((format!("adam.m.{name}"), m));
            }
            for (name, v) in s.names.iter().zip(&s.v) {
                arrays.push((format!("adam.v.{name}"), v));
            }
        }
        encode_container(CHECKPOINT_MAGIC, serde_json::to_value(&header)?, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersistError> {
        let (header, arrays) = decode_container(bytes, CHECKPOINT_MAGIC)?;
        let header: CheckpointHeader = serde_json::from_value(header)?;
        header
            .model
            .validate()
            .map_err(|e| PersistError::Integrity(e.to_string()))?;
        header
            .mfcc
            .validate()
            .map_err(|e| PersistError::Integrity(e.to_string()))?;
        for (name, m) in &arrays {
            if !m.is_finite() {
                return Err(PersistError::Integrity(format!("array {name} contains non-finite values")));
            }
        }
        let mut lookup: std::collections::HashMap<String, Matrix> = arrays.into_iter().collect();
        let mut take = |name: &str| {
            lookup
                .remove(name)
                .ok_or_else(|| PersistError::Integrity(format!("missing array {name}")))
        };

        let mut params = ModelParams::zeros(&header.model);
        let names: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.blocks_mut()) {
            let m = take(name)?;
            if m.shape() != slot.1.shape() {
                return Err(PersistError::Integrity(format!(
                    "array {name} has shape {:?}, configuration requires {:?}",
                    m.shape(),
                    slot.1.shape()
                )));
            }
            *slot.1 = m;
        }
        let model = Model::from_params(header.model, params).map_err(|e| PersistError::Integrity(e.to_string()))?;
        let standardizer = Standardizer::from_matrix(&take(STANDARDIZER_ARRAY)?)
            .map_err(|e| PersistError::Integrity(e.to_string()))?;
        if standardizer.width() != model.config.input_dim {
            return Err(PersistError::Integrity(format!(
                "standardizer width {} does not match input_dim {}",
                standardizer.width(),
                model.config.input_dim
            )));
        }
        if standardizer.std.iter().any(|&s| s <= 0.0) {
            return Err(PersistError::Integrity("standardizer has a non-positive deviation".into()));
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let mut m = Vec::with_capacity(names.len());
                let mut v = Vec::with_capacity(names.len());
                for name in &names {
                    m.push(take(&format!("adam.m.{name}"))?);
                }
                for name in &names {
                    v.push(take(&format!("adam.v.{name}"))?);
                }
                Some(AdamState {
                    config: h.config,
                    names: names.clone(),
                    m,
                    v,
                    t: h.t,
                })
            }
        };
        if let Some(extra) = lookup.keys().next() {
            return Err(PersistError::Integrity(format!("unexpected array {extra}")));
        }
        Ok(Self {
            model,
            mfcc: header.mfcc,
            standardizer,
            meta: header.meta,
            optimizer,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), PersistError> {
    write_file(path.as_ref(), &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, PersistError> {
    Checkpoint::from_bytes(&read_file(path.as_ref())?)
}

/// Loads a checkpoint and requires its model configuration to equal `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint, PersistError> {
    let ckpt = load_checkpoint(path)?;
    let diffs = config_differences(&ckpt.model.config, expected);
    if diffs.is_empty() {
        Ok(ckpt)
    } else {
        Err(PersistError::ConfigMismatch(diffs))
    }
}

/// Names of the fields in which two model configurations differ.
pub fn config_differences(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (a, b) = (
        serde_json::to_value(a).expect("serializable"),
        serde_json::to_value(b).expect("serializable"),
    );
    let (Value::Object(a), Value::Object(b)) = (a, b) else {
        unreachable!("ModelConfig serializes to an object")
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k} ({v} vs {})", b[k]))
        .collect()
}

/// One featurized clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub path: PathBuf,
    pub label: RavdessLabel,
    pub padded: bool,
    pub features: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    pub mfcc: MfccConfig,
    pub records: Vec<FeatureRecord>,
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    path: PathBuf,
    label: RavdessLabel,
    padded: bool,
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    mfcc: MfccConfig,
    records: Vec<RecordHeader>,
}

impl FeatureArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>, PersistError> {
        let header = ArchiveHeader {
            mfcc: self.mfcc.clone(),
            records: self
                .records
                .iter()
                .map(|r| RecordHeader {
                    path: r.path.clone(),
                    label: r.label,
                    padded: r.padded,
                })
                .collect(),
        };
        let arrays: Vec<(String, &Matrix)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("record.{i}"), &r.features))
            .collect();
        encode_container(FEATURES_MAGIC, serde_json::to_value(&header)?, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersistError> {
        let (header, arrays) = decode_container(bytes, FEATURES_MAGIC)?;
        let header: ArchiveHeader = serde_json::from_value(header)?;
        if header.records.len() != arrays.len() {
            return Err(PersistError::Corrupt(format!(
                "{} records but {} arrays",
                header.records.len(),
                arrays.len()
            )));
        }
        let expected = (header.mfcc.target_frames, header.mfcc.num_coeffs);
        let records = header
            .records
            .into_iter()
            .zip(arrays)
            .map(|(h, (name, features))| {
                if features.shape() != expected {
                    return Err(PersistError::Integrity(format!(
                        "{name} has shape {:?}, expected {expected:?}",
                        features.shape()
                    )));
                }
                if !features.is_finite() {
                    return Err(PersistError::Integrity(format!("{name} contains non-finite values")));
                }
                Ok(FeatureRecord {
                    path: h.path,
                    label: h.label,
                    padded: h.padded,
                    features,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            mfcc: header.mfcc,
            records,
        })
    }

    /// Tab-separated listing: record number, emotion index, emotion name, padded flag, path.
    pub fn index_text(&self) -> String {
        let mut out = String::from("record\temotion_index\temotion\tpadded\tpath\n");
        for (i, r) in self.records.iter().enumerate() {
            out.push_str(&format!(
                "{i}\t{}\t{}\t{}\t{}\n",
                r.label.emotion_index(),
                r.label.emotion_name(),
                r.padded,
                r.path.display()
            ));
        }
        out
    }
}

pub fn save_features(archive: &FeatureArchive, path: impl AsRef<Path>) -> Result<(), PersistError> {
    write_file(path.as_ref(), &archive.to_bytes()?)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureArchive, PersistError> {
    FeatureArchive::from_bytes(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck_config;

    fn sample_checkpoint(with_optimizer: bool) -> Checkpoint {
        let model = Model::new(gradcheck_config(), 3).unwrap();
        let optimizer = with_optimizer.then(|| {
            let mut s = AdamState::new(AdamConfig::default(), model.params.blocks());
            s.t = 17;
            s.m[0].set(0, 0, 0.25);
            s
        });
        Checkpoint {
            mfcc: MfccConfig {
                num_coeffs: 3,
                ..MfccConfig::default()
            },
            standardizer: Standardizer {
                mean: vec![0.1, 0.2, 0.3],
                std: vec![1.0, 2.0, 3.0],
            },
            meta: TrainingMeta {
                seed: 9,
                epoch: 4,
                ..TrainingMeta::default()
            },
            model,
            optimizer,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for with_opt in [false, true] {
            let ckpt = sample_checkpoint(with_opt);
            let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ckpt);
        }
    }

    #[test]
    fn preamble_layout() {
        let bytes = sample_checkpoint(false).to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"SERLSTM1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
        assert_eq!(header["arrays"][0]["name"], "lstm0.w_f");
        assert_eq!(header["arrays"][0]["offset"], 0);
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = sample_checkpoint(false).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(PersistError::BadMagic { .. })));
        bytes[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(PersistError::Version { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_names_the_array() {
        let bytes = sample_checkpoint(false).to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 20]).unwrap_err();
        match err {
            PersistError::TruncatedArray { name, .. } => assert_eq!(name, STANDARDIZER_ARRAY),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_finite_parameter_is_integrity_error() {
        let mut ckpt = sample_checkpoint(false);
        ckpt.model.params.dense.b.set(0, 1, f64::INFINITY);
        let err = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap_err();
        assert!(matches!(err, PersistError::Integrity(ref m) if m.contains("dense.b")), "{err}");
    }

    #[test]
    fn missing_moments_refuse_resume() {
        let ckpt = Checkpoint::from_bytes(&sample_checkpoint(false).to_bytes().unwrap()).unwrap();
        assert!(matches!(ckpt.resume_state(), Err(PersistError::NoOptimizerState)));
        let ckpt = Checkpoint::from_bytes(&sample_checkpoint(true).to_bytes().unwrap()).unwrap();
        assert_eq!(ckpt.resume_state().unwrap().t, 17);
    }

    #[test]
    fn config_mismatch_lists_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_checkpoint(false), &path).unwrap();
        let mut other = gradcheck_config();
        other.hidden_dim = 5;
        other.num_classes = 4;
        match load_checkpoint_for(&path, &other) {
            Err(PersistError::ConfigMismatch(fields)) => {
                assert_eq!(fields.len(), 2);
                assert!(fields[0].starts_with("hidden_dim"));
                assert!(fields[1].starts_with("num_classes"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(load_checkpoint_for(&path, &gradcheck_config()).is_ok());
    }

    #[test]
    fn feature_archive_roundtrip() {
        let label = crate::dataset::parse_filename("03-01-05-01-02-01-12.wav").unwrap();
        let archive = FeatureArchive {
            mfcc: MfccConfig::default(),
            records: vec![FeatureRecord {
                path: "Actor_12/03-01-05-01-02-01-12.wav".into(),
                label,
                padded: false,
                features: Matrix::from_fn(20, 40, |r, c| (r * 40 + c) as f64 * 0.5),
            }],
        };
        let bytes = archive.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"SERFEAT1");
        assert_eq!(FeatureArchive::from_bytes(&bytes).unwrap(), archive);
        assert!(archive.index_text().contains("angry"));
    }
}
