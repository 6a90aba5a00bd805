//! Versioned model checkpoints.
//!
//! Layout: the magic line `modtrans-checkpoint`, a line holding the byte
//! length of the JSON header, the header itself plus a newline, then every
//! array's values as little-endian `f64` in header order. The header carries
//! the topology, so a model can be rebuilt without the run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, ParamStore};
use crate::pipeline::{RegressionStage, TranslationStage};
use crate::recurrent::RecurrentConfig;
use crate::regression::{BestSnapshot, RegressionConfig, RegressionHead, RegressionProgress};
use crate::seq2seq::{Encoder, TranslationConfig, TranslationModel};
use crate::train::{EpochLoss, Progress};

pub const MAGIC: &str = "modtrans-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const BEST_PREFIX: &str = "best/";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}; this build reads version {CHECKPOINT_VERSION}")]
    Version(u32),
    #[error("checkpoint does not fit its topology: {0}")]
    Mismatch(String),
}

/// Model shape needed to rebuild the parameter stores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Topology {
    Translation {
        config: TranslationConfig,
    },
    Regression {
        config: RegressionConfig,
        /// Encoder trained together with the head, if any.
        encoder: Option<RecurrentConfig>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epochs_done: usize,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: Option<usize>,
    pub best_validation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    topology: Topology,
    training_state: TrainingState,
    config_hash: String,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub topology: Topology,
    pub training_state: TrainingState,
    pub config_hash: String,
    /// Named arrays in file order.
    pub arrays: Vec<(String, DenseArray<f64>)>,
}

fn push_store(out: &mut Vec<(String, DenseArray<f64>)>, prefix: &str, store: &ParamStore<f64>) {
    out.extend(store.iter().map(|(n, v)| (format!("{prefix}{n}"), v.clone())));
}

/// Overwrites every parameter of `store` with the array of the same name.
fn fill(store: &mut ParamStore<f64>, prefix: &str, arrays: &mut BTreeMap<String, DenseArray<f64>>) -> Result<(), CheckpointError> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let key = format!("{prefix}{name}");
        let value = arrays
            .remove(&key)
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing array {key}")))?;
        let id = store.find(&name).expect("name taken from the store");
        store
            .set(id, value)
            .map_err(|e| CheckpointError::Mismatch(format!("{key}: {e}")))?;
    }
    Ok(())
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl Checkpoint {
    pub fn from_translation(stage: &TranslationStage, config_hash: &str) -> Self {
        let mut arrays = Vec::new();
        push_store(&mut arrays, "", stage.model.encoder().store());
        push_store(&mut arrays, "", stage.model.decoder().store());
        Self {
            topology: Topology::Translation {
                config: *stage.model.config(),
            },
            training_state: TrainingState {
                epochs_done: stage.progress.epochs_done,
                curve: stage.progress.curve.clone(),
                best_epoch: None,
                best_validation: None,
            },
            config_hash: config_hash.to_string(),
            arrays,
        }
    }

    pub fn from_regression(stage: &RegressionStage, config_hash: &str) -> Self {
        let mut arrays = Vec::new();
        push_store(&mut arrays, "", stage.head.store());
        if let Some(e) = &stage.encoder {
            push_store(&mut arrays, "", e.store());
        }
        let best = stage.progress.best.as_ref();
        if let Some(b) = best {
            push_store(&mut arrays, BEST_PREFIX, &b.head);
            if let Some(e) = &b.encoder {
                push_store(&mut arrays, BEST_PREFIX, e);
            }
        }
        Self {
            topology: Topology::Regression {
                config: *stage.head.config(),
                encoder: stage.encoder.as_ref().map(|e| *e.stack().config()),
            },
            training_state: TrainingState {
                epochs_done: stage.progress.epochs_done,
                curve: stage.progress.curve.clone(),
                best_epoch: best.map(|b| b.epoch),
                best_validation: best.map(|b| b.score),
            },
            config_hash: config_hash.to_string(),
            arrays,
        }
    }

    fn array_map(&self) -> Result<BTreeMap<String, DenseArray<f64>>, CheckpointError> {
        let mut map = BTreeMap::new();
        for (n, v) in &self.arrays {
            if map.insert(n.clone(), v.clone()).is_some() {
                return Err(CheckpointError::Format(format!("array {n} appears twice")));
            }
        }
        Ok(map)
    }

    fn finish(arrays: BTreeMap<String, DenseArray<f64>>) -> Result<(), CheckpointError> {
        match arrays.keys().next() {
            Some(extra) => Err(CheckpointError::Mismatch(format!("unexpected array {extra}"))),
            None => Ok(()),
        }
    }

    pub fn to_translation(&self) -> Result<TranslationStage, CheckpointError> {
        let Topology::Translation { config } = &self.topology else {
            return Err(CheckpointError::Mismatch("not a translation checkpoint".into()));
        };
        let mut model = TranslationModel::new(*config, &mut rng()).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let mut arrays = self.array_map()?;
        let (enc, dec) = model.stores_mut();
        fill(enc, "", &mut arrays)?;
        fill(dec, "", &mut arrays)?;
        Self::finish(arrays)?;
        Ok(TranslationStage {
            model,
            progress: Progress {
                epochs_done: self.training_state.epochs_done,
                curve: self.training_state.curve.clone(),
            },
        })
    }

    pub fn to_regression(&self) -> Result<RegressionStage, CheckpointError> {
        let Topology::Regression { config, encoder } = &self.topology else {
            return Err(CheckpointError::Mismatch("not a regression checkpoint".into()));
        };
        let bad = |e: crate::error::ModelError| CheckpointError::Mismatch(e.to_string());
        let mut head = RegressionHead::new(*config, &mut rng()).map_err(bad)?;
        let mut enc = encoder.map(|c| Encoder::new(c, &mut rng())).transpose().map_err(bad)?;
        let mut arrays = self.array_map()?;
        fill(head.store_mut(), "", &mut arrays)?;
        if let Some(e) = enc.as_mut() {
            fill(e.store_mut(), "", &mut arrays)?;
        }
        let ts = &self.training_state;
        let best = match (ts.best_epoch, ts.best_validation) {
            (Some(epoch), Some(score)) => {
                let mut h = head.store().clone();
                fill(&mut h, BEST_PREFIX, &mut arrays)?;
                let e = match &enc {
                    Some(e) => {
                        let mut s = e.store().clone();
                        fill(&mut s, BEST_PREFIX, &mut arrays)?;
                        Some(s)
                    }
                    None => None,
                };
                Some(BestSnapshot {
                    epoch,
                    score,
                    head: h,
                    encoder: e,
                })
            }
            (None, None) => None,
            _ => return Err(CheckpointError::Format("best epoch and best score must both be present".into())),
        };
        Self::finish(arrays)?;
        Ok(RegressionStage {
            head,
            encoder: enc,
            progress: RegressionProgress {
                epochs_done: ts.epochs_done,
                curve: ts.curve.clone(),
                best,
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            topology: self.topology.clone(),
            training_state: self.training_state.clone(),
            config_hash: self.config_hash.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, v)| ArrayEntry {
                    name: n.clone(),
                    rows: v.rows(),
                    cols: v.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&header).expect("header serialises");
        let mut out = format!("{MAGIC}\n{}\n{json}\n", json.len()).into_bytes();
        for (_, v) in &self.arrays {
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        let rest = bytes
            .strip_prefix(format!("{MAGIC}\n").as_bytes())
            .ok_or_else(|| fmt("missing magic line"))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| fmt("missing header length"))?;
        let len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt("header length is not a number"))?;
        let rest = &rest[nl + 1..];
        if rest.len() < len + 1 || rest[len] != b'\n' {
            return Err(fmt("truncated header"));
        }
        let value: serde_json::Value =
            serde_json::from_slice(&rest[..len]).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
        let version = value.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| fmt("header lacks format_version"))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(CheckpointError::Version(version as u32));
        }
        let header: Header = serde_json::from_value(value).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
        let mut data = &rest[len + 1..];
        let total: usize = header.arrays.iter().map(|a| a.rows * a.cols).sum();
        if data.len() != total * 8 {
            return Err(CheckpointError::Format(format!(
                "expected {} bytes of array data, found {}",
                total * 8,
                data.len()
            )));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in header.arrays {
            let n = a.rows * a.cols;
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            data = &data[n * 8..];
            arrays.push((a.name, DenseArray::matrix(a.rows, a.cols, values)));
        }
        Ok(Self {
            topology: header.topology,
            training_state: header.training_state,
            config_hash: header.config_hash,
            arrays,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::pipeline::{find_spec, run_pipeline, NoHooks, PipelineConfig, PipelineState, StageConfig};
    use proptest::prelude::*;

    fn trained(finetune: bool) -> PipelineState {
        let d = generate_synthetic(&SynthConfig {
            n_segments: 10,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let stage = StageConfig {
            hidden: 3,
            epochs: 2,
            ..StageConfig::default()
        };
        let cfg = PipelineConfig {
            translation: stage.clone(),
            regression: stage,
            finetune_encoder: finetune,
            ..PipelineConfig::default()
        };
        let mut state = PipelineState::default();
        run_pipeline(&find_spec("tr-a-t").unwrap(), &d, &cfg, &mut state, &mut NoHooks).unwrap();
        state
    }

    #[test]
    fn translation_round_trip() {
        let state = trained(false);
        let ck = Checkpoint::from_translation(&state.translations[0], "abc");
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.to_translation().unwrap(), state.translations[0]);
    }

    #[test]
    fn regression_round_trip_with_encoder_and_best() {
        for finetune in [false, true] {
            let state = trained(finetune);
            let reg = state.regression.as_ref().unwrap();
            assert!(reg.progress.best.is_some());
            let ck = Checkpoint::from_regression(reg, "h");
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(&back.to_regression().unwrap(), reg);
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let state = trained(true);
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        Checkpoint::from_regression(state.regression.as_ref().unwrap(), "x").save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn header_is_readable_text() {
        let state = trained(false);
        let bytes = Checkpoint::from_translation(&state.translations[0], "abc").to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("modtrans-checkpoint\n"));
        assert!(text.contains("\"format_version\": 1") && text.contains("\"name\": \"encoder."), "{text}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let state = trained(false);
        let ck = Checkpoint::from_translation(&state.translations[0], "abc");
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(CheckpointError::Format(_))));
        let text = String::from_utf8_lossy(&bytes).replacen("\"format_version\": 1", "\"format_version\": 9", 1);
        assert!(matches!(Checkpoint::from_bytes(text.as_bytes()), Err(CheckpointError::Version(9))));
        let mut missing = ck.clone();
        missing.arrays.pop();
        assert!(matches!(missing.to_translation(), Err(CheckpointError::Mismatch(_))));
        let mut extra = ck;
        extra.arrays.push(("stray".into(), DenseArray::zeros(1, 1)));
        assert!(matches!(extra.to_translation(), Err(CheckpointError::Mismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn arbitrary_values_round_trip(values in prop::collection::vec(any::<f64>(), 1..40), loss in any::<f64>()) {
            let rows = values.len();
            let ck = Checkpoint {
                topology: Topology::Translation { config: TranslationConfig {
                    source_dim: 1,
                    target: crate::seq2seq::TargetKind::Continuous { dim: 1 },
                    cell: crate::recurrent::CellKind::Gru,
                    layers: 1,
                    hidden: 1,
                    attention: false,
                } },
                training_state: TrainingState {
                    epochs_done: 1,
                    curve: vec![EpochLoss { epoch: 0, train: if loss.is_finite() { loss } else { 0.0 }, validation: None }],
                    best_epoch: None,
                    best_validation: None,
                },
                config_hash: "h".into(),
                arrays: vec![("a".into(), DenseArray::matrix(rows, 1, values))],
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
