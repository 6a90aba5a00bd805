//! Run configuration files (TOML or JSON) with full defaulting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::pipeline::{find_spec, PipelineConfig, PipelineSpec, SplitConfig, StageConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything needed to reproduce a run or a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required; seeds splitting, initialisation and sample order.
    pub seed: Option<u64>,
    /// Manifest id of the pipeline to run.
    pub spec: Option<String>,
    /// A spec outside the manifest; takes precedence over `spec`.
    pub inline_spec: Option<PipelineSpec>,
    /// Dataset file; when absent a synthetic corpus is generated.
    pub dataset: Option<PathBuf>,
    /// Generator settings for the synthetic corpus; defaults use the run seed.
    pub synthetic: Option<SynthConfig>,
    pub split: SplitConfig,
    pub translation: StageConfig,
    pub regression: StageConfig,
    pub finetune_encoder: bool,
    pub beam_width: usize,
    pub output_dir: PathBuf,
    /// Specs run at once by the grid command.
    pub concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            seed: None,
            spec: None,
            inline_spec: None,
            dataset: None,
            synthetic: None,
            split: p.split,
            translation: p.translation,
            regression: p.regression,
            finetune_encoder: p.finetune_encoder,
            beam_width: p.beam_width,
            output_dir: PathBuf::from("runs"),
            concurrency: 1,
        }
    }
}

fn check_stage(name: &str, s: &StageConfig) -> Result<(), ConfigError> {
    let bad = |m: String| Err(ConfigError::Invalid(format!("{name}: {m}")));
    if s.layers == 0 || s.hidden == 0 {
        return bad("layers and hidden must be >= 1".into());
    }
    if s.accumulate == 0 {
        return bad("accumulate must be >= 1".into());
    }
    if !(s.learning_rate.is_finite() && s.learning_rate >= 0.0) {
        return bad(format!("learning_rate must be finite and >= 0, got {}", s.learning_rate));
    }
    if let Some(c) = s.clip_norm {
        if !(c > 0.0 && c.is_finite()) {
            return bad(format!("clip_norm must be > 0, got {c}"));
        }
    }
    Ok(())
}

impl RunConfig {
    /// Reads `.toml` or `.json` by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        };
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string())),
            _ => toml::from_str(&text).map_err(|e| parse_err(e.to_string())),
        }
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or_else(|| ConfigError::Invalid("a seed is required (--seed or `seed` in the config file)".into()))
    }

    /// Checks everything except the pipeline selection.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.seed()?;
        check_stage("translation", &self.translation)?;
        check_stage("regression", &self.regression)?;
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if !(ok(self.split.train_fraction) && ok(self.split.validation_fraction)) {
            return Err(ConfigError::Invalid("split fractions must lie in (0, 1)".into()));
        }
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid("concurrency must be >= 1".into()));
        }
        if let Some(s) = &self.synthetic {
            s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(s) = &self.inline_spec {
            s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(id) = &self.spec {
            if find_spec(id).is_none() {
                return Err(ConfigError::Invalid(format!("unknown spec id `{id}`")));
            }
        }
        Ok(())
    }

    /// The pipeline spec of a single run.
    pub fn resolve_spec(&self) -> Result<PipelineSpec, ConfigError> {
        if let Some(s) = &self.inline_spec {
            return Ok(s.clone());
        }
        let id = self
            .spec
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("no spec given (--spec or `spec`)".into()))?;
        find_spec(id).ok_or_else(|| ConfigError::Invalid(format!("unknown spec id `{id}`")))
    }

    pub fn synthetic_config(&self) -> Result<SynthConfig, ConfigError> {
        Ok(self.synthetic.clone().unwrap_or(SynthConfig {
            seed: self.seed()?,
            ..SynthConfig::default()
        }))
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, ConfigError> {
        Ok(PipelineConfig {
            seed: self.seed()?,
            split: self.split.clone(),
            translation: self.translation.clone(),
            regression: self.regression.clone(),
            finetune_encoder: self.finetune_encoder,
            beam_width: self.beam_width,
        })
    }

    /// SHA-256 over the canonical JSON of every setting that affects results
    /// (output location and concurrency excluded).
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output_dir: PathBuf::new(),
            concurrency: 1,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let c: RunConfig = toml::from_str("seed = 4\nspec = \"tr-t-v\"\n[translation]\nhidden = 8\n").unwrap();
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.translation.hidden, 8);
        assert_eq!(c.translation.epochs, 50);
        assert_eq!(c.translation.learning_rate, 0.01);
        assert_eq!(c.regression.hidden, 64);
        assert!(!c.regression.attention);
        c.validate().unwrap();
        assert_eq!(c.resolve_spec().unwrap().id, "tr-t-v");
    }

    #[test]
    fn json_and_toml_agree() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig {
            seed: Some(9),
            spec: Some("hier-ta-v".into()),
            ..RunConfig::default()
        };
        let j = dir.path().join("c.json");
        fs::write(&j, c.to_json()).unwrap();
        let t = dir.path().join("c.toml");
        fs::write(&t, toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&j).unwrap(), c);
        assert_eq!(RunConfig::load(&t).unwrap(), c);
    }

    #[test]
    fn seed_is_mandatory() {
        let c = RunConfig::default();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(m)) if m.contains("seed")));
    }

    #[test]
    fn rejects_bad_values() {
        let base = RunConfig {
            seed: Some(1),
            ..RunConfig::default()
        };
        let mut c = base.clone();
        c.spec = Some("nope".into());
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.translation.hidden = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.split.train_fraction = 1.5;
        assert!(c.validate().is_err());
        assert!(toml::from_str::<RunConfig>("seed = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let a = RunConfig {
            seed: Some(1),
            ..RunConfig::default()
        };
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            concurrency: 4,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig {
            seed: Some(2),
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
    }
}
