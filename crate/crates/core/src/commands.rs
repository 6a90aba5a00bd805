//! Command implementations behind the CLI: generate, run, grid, validate, report.
//!
//! A run directory holds `config.json`, one checkpoint per stage under
//! `checkpoints/`, `curves.csv`, `report.json` and `report.txt`. A failed run
//! leaves a `FAILED` marker next to whatever it produced. Running again with
//! the same configuration resumes from the checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::{generate_synthetic, load_dataset, save_dataset, validate_file, DataError, Dataset, Diagnostic, SynthConfig};
use crate::error::ModelError;
use crate::pipeline::{
    enumerate_variations, run_pipeline, PipelineError, PipelineHooks, PipelineResult, PipelineSpec, PipelineState,
    RegressionStage, TranslationStage,
};
use crate::regression::{RegressionHead, RegressionProgress};
use crate::report::{headline, render_grid, render_run, GridRow, GridSummary, RowStatus, RunReport};
use crate::seq2seq::{Encoder, TranslationModel};
use crate::train::Progress;

pub const FAILED_MARKER: &str = "FAILED";

/// Failure classes with distinct exit statuses.
#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Training(String),
    #[error("{0}")]
    Io(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Validation(_) => 1,
            CommandError::Training(_) => 2,
            CommandError::Io(_) => 3,
        }
    }
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CommandError::Io(e.to_string()),
            _ => CommandError::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for CommandError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CommandError::Io(e.to_string()),
            _ => CommandError::Validation(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CommandError {
    fn from(e: CheckpointError) -> Self {
        CommandError::Io(e.to_string())
    }
}

impl From<PipelineError> for CommandError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Model(ModelError::InvalidConfig(_)) => CommandError::Validation(e.to_string()),
            PipelineError::Model(_) | PipelineError::Metrics(_) => CommandError::Training(e.to_string()),
            _ => CommandError::Validation(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CommandError {
    CommandError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CommandError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CommandError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Writes a synthetic corpus; identical settings give identical bytes.
pub fn cmd_generate(config: &SynthConfig, path: &Path) -> Result<Dataset, CommandError> {
    let dataset = generate_synthetic(config).map_err(|e| CommandError::Validation(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_dataset(path, &dataset)?;
    Ok(dataset)
}

/// All diagnostics of a dataset file; format errors are `Validation` errors.
pub fn cmd_validate(path: &Path) -> Result<Vec<Diagnostic>, CommandError> {
    Ok(validate_file(path)?)
}

/// Re-renders a `report.json` or grid `summary.json` as text tables.
pub fn cmd_report(path: &Path) -> Result<String, CommandError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if let Ok(r) = serde_json::from_str::<RunReport>(&text) {
        return Ok(render_run(&r));
    }
    match serde_json::from_str::<GridSummary>(&text) {
        Ok(s) => Ok(render_grid(&s)),
        Err(e) => Err(CommandError::Validation(format!(
            "{}: neither a run report nor a grid summary ({e})",
            path.display()
        ))),
    }
}

/// Test hooks for interrupting a run at an epoch boundary.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Stop with a training failure after this many epochs in this invocation.
    pub halt_after_epochs: Option<usize>,
}

pub fn load_data(config: &RunConfig) -> Result<Dataset, CommandError> {
    match &config.dataset {
        Some(path) => Ok(load_dataset(path)?),
        None => generate_synthetic(&config.synthetic_config()?).map_err(|e| CommandError::Validation(e.to_string())),
    }
}

struct RunDir {
    root: PathBuf,
    hash: String,
}

impl RunDir {
    fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    fn translation_path(&self, k: usize) -> PathBuf {
        self.checkpoints().join(format!("translation-{k}.ckpt"))
    }

    fn regression_path(&self) -> PathBuf {
        self.checkpoints().join("regression.ckpt")
    }

    fn load_checkpoint(&self, path: &Path) -> Result<Option<Checkpoint>, CommandError> {
        if !path.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(path)?;
        if ck.config_hash != self.hash {
            return Err(CommandError::Validation(format!(
                "{} was written by a different configuration",
                path.display()
            )));
        }
        Ok(Some(ck))
    }

    fn load_state(&self, stages: usize) -> Result<PipelineState, CommandError> {
        let mut state = PipelineState::default();
        for k in 0..stages {
            match self.load_checkpoint(&self.translation_path(k))? {
                Some(ck) => state.translations.push(ck.to_translation()?),
                None => return Ok(state),
            }
        }
        if let Some(ck) = self.load_checkpoint(&self.regression_path())? {
            state.regression = Some(ck.to_regression()?);
        }
        Ok(state)
    }
}

struct CheckpointHooks<'a> {
    dir: &'a RunDir,
    epochs: usize,
    halt_after: Option<usize>,
    error: Option<CommandError>,
}

impl CheckpointHooks<'_> {
    fn after_epoch(&mut self, ck: Checkpoint, path: PathBuf) -> Result<(), ModelError> {
        if let Err(e) = ck.save(&path) {
            let msg = e.to_string();
            self.error = Some(e.into());
            return Err(ModelError::Checkpoint(msg));
        }
        self.epochs += 1;
        match self.halt_after {
            Some(n) if self.epochs >= n => Err(ModelError::Interrupted { epochs: self.epochs }),
            _ => Ok(()),
        }
    }
}

impl PipelineHooks for CheckpointHooks<'_> {
    fn translation_epoch(&mut self, stage: usize, model: &TranslationModel<f64>, progress: &Progress) -> Result<(), ModelError> {
        let s = TranslationStage {
            model: model.clone(),
            progress: progress.clone(),
        };
        self.after_epoch(Checkpoint::from_translation(&s, &self.dir.hash), self.dir.translation_path(stage))
    }

    fn regression_epoch(
        &mut self,
        head: &RegressionHead<f64>,
        encoder: Option<&Encoder<f64>>,
        progress: &RegressionProgress<f64>,
    ) -> Result<(), ModelError> {
        let s = RegressionStage {
            head: head.clone(),
            encoder: encoder.cloned(),
            progress: progress.clone(),
        };
        self.after_epoch(Checkpoint::from_regression(&s, &self.dir.hash), self.dir.regression_path())
    }
}

fn curves_csv(state: &PipelineState) -> String {
    let mut out = String::from("stage,epoch,train,validation\n");
    let mut rows = |stage: &str, curve: &[crate::train::EpochLoss]| {
        for e in curve {
            let v = e.validation.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(out, "{stage},{},{},{v}", e.epoch, e.train);
        }
    };
    for (k, t) in state.translations.iter().enumerate() {
        rows(&format!("translation-{k}"), &t.progress.curve);
    }
    if let Some(r) = &state.regression {
        rows("regression", &r.progress.curve);
    }
    out
}

/// Runs (or resumes) `spec` into `config.output_dir`.
fn run_spec(
    spec: &PipelineSpec,
    config: &RunConfig,
    dataset: &Dataset,
    options: RunOptions,
) -> Result<PipelineResult, CommandError> {
    let dir = RunDir {
        root: config.output_dir.clone(),
        hash: config.hash(),
    };
    create_dir(&dir.checkpoints())?;
    let snapshot = dir.root.join("config.json");
    if snapshot.exists() {
        let previous = RunConfig::load(&snapshot)?;
        if previous.hash() != dir.hash {
            return Err(CommandError::Validation(format!(
                "{} holds a run with a different configuration",
                dir.root.display()
            )));
        }
    }
    write(&snapshot, config.to_json())?;

    let mut state = dir.load_state(spec.kind.translation_stages())?;
    let mut hooks = CheckpointHooks {
        dir: &dir,
        epochs: 0,
        halt_after: options.halt_after_epochs,
        error: None,
    };
    let pipeline_config = config.pipeline_config()?;
    let outcome = run_pipeline(spec, dataset, &pipeline_config, &mut state, &mut hooks);
    write(&dir.root.join("curves.csv"), curves_csv(&state))?;
    let marker = dir.root.join(FAILED_MARKER);
    match outcome {
        Ok(result) => {
            let report = RunReport {
                config_hash: dir.hash.clone(),
                result,
            };
            let json = serde_json::to_string_pretty(&report).expect("report serialises");
            write(&dir.root.join("report.json"), json + "\n")?;
            write(&dir.root.join("report.txt"), render_run(&report))?;
            if marker.exists() {
                fs::remove_file(&marker).map_err(|e| io_err(&marker, e))?;
            }
            Ok(report.result)
        }
        Err(e) => {
            let err = hooks.error.take().unwrap_or_else(|| e.into());
            write(&marker, format!("{err}\n"))?;
            Err(err)
        }
    }
}

pub fn cmd_run(config: &RunConfig, options: RunOptions) -> Result<PipelineResult, CommandError> {
    config.validate()?;
    let spec = config.resolve_spec()?;
    let dataset = load_data(config)?;
    run_spec(&spec, config, &dataset, options)
}

/// Runs every manifest spec into `<output_dir>/<spec id>` and writes
/// `summary.json` and `summary.txt`. A failing spec becomes a failed row.
pub fn cmd_grid(config: &RunConfig, options: RunOptions) -> Result<GridSummary, CommandError> {
    config.validate()?;
    let dataset = load_data(config)?;
    create_dir(&config.output_dir)?;
    let specs = enumerate_variations();
    let run_one = |spec: &PipelineSpec| -> GridRow {
        let cfg = RunConfig {
            spec: Some(spec.id.clone()),
            inline_spec: None,
            output_dir: config.output_dir.join(&spec.id),
            ..config.clone()
        };
        let status = match run_spec(spec, &cfg, &dataset, options) {
            Ok(r) => RowStatus::Ok {
                metrics: headline(&r.evaluation),
            },
            Err(e) => RowStatus::Failed { message: e.to_string() },
        };
        GridRow {
            id: spec.id.clone(),
            label: spec.label(),
            kind: spec.kind,
            translation_stages: spec.kind.translation_stages(),
            status,
        }
    };
    let rows: Vec<GridRow> = if config.concurrency > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.concurrency)
            .build()
            .map_err(|e| CommandError::Io(e.to_string()))?;
        pool.install(|| specs.par_iter().map(run_one).collect())
    } else {
        specs.iter().map(run_one).collect()
    };
    let summary = GridSummary {
        config_hash: RunConfig {
            spec: None,
            inline_spec: None,
            ..config.clone()
        }
        .hash(),
        rows,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write(&config.output_dir.join("summary.json"), json + "\n")?;
    write(&config.output_dir.join("summary.txt"), render_grid(&summary))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::StageConfig;

    fn config(dir: &Path, spec: &str) -> RunConfig {
        let stage = StageConfig {
            hidden: 3,
            epochs: 3,
            learning_rate: 0.05,
            ..StageConfig::default()
        };
        RunConfig {
            seed: Some(5),
            spec: Some(spec.into()),
            synthetic: Some(SynthConfig {
                n_segments: 10,
                seed: 5,
                ..SynthConfig::default()
            }),
            translation: stage.clone(),
            regression: StageConfig {
                attention: false,
                ..stage
            },
            output_dir: dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn run_writes_everything() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(&tmp.path().join("run"), "hier-ta-v");
        cmd_run(&cfg, RunOptions::default()).unwrap();
        let root = &cfg.output_dir;
        for f in ["config.json", "curves.csv", "report.json", "report.txt"] {
            assert!(root.join(f).exists(), "{f}");
        }
        for k in 0..2 {
            assert!(root.join(format!("checkpoints/translation-{k}.ckpt")).exists());
        }
        let ck = Checkpoint::load(root.join("checkpoints/regression.ckpt")).unwrap();
        assert_eq!(ck.config_hash, cfg.hash());
        assert_eq!(RunConfig::load(root.join("config.json")).unwrap().hash(), ck.config_hash);
        assert!(!root.join(FAILED_MARKER).exists());
        let text = cmd_report(&root.join("report.json")).unwrap();
        assert!(text.contains("Binary F1") && text.contains("7-class F1"));
    }

    #[test]
    fn halted_run_resumes_to_identical_report() {
        let tmp = tempfile::tempdir().unwrap();
        let full = config(&tmp.path().join("full"), "tr-t-a");
        cmd_run(&full, RunOptions::default()).unwrap();
        let part = config(&tmp.path().join("part"), "tr-t-a");
        let err = cmd_run(
            &part,
            RunOptions {
                halt_after_epochs: Some(2),
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(part.output_dir.join(FAILED_MARKER).exists());
        cmd_run(&part, RunOptions::default()).unwrap();
        assert!(!part.output_dir.join(FAILED_MARKER).exists());
        let read = |c: &RunConfig| fs::read(c.output_dir.join("report.json")).unwrap();
        assert_eq!(read(&full), read(&part));
    }

    #[test]
    fn changed_config_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(tmp.path(), "uni-a");
        cmd_run(&cfg, RunOptions::default()).unwrap();
        let mut other = cfg.clone();
        other.regression.learning_rate = 0.2;
        assert_eq!(cmd_run(&other, RunOptions::default()).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn generate_is_deterministic_and_valid() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_segments: 20,
            seed: 1,
            ..SynthConfig::default()
        };
        let (a, b) = (tmp.path().join("a.jsonl"), tmp.path().join("sub/b.jsonl"));
        cmd_generate(&cfg, &a).unwrap();
        cmd_generate(&cfg, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert!(cmd_validate(&a).unwrap().is_empty());
        let header = load_dataset(&a).unwrap().header.unwrap();
        assert_eq!(header.dims, cfg.dims);
    }

    #[test]
    fn missing_inputs_map_to_exit_codes() {
        let tmp = tempfile::tempdir().unwrap();
        assert_eq!(cmd_validate(&tmp.path().join("none.jsonl")).unwrap_err().exit_code(), 3);
        let mut cfg = config(tmp.path(), "uni-t");
        cfg.seed = None;
        assert_eq!(cmd_run(&cfg, RunOptions::default()).unwrap_err().exit_code(), 1);
    }
}
