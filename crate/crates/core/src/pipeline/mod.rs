//! Declarative pipeline specs: baselines, bimodal translation, concatenation
//! variants and hierarchical two-stage translation, plus the frozen manifest
//! of all 26 experiment rows.

mod run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::data::{AlignedSegment, Modality, ModalityDims};
use crate::error::ModelError;
use crate::recurrent::CellKind;
use crate::regression::RegressionConfig;
use crate::seq2seq::{TargetKind, TargetSeq, TranslationConfig, END_TOKEN};
use crate::train::TrainConfig;

pub use run::{
    run_baseline, run_bimodal, run_hierarchical, run_pipeline, NoHooks, PipelineHooks, PipelineResult, PipelineState,
    Prediction, RegressionStage, RegressionSummary, StageSummary, TranslationStage,
};

/// Token ids below this offset are reserved (start and end).
pub const TOKEN_OFFSET: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Split(#[from] crate::data::SplitError),
    #[error("segment {id}: alignment corrupted, {a} has {len_a} steps but {b} has {len_b}")]
    Alignment {
        id: String,
        a: Modality,
        len_a: usize,
        b: Modality,
        len_b: usize,
    },
    #[error("invalid pipeline spec {id}: {reason}")]
    InvalidSpec { id: String, reason: String },
    #[error("unknown modality expression `{0}`")]
    BadExpr(String),
    #[error("dataset has no header declaring dimensions")]
    NoHeader,
    #[error("saved state does not match the pipeline: {0}")]
    State(String),
    #[error("evaluation: {0}")]
    Metrics(#[from] crate::metrics::MetricsError),
}

/// A modality, an ordered time-step concatenation, or the representation
/// `embed(X,Y)` produced by translating X into Y.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ModalityExpr {
    Single(Modality),
    Concat(Vec<Modality>),
    Embed(Modality, Modality),
}

impl ModalityExpr {
    /// Raw modalities whose features make up the expression, in order.
    pub fn modalities(&self) -> Vec<Modality> {
        match self {
            ModalityExpr::Single(m) => vec![*m],
            ModalityExpr::Concat(ms) => ms.clone(),
            ModalityExpr::Embed(x, y) => vec![*x, *y],
        }
    }

    /// Feature width of a raw (non-embed) expression.
    pub fn raw_dim(&self, dims: &ModalityDims) -> usize {
        self.modalities().iter().map(|&m| dims.get(m)).sum()
    }
}

impl fmt::Display for ModalityExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModalityExpr::Single(m) => write!(f, "{m}"),
            ModalityExpr::Concat(ms) => {
                let tags: Vec<&str> = ms.iter().map(|m| m.tag()).collect();
                write!(f, "concat({})", tags.join(","))
            }
            ModalityExpr::Embed(x, y) => write!(f, "embed({x},{y})"),
        }
    }
}

impl FromStr for ModalityExpr {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || PipelineError::BadExpr(s.to_string());
        let list = |inner: &str| -> Result<Vec<Modality>, PipelineError> {
            inner.split(',').map(|t| Modality::from_tag(t).ok_or_else(bad)).collect()
        };
        if let Some(m) = Modality::from_tag(&compact) {
            return Ok(ModalityExpr::Single(m));
        }
        if let Some(inner) = compact.strip_prefix("concat(").and_then(|r| r.strip_suffix(')')) {
            return Ok(ModalityExpr::Concat(list(inner)?));
        }
        if let Some(inner) = compact.strip_prefix("embed(").and_then(|r| r.strip_suffix(')')) {
            if let [x, y] = list(inner)?[..] {
                return Ok(ModalityExpr::Embed(x, y));
            }
        }
        Err(bad())
    }
}

impl Serialize for ModalityExpr {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> Result<Se::Ok, Se::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModalityExpr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    UnimodalBaseline,
    ConcatBaseline,
    BimodalTranslate,
    Hierarchical,
    ConcatToOne,
    OneToConcat,
    ConcatToConcat,
}

impl PipelineKind {
    pub fn translation_stages(self) -> usize {
        match self {
            PipelineKind::UnimodalBaseline | PipelineKind::ConcatBaseline => 0,
            PipelineKind::Hierarchical => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::UnimodalBaseline => "unimodal-baseline",
            PipelineKind::ConcatBaseline => "concat-baseline",
            PipelineKind::BimodalTranslate => "bimodal-translate",
            PipelineKind::Hierarchical => "hierarchical",
            PipelineKind::ConcatToOne => "concat-to-one",
            PipelineKind::OneToConcat => "one-to-concat",
            PipelineKind::ConcatToConcat => "concat-to-concat",
        }
    }
}

/// One experiment row. Baselines have no target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub id: String,
    pub kind: PipelineKind,
    pub source: ModalityExpr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ModalityExpr>,
}

impl PipelineSpec {
    pub fn new(id: &str, kind: PipelineKind, source: &str, target: Option<&str>) -> Result<Self, PipelineError> {
        let spec = Self {
            id: id.to_string(),
            kind,
            source: source.parse()?,
            target: target.map(str::parse).transpose()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Display label such as `concat(T,V) -> concat(T,A)`.
    pub fn label(&self) -> String {
        match &self.target {
            Some(t) => format!("{} -> {}", self.source, t),
            None => self.source.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        use ModalityExpr::*;
        use PipelineKind::*;
        let fail = |reason: &str| {
            Err(PipelineError::InvalidSpec {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        for e in std::iter::once(&self.source).chain(&self.target) {
            let ms = e.modalities();
            if let Concat(_) = e {
                if ms.len() < 2 {
                    return fail("a concatenation needs at least two modalities");
                }
            }
            if (1..ms.len()).any(|i| ms[..i].contains(&ms[i])) {
                return fail("a modality appears twice in one expression");
            }
        }
        let shape_ok = match (self.kind, &self.source, &self.target) {
            (UnimodalBaseline, Single(_), None) => true,
            (ConcatBaseline, Concat(_), None) => true,
            (BimodalTranslate, Single(a), Some(Single(b))) => a != b,
            (Hierarchical, Embed(_, _), Some(Single(z))) => !self.source.modalities().contains(z),
            (ConcatToOne, Concat(ms), Some(Single(z))) => !ms.contains(z),
            (OneToConcat, Single(a), Some(Concat(ms))) => !ms.contains(a),
            (ConcatToConcat, Concat(a), Some(Concat(b))) => a != b,
            _ => false,
        };
        if !shape_ok {
            return fail(&format!("{} does not fit kind {}", self.label(), self.kind.name()));
        }
        Ok(())
    }

    /// Translation stages as (source, target) pairs, in execution order.
    pub fn stages(&self) -> Vec<(ModalityExpr, ModalityExpr)> {
        match (&self.source, &self.target) {
            (_, None) => Vec::new(),
            (ModalityExpr::Embed(x, y), Some(z)) => vec![
                (ModalityExpr::Single(*x), ModalityExpr::Single(*y)),
                (self.source.clone(), z.clone()),
            ],
            (s, Some(t)) => vec![(s.clone(), t.clone())],
        }
    }
}

/// The frozen experiment grid, in manifest order.
pub fn enumerate_variations() -> Vec<PipelineSpec> {
    use PipelineKind::*;
    let rows: [(&str, PipelineKind, &str, Option<&str>); 26] = [
        ("uni-t", UnimodalBaseline, "T", None),
        ("uni-a", UnimodalBaseline, "A", None),
        ("uni-v", UnimodalBaseline, "V", None),
        ("cat-ta", ConcatBaseline, "concat(T,A)", None),
        ("cat-tv", ConcatBaseline, "concat(T,V)", None),
        ("cat-av", ConcatBaseline, "concat(A,V)", None),
        ("cat-tav", ConcatBaseline, "concat(T,A,V)", None),
        ("tr-t-v", BimodalTranslate, "T", Some("V")),
        ("tr-t-a", BimodalTranslate, "T", Some("A")),
        ("tr-a-t", BimodalTranslate, "A", Some("T")),
        ("tr-a-v", BimodalTranslate, "A", Some("V")),
        ("tr-v-t", BimodalTranslate, "V", Some("T")),
        ("tr-v-a", BimodalTranslate, "V", Some("A")),
        ("hier-ta-v", Hierarchical, "embed(T,A)", Some("V")),
        ("hier-at-v", Hierarchical, "embed(A,T)", Some("V")),
        ("hier-tv-a", Hierarchical, "embed(T,V)", Some("A")),
        ("hier-vt-a", Hierarchical, "embed(V,T)", Some("A")),
        ("hier-av-t", Hierarchical, "embed(A,V)", Some("T")),
        ("hier-va-t", Hierarchical, "embed(V,A)", Some("T")),
        ("c2o-ta-v", ConcatToOne, "concat(T,A)", Some("V")),
        ("c2o-tv-a", ConcatToOne, "concat(T,V)", Some("A")),
        ("c2o-av-t", ConcatToOne, "concat(A,V)", Some("T")),
        ("o2c-t-av", OneToConcat, "T", Some("concat(A,V)")),
        ("o2c-a-tv", OneToConcat, "A", Some("concat(T,V)")),
        ("c2c-tv-ta", ConcatToConcat, "concat(T,V)", Some("concat(T,A)")),
        ("c2c-ta-tv", ConcatToConcat, "concat(T,A)", Some("concat(T,V)")),
    ];
    rows.iter()
        .map(|&(id, kind, s, t)| PipelineSpec::new(id, kind, s, t).expect("manifest entries are valid"))
        .collect()
}

pub fn find_spec(id: &str) -> Option<PipelineSpec> {
    enumerate_variations().into_iter().find(|s| s.id == id)
}

/// Per-step concatenation of several modalities of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatenatedSequence {
    pub features: DenseArray<f64>,
    pub modalities: Vec<Modality>,
    /// Column where each modality starts.
    pub offsets: Vec<usize>,
}

pub fn concat_modalities(segment: &AlignedSegment, which: &[Modality]) -> Result<ConcatenatedSequence, PipelineError> {
    let first = which.first().ok_or_else(|| PipelineError::BadExpr("concat()".into()))?;
    let t = segment.modality(*first).len();
    for &m in &which[1..] {
        let len = segment.modality(m).len();
        if len != t {
            return Err(PipelineError::Alignment {
                id: segment.id.clone(),
                a: *first,
                len_a: t,
                b: m,
                len_b: len,
            });
        }
    }
    let mut offsets = Vec::with_capacity(which.len());
    let mut width = 0;
    for &m in which {
        offsets.push(width);
        width += segment.modality(m).dim();
    }
    let mut values = Vec::with_capacity(t * width);
    for step in 0..t {
        for &m in which {
            values.extend_from_slice(segment.modality(m).features.row(step));
        }
    }
    Ok(ConcatenatedSequence {
        features: DenseArray::matrix(t, width, values),
        modalities: which.to_vec(),
        offsets,
    })
}

/// Raw feature matrix of a non-embed expression.
pub fn source_features(segment: &AlignedSegment, expr: &ModalityExpr) -> Result<DenseArray<f64>, PipelineError> {
    match expr {
        ModalityExpr::Single(m) => Ok(segment.modality(*m).features.clone()),
        ModalityExpr::Concat(ms) => Ok(concat_modalities(segment, ms)?.features),
        ModalityExpr::Embed(..) => Err(PipelineError::BadExpr(format!("{expr} has no raw features"))),
    }
}

/// Decoder target kind of an expression: text alone decodes token ids
/// (corpus vocabulary plus the reserved tokens), anything else decodes features.
pub fn target_kind(expr: &ModalityExpr, dims: &ModalityDims, vocab: usize) -> TargetKind {
    match expr {
        ModalityExpr::Single(Modality::Text) => TargetKind::Discrete {
            vocab: vocab + TOKEN_OFFSET,
        },
        _ => TargetKind::Continuous {
            dim: expr.raw_dim(dims),
        },
    }
}

/// Decoding target of a segment: shifted token ids ending in the end token,
/// or the feature matrix.
pub fn target_sequence(segment: &AlignedSegment, expr: &ModalityExpr) -> Result<TargetSeq<f64>, PipelineError> {
    match expr {
        ModalityExpr::Single(Modality::Text) => {
            let tokens = segment.text.tokens.as_deref().unwrap_or_default();
            let mut ids: Vec<usize> = tokens.iter().map(|&k| k + TOKEN_OFFSET).collect();
            ids.push(END_TOKEN);
            Ok(TargetSeq::Tokens(ids))
        }
        _ => Ok(TargetSeq::Vectors(source_features(segment, expr)?)),
    }
}

/// Hyperparameters of one kind of stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub attention: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub accumulate: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Lstm,
            layers: 1,
            hidden: 64,
            attention: true,
            epochs: 50,
            learning_rate: 0.01,
            clip_norm: None,
            accumulate: 1,
        }
    }
}

impl StageConfig {
    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            accumulate: self.accumulate,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: crate::data::TRAIN_FRACTION,
            validation_fraction: crate::data::VALIDATION_FRACTION,
        }
    }
}

/// Everything a pipeline run needs besides the pipeline spec and the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub split: SplitConfig,
    pub translation: StageConfig,
    pub regression: StageConfig,
    /// Train the last translation encoder together with the regression head.
    pub finetune_encoder: bool,
    pub beam_width: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split: SplitConfig::default(),
            translation: StageConfig::default(),
            regression: StageConfig {
                attention: false,
                ..StageConfig::default()
            },
            finetune_encoder: false,
            beam_width: 4,
        }
    }
}

/// Model topologies a spec instantiates, derived without touching any data.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelinePlan {
    pub stages: Vec<TranslationConfig>,
    pub regression: RegressionConfig,
}

/// Dry-run shape check: chains every stage's dimensions and fails on any
/// inconsistency.
pub fn plan(
    spec: &PipelineSpec,
    dims: &ModalityDims,
    vocab: usize,
    config: &PipelineConfig,
) -> Result<PipelinePlan, PipelineError> {
    spec.validate()?;
    let t = &config.translation;
    let mut stages = Vec::new();
    let mut width = match &spec.source {
        ModalityExpr::Embed(x, _) => dims.get(*x),
        e => e.raw_dim(dims),
    };
    for (k, (src, tgt)) in spec.stages().iter().enumerate() {
        let expected = match src {
            ModalityExpr::Embed(..) => stages.last().map(|s: &TranslationConfig| s.hidden),
            e => Some(e.raw_dim(dims)),
        };
        if expected != Some(width) {
            return Err(PipelineError::InvalidSpec {
                id: spec.id.clone(),
                reason: format!("stage {k} source width {width} does not match {src}"),
            });
        }
        stages.push(TranslationConfig {
            source_dim: width,
            target: target_kind(tgt, dims, vocab),
            cell: t.cell,
            layers: t.layers,
            hidden: t.hidden,
            attention: t.attention,
        });
        width = t.hidden;
    }
    if stages.len() != spec.kind.translation_stages() {
        return Err(PipelineError::InvalidSpec {
            id: spec.id.clone(),
            reason: format!("{} stages for kind {}", stages.len(), spec.kind.name()),
        });
    }
    let r = &config.regression;
    Ok(PipelinePlan {
        stages,
        regression: RegressionConfig {
            input_dim: width,
            cell: r.cell,
            layers: r.layers,
            hidden: r.hidden,
            attention: r.attention,
        },
    })
}
