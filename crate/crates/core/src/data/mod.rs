//! Word-aligned multimodal segments, validation, splitting and a synthetic
//! corpus generator.

mod io;
mod split;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;

pub use io::{load_dataset, parse_dataset, save_dataset, to_jsonl, validate_file, DataError, FORMAT_NAME, FORMAT_VERSION};
pub use split::{split_dataset, split_sizes, DatasetSplit, SplitError, TRAIN_FRACTION, VALIDATION_FRACTION};
pub use synth::{generate_synthetic, SynthConfig};

pub const LABEL_RANGE: (f64, f64) = (-3.0, 3.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T")]
    Text,
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "V")]
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Video];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "T",
            Modality::Audio => "A",
            Modality::Video => "V",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "T" => Some(Modality::Text),
            "A" => Some(Modality::Audio),
            "V" => Some(Modality::Video),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Feature dimension of every modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub text: usize,
    pub audio: usize,
    pub video: usize,
}

impl ModalityDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Video => self.video,
        }
    }
}

/// One modality of one segment: `[T, d]` features, plus token ids for text.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySequence {
    pub modality: Modality,
    pub features: DenseArray<f64>,
    pub tokens: Option<Vec<usize>>,
}

impl ModalitySequence {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSegment {
    pub id: String,
    pub label: f64,
    pub text: ModalitySequence,
    pub audio: ModalitySequence,
    pub video: ModalitySequence,
}

impl AlignedSegment {
    pub fn modality(&self, m: Modality) -> &ModalitySequence {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    /// Word count `T` (taken from the text modality).
    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dataset-level declaration of dimensions and vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub dims: ModalityDims,
    pub vocab_size: usize,
}

impl DatasetHeader {
    pub fn new(dims: ModalityDims, vocab_size: usize) -> Self {
        Self {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            dims,
            vocab_size,
        }
    }
}

/// Segments in ascending id order. An empty file has no header.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub header: Option<DatasetHeader>,
    pub segments: Vec<AlignedSegment>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&AlignedSegment> {
        self.segments
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.segments[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.segments.iter().map(|s| s.id.clone()).collect()
    }
}

/// A violated segment invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Diagnostic {
    Alignment {
        id: String,
        lengths: Vec<(Modality, usize)>,
    },
    EmptySequence {
        id: String,
        modality: Modality,
    },
    LabelRange {
        id: String,
        label: f64,
    },
    NonFinite {
        id: String,
        modality: Modality,
        step: usize,
        index: usize,
    },
    Dimension {
        id: String,
        modality: Modality,
        expected: usize,
        got: usize,
    },
    TokenCount {
        id: String,
        tokens: usize,
        steps: usize,
    },
    TokenRange {
        id: String,
        step: usize,
        token: usize,
        vocab: usize,
    },
    DuplicateId {
        id: String,
    },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::Alignment { id, lengths } => {
                let parts: Vec<String> = lengths.iter().map(|(m, n)| format!("{m}={n}")).collect();
                write!(f, "segment {id}: modalities not word-aligned ({})", parts.join(", "))
            }
            Diagnostic::EmptySequence { id, modality } => write!(f, "segment {id}: {modality} sequence is empty"),
            Diagnostic::LabelRange { id, label } => write!(f, "segment {id}: label {label} outside [-3, 3]"),
            Diagnostic::NonFinite {
                id,
                modality,
                step,
                index,
            } => write!(f, "segment {id}: non-finite {modality} feature at step {step}, index {index}"),
            Diagnostic::Dimension {
                id,
                modality,
                expected,
                got,
            } => write!(f, "segment {id}: {modality} feature dimension {got}, header declares {expected}"),
            Diagnostic::TokenCount { id, tokens, steps } => {
                write!(f, "segment {id}: {tokens} text tokens for {steps} steps")
            }
            Diagnostic::TokenRange { id, step, token, vocab } => {
                write!(f, "segment {id}: token {token} at step {step} outside vocabulary of {vocab}")
            }
            Diagnostic::DuplicateId { id } => write!(f, "segment id {id} appears more than once"),
        }
    }
}

impl Diagnostic {
    pub fn segment(&self) -> &str {
        match self {
            Diagnostic::Alignment { id, .. }
            | Diagnostic::EmptySequence { id, .. }
            | Diagnostic::LabelRange { id, .. }
            | Diagnostic::NonFinite { id, .. }
            | Diagnostic::Dimension { id, .. }
            | Diagnostic::TokenCount { id, .. }
            | Diagnostic::TokenRange { id, .. }
            | Diagnostic::DuplicateId { id } => id,
        }
    }
}

/// Every invariant violation of `segment`; empty when valid. Dimension and
/// vocabulary checks need the dataset header.
pub fn validate_segment(segment: &AlignedSegment, header: Option<&DatasetHeader>) -> Vec<Diagnostic> {
    let id = &segment.id;
    let mut out = Vec::new();
    let lengths: Vec<(Modality, usize)> = Modality::ALL.iter().map(|&m| (m, segment.modality(m).len())).collect();
    if lengths.iter().any(|&(_, n)| n != lengths[0].1) {
        out.push(Diagnostic::Alignment {
            id: id.clone(),
            lengths: lengths.clone(),
        });
    }
    if !(segment.label.is_finite() && segment.label >= LABEL_RANGE.0 && segment.label <= LABEL_RANGE.1) {
        out.push(Diagnostic::LabelRange {
            id: id.clone(),
            label: segment.label,
        });
    }
    for m in Modality::ALL {
        let seq = segment.modality(m);
        if let Some(h) = header {
            let expected = h.dims.get(m);
            if seq.dim() != expected {
                out.push(Diagnostic::Dimension {
                    id: id.clone(),
                    modality: m,
                    expected,
                    got: seq.dim(),
                });
            }
        }
        let d = seq.dim();
        for (k, v) in seq.features.values().iter().enumerate() {
            if !v.is_finite() {
                out.push(Diagnostic::NonFinite {
                    id: id.clone(),
                    modality: m,
                    step: k / d,
                    index: k % d,
                });
            }
        }
    }
    match &segment.text.tokens {
        Some(tokens) => {
            if tokens.len() != segment.text.len() {
                out.push(Diagnostic::TokenCount {
                    id: id.clone(),
                    tokens: tokens.len(),
                    steps: segment.text.len(),
                });
            }
            if let Some(h) = header {
                for (step, &token) in tokens.iter().enumerate() {
                    if token >= h.vocab_size {
                        out.push(Diagnostic::TokenRange {
                            id: id.clone(),
                            step,
                            token,
                            vocab: h.vocab_size,
                        });
                    }
                }
            }
        }
        None => out.push(Diagnostic::TokenCount {
            id: id.clone(),
            tokens: 0,
            steps: segment.text.len(),
        }),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn segment(id: &str, t: usize) -> AlignedSegment {
        let seq = |m: Modality, d: usize| ModalitySequence {
            modality: m,
            features: DenseArray::matrix(t, d, (0..t * d).map(|i| i as f64 * 0.25 - 1.0).collect()),
            tokens: (m == Modality::Text).then(|| (0..t).map(|i| i % 4).collect()),
        };
        AlignedSegment {
            id: id.to_string(),
            label: 1.25,
            text: seq(Modality::Text, 3),
            audio: seq(Modality::Audio, 2),
            video: seq(Modality::Video, 2),
        }
    }

    fn header() -> DatasetHeader {
        DatasetHeader::new(
            ModalityDims {
                text: 3,
                audio: 2,
                video: 2,
            },
            4,
        )
    }

    #[test]
    fn valid_segment() {
        assert!(validate_segment(&segment("a", 3), Some(&header())).is_empty());
    }

    #[test]
    fn label_out_of_range() {
        let mut s = segment("a", 2);
        s.label = 3.5;
        assert_eq!(
            validate_segment(&s, None),
            vec![Diagnostic::LabelRange {
                id: "a".into(),
                label: 3.5
            }]
        );
    }

    #[test]
    fn nan_feature_located() {
        let mut s = segment("a", 3);
        s.audio.features.values_mut()[3] = f64::NAN;
        assert_eq!(
            validate_segment(&s, None),
            vec![Diagnostic::NonFinite {
                id: "a".into(),
                modality: Modality::Audio,
                step: 1,
                index: 1
            }]
        );
    }

    #[test]
    fn reports_every_violation() {
        let mut s = segment("bad", 3);
        s.label = -4.0;
        s.video = segment("x", 2).video;
        s.text.tokens = Some(vec![0, 9, 1]);
        let d = validate_segment(&s, Some(&header()));
        assert_eq!(d.len(), 3, "{d:?}");
        assert!(d.iter().all(|x| x.segment() == "bad"));
        let msg = d[0].to_string();
        assert!(msg.contains("bad") && msg.contains("T=3") && msg.contains("V=2"), "{msg}");
    }

    #[test]
    fn dimension_checked_against_header() {
        let mut h = header();
        h.dims.audio = 5;
        let d = validate_segment(&segment("a", 2), Some(&h));
        assert!(matches!(d[..], [Diagnostic::Dimension { modality: Modality::Audio, expected: 5, got: 2, .. }]));
    }
}
