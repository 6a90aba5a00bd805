//! JSON-lines dataset files.
//!
//! Line 1 is a header `{"format", "version", "dims", "vocab_size"}`; every
//! further non-blank line is one segment
//! `{"id", "label", "text": {"tokens", "features"}, "audio": {"features"},
//! "video": {"features"}}` with features as arrays of rows.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AlignedSegment, Dataset, DatasetHeader, Diagnostic, Modality, ModalitySequence};
use crate::autodiff::DenseArray;

pub const FORMAT_NAME: &str = "modtrans-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(
        "line {line}: missing dataset header; the first line must be \
         {{\"format\": \"{FORMAT_NAME}\", \"version\": {FORMAT_VERSION}, \
         \"dims\": {{\"text\": d_T, \"audio\": d_A, \"video\": d_V}}, \"vocab_size\": V}}"
    )]
    MissingHeader { line: usize },
    #[error("unsupported dataset format `{found}` (expected `{FORMAT_NAME}`)")]
    UnsupportedFormat { found: String },
    #[error("unsupported dataset version {found}; this build reads version {FORMAT_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("{} invalid segment(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Diagnostic>),
    #[error("a non-empty dataset needs a header to be saved")]
    NoHeader,
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Serialize, Deserialize)]
struct RawSequence {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
    features: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawSegment {
    id: String,
    label: f64,
    text: RawSequence,
    audio: RawSequence,
    video: RawSequence,
}

fn to_raw(seq: &ModalitySequence) -> RawSequence {
    RawSequence {
        tokens: seq.tokens.clone(),
        features: (0..seq.len()).map(|t| seq.features.row(t).to_vec()).collect(),
    }
}

/// Builds a sequence, or the diagnostic explaining why it cannot exist.
fn from_raw(
    id: &str,
    modality: Modality,
    raw: RawSequence,
    line: usize,
) -> Result<Result<ModalitySequence, Diagnostic>, DataError> {
    let t = raw.features.len();
    if t == 0 {
        return Ok(Err(Diagnostic::EmptySequence {
            id: id.to_string(),
            modality,
        }));
    }
    let d = raw.features[0].len();
    if let Some(bad) = raw.features.iter().position(|r| r.len() != d) {
        return Err(DataError::Parse {
            line,
            message: format!(
                "segment {id}: {modality} feature row {bad} has {} values, row 0 has {d}",
                raw.features[bad].len()
            ),
        });
    }
    if d == 0 {
        return Ok(Err(Diagnostic::Dimension {
            id: id.to_string(),
            modality,
            expected: 1,
            got: 0,
        }));
    }
    Ok(Ok(ModalitySequence {
        modality,
        features: DenseArray::matrix(t, d, raw.features.into_iter().flatten().collect()),
        tokens: if modality == Modality::Text {
            Some(raw.tokens.unwrap_or_default())
        } else {
            None
        },
    }))
}

/// Parses a dataset, returning it together with every segment diagnostic.
/// Segments that cannot be represented are dropped and reported.
pub fn parse_dataset(text: &str) -> Result<(Dataset, Vec<Diagnostic>), DataError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((hline, htext)) = lines.next() else {
        return Ok((Dataset::default(), Vec::new()));
    };
    let value: serde_json::Value = serde_json::from_str(htext).map_err(|e| DataError::Parse {
        line: hline,
        message: e.to_string(),
    })?;
    if value.get("format").is_none() {
        return Err(DataError::MissingHeader { line: hline });
    }
    let header: DatasetHeader = serde_json::from_value(value).map_err(|e| DataError::Parse {
        line: hline,
        message: format!("header: {e}"),
    })?;
    if header.format != FORMAT_NAME {
        return Err(DataError::UnsupportedFormat { found: header.format });
    }
    if header.version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion { found: header.version });
    }

    let mut segments = Vec::new();
    let mut diagnostics = Vec::new();
    let mut seen = HashSet::new();
    for (line, l) in lines {
        let raw: RawSegment = serde_json::from_str(l).map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(raw.id.clone()) {
            diagnostics.push(Diagnostic::DuplicateId { id: raw.id.clone() });
            continue;
        }
        let id = raw.id;
        let text = from_raw(&id, Modality::Text, raw.text, line)?;
        let audio = from_raw(&id, Modality::Audio, raw.audio, line)?;
        let video = from_raw(&id, Modality::Video, raw.video, line)?;
        match (text, audio, video) {
            (Ok(text), Ok(audio), Ok(video)) => {
                let seg = AlignedSegment {
                    id,
                    label: raw.label,
                    text,
                    audio,
                    video,
                };
                diagnostics.extend(super::validate_segment(&seg, Some(&header)));
                segments.push(seg);
            }
            (t, a, v) => diagnostics.extend([t.err(), a.err(), v.err()].into_iter().flatten()),
        }
    }
    segments.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((
        Dataset {
            header: Some(header),
            segments,
        },
        diagnostics,
    ))
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads and fully validates a dataset; segments are ordered by id.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (dataset, diagnostics) = parse_dataset(&read(path.as_ref())?)?;
    if diagnostics.is_empty() {
        Ok(dataset)
    } else {
        Err(DataError::Invalid(diagnostics))
    }
}

/// Every diagnostic of a dataset file. Format errors are returned as `Err`.
pub fn validate_file(path: impl AsRef<Path>) -> Result<Vec<Diagnostic>, DataError> {
    Ok(parse_dataset(&read(path.as_ref())?)?.1)
}

/// Serialises a dataset; an empty dataset without a header becomes an empty file.
pub fn to_jsonl(dataset: &Dataset) -> Result<String, DataError> {
    let Some(header) = &dataset.header else {
        return if dataset.segments.is_empty() {
            Ok(String::new())
        } else {
            Err(DataError::NoHeader)
        };
    };
    let mut out = serde_json::to_string(header).expect("header serialises");
    out.push('\n');
    for s in &dataset.segments {
        let raw = RawSegment {
            id: s.id.clone(),
            label: s.label,
            text: to_raw(&s.text),
            audio: to_raw(&s.audio),
            video: to_raw(&s.video),
        };
        out.push_str(&serde_json::to_string(&raw).map_err(|e| DataError::Parse {
            line: 0,
            message: format!("segment {}: {e}", s.id),
        })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(dataset)?).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::segment;
    use super::super::ModalityDims;
    use super::*;

    fn dataset(ids: &[&str]) -> Dataset {
        Dataset {
            header: Some(DatasetHeader::new(
                ModalityDims {
                    text: 3,
                    audio: 2,
                    video: 2,
                },
                4,
            )),
            segments: ids.iter().enumerate().map(|(i, id)| segment(id, i + 1)).collect(),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert_eq!(load_dataset(&p).unwrap(), Dataset::default());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut d = dataset(&["a", "b", "c"]);
        d.segments[1].label = -2.718281828459045;
        d.segments[2].audio.features.values_mut()[0] = 0.1 + 0.2;
        save_dataset(&p, &d).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
    }

    #[test]
    fn loads_sorted_by_id() {
        let d = dataset(&["b", "a"]);
        let (loaded, diags) = parse_dataset(&to_jsonl(&d).unwrap()).unwrap();
        assert!(diags.is_empty());
        assert_eq!(loaded.ids(), vec!["a", "b"]);
    }

    #[test]
    fn alignment_violation_names_segment() {
        let mut d = dataset(&["good", "broken"]);
        d.segments[1].audio = segment("x", 1).audio;
        let (_, diags) = parse_dataset(&to_jsonl(&d).unwrap()).unwrap();
        assert_eq!(diags.len(), 1);
        assert!(matches!(&diags[0], Diagnostic::Alignment { id, .. } if id == "broken"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, to_jsonl(&d).unwrap()).unwrap();
        let err = load_dataset(&p).unwrap_err().to_string();
        assert!(err.contains("broken") && err.contains("A=1"), "{err}");
    }

    #[test]
    fn missing_header_gives_guidance() {
        let d = dataset(&["a"]);
        let text = to_jsonl(&d).unwrap();
        let body: String = text.lines().skip(1).collect::<Vec<_>>().join("\n");
        let err = parse_dataset(&body).unwrap_err();
        assert!(matches!(err, DataError::MissingHeader { line: 1 }));
        let msg = err.to_string();
        assert!(msg.contains("version") && msg.contains(FORMAT_NAME), "{msg}");
    }

    #[test]
    fn wrong_version_and_format() {
        let bad = r#"{"format":"modtrans-dataset","version":7,"dims":{"text":1,"audio":1,"video":1},"vocab_size":2}"#;
        assert!(matches!(parse_dataset(bad), Err(DataError::UnsupportedVersion { found: 7 })));
        let bad = r#"{"format":"other","version":1,"dims":{"text":1,"audio":1,"video":1},"vocab_size":2}"#;
        assert!(matches!(parse_dataset(bad), Err(DataError::UnsupportedFormat { .. })));
    }

    #[test]
    fn parse_error_has_line_number() {
        let d = dataset(&["a"]);
        let text = to_jsonl(&d).unwrap() + "{not json}\n";
        assert!(matches!(parse_dataset(&text), Err(DataError::Parse { line: 3, .. })));
    }

    #[test]
    fn duplicate_and_empty_sequences_reported() {
        let d = dataset(&["a"]);
        let mut text = to_jsonl(&d).unwrap();
        let seg_line = text.lines().nth(1).unwrap().to_string();
        text.push_str(&seg_line);
        text.push('\n');
        text.push_str(r#"{"id":"e","label":0.0,"text":{"tokens":[],"features":[]},"audio":{"features":[]},"video":{"features":[]}}"#);
        let (loaded, diags) = parse_dataset(&text).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(diags.len(), 4, "{diags:?}");
        assert!(matches!(diags[0], Diagnostic::DuplicateId { .. }));
    }
}
