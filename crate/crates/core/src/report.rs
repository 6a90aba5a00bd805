//! Human-readable tables and machine-readable records of runs and grids.

use serde::{Deserialize, Serialize};

use crate::metrics::{ClassificationBlock, EvaluationReport};
use crate::pipeline::{PipelineKind, PipelineResult};

/// Headline columns of every result table.
pub const REPORT_COLUMNS: [&str; 7] = [
    "MAE",
    "Binary Prec",
    "Binary Recall",
    "Binary F1",
    "7-class Prec",
    "7-class Recall",
    "7-class F1",
];

/// Machine-readable record of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub result: PipelineResult,
}

/// MAE followed by the support-weighted binary and 7-class precision, recall and F1.
pub fn headline(e: &EvaluationReport) -> [f64; 7] {
    let (b, s) = (&e.binary.scores.weighted, &e.seven_class.scores.weighted);
    [e.mae, b.precision, b.recall, b.f1, s.precision, s.recall, s.f1]
}

/// Left-aligned first column, right-aligned others.
fn table(headers: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([headers[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    let mut out = line(headers);
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

fn owned(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Confusion counts (rows predicted, columns actual) with per-class scores.
pub fn render_block(title: &str, block: &ClassificationBlock) -> String {
    let classes = &block.confusion.classes;
    let mut headers = vec!["pred \\ actual".to_string()];
    headers.extend(classes.iter().map(|c| c.to_string()));
    let rows: Vec<Vec<String>> = classes
        .iter()
        .zip(&block.confusion.counts)
        .map(|(c, counts)| std::iter::once(c.to_string()).chain(counts.iter().map(|n| n.to_string())).collect())
        .collect();
    let mut out = format!("{title} confusion\n{}", table(&headers, &rows));
    let s = &block.scores;
    let mut rows: Vec<Vec<String>> = s
        .per_class
        .iter()
        .map(|c| vec![c.class.to_string(), num(c.precision), num(c.recall), num(c.f1), c.support.to_string()])
        .collect();
    for (name, a) in [("weighted", &s.weighted), ("unweighted", &s.unweighted)] {
        rows.push(vec![name.into(), num(a.precision), num(a.recall), num(a.f1), String::new()]);
    }
    out.push_str(&format!(
        "\n{title} scores\n{}",
        table(&owned(&["class", "Prec", "Recall", "F1", "support"]), &rows)
    ));
    out
}

pub fn render_run(report: &RunReport) -> String {
    let r = &report.result;
    let mut out = format!(
        "spec {} ({}): {}\nsplit train/validation/test = {}/{}/{}\nconfig hash {}\n\n",
        r.spec.id,
        r.spec.kind.name(),
        r.spec.label(),
        r.split_sizes[0],
        r.split_sizes[1],
        r.split_sizes[2],
        report.config_hash
    );
    if !r.translation_stages.is_empty() {
        let rows: Vec<Vec<String>> = r
            .translation_stages
            .iter()
            .enumerate()
            .map(|(k, s)| {
                vec![
                    k.to_string(),
                    format!("{} -> {}", s.source, s.target),
                    s.curve.len().to_string(),
                    s.curve.last().map_or("-".into(), |e| num(e.train)),
                    s.test_loss.map_or("-".into(), num),
                    s.test_token_accuracy.map_or("-".into(), num),
                ]
            })
            .collect();
        out.push_str(&table(
            &owned(&["stage", "translation", "epochs", "train loss", "test loss", "token acc"]),
            &rows,
        ));
        out.push('\n');
    }
    let mut headers = vec!["spec".to_string()];
    headers.extend(REPORT_COLUMNS.iter().map(|s| s.to_string()));
    let mut row = vec![r.spec.label()];
    row.extend(headline(&r.evaluation).iter().map(|&x| num(x)));
    out.push_str(&table(&headers, &[row]));
    out.push('\n');
    out.push_str(&render_block("binary", &r.evaluation.binary));
    out.push('\n');
    out.push_str(&render_block("7-class", &r.evaluation.seven_class));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RowStatus {
    Ok { metrics: [f64; 7] },
    Failed { message: String },
}

impl RowStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RowStatus::Ok { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub id: String,
    pub label: String,
    pub kind: PipelineKind,
    pub translation_stages: usize,
    #[serde(flatten)]
    pub status: RowStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub config_hash: String,
    pub rows: Vec<GridRow>,
}

pub fn render_grid(summary: &GridSummary) -> String {
    let mut headers = owned(&["id", "spec", "stages"]);
    headers.extend(REPORT_COLUMNS.iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.id.clone(), r.label.clone(), r.translation_stages.to_string()];
            match &r.status {
                RowStatus::Ok { metrics } => row.extend(metrics.iter().map(|&x| num(x))),
                RowStatus::Failed { message } => {
                    row.push(format!("FAILED: {message}"));
                    row.extend(std::iter::repeat(String::new()).take(REPORT_COLUMNS.len() - 1));
                }
            }
            row
        })
        .collect();
    let failed = summary.rows.iter().filter(|r| matches!(r.status, RowStatus::Failed { .. })).count();
    format!(
        "{}\n{} specs, {} failed, config hash {}\n",
        table(&headers, &rows),
        summary.rows.len(),
        failed,
        summary.config_hash
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate;

    #[test]
    fn headline_uses_weighted_scores() {
        let e = evaluate(&[1.0, -1.0, 2.0, 0.4], &[1.0, 1.0, -2.0, 0.0]).unwrap();
        let h = headline(&e);
        assert_eq!(h[0], e.mae);
        assert_eq!(h[3], e.binary.scores.weighted.f1);
        assert_eq!(h[6], e.seven_class.scores.weighted.f1);
    }

    #[test]
    fn block_lists_every_class() {
        let e = evaluate(&[1.0, -1.0, 2.0], &[1.0, 1.0, -2.0]).unwrap();
        let text = render_block("7-class", &e.seven_class);
        for c in -3..=3 {
            assert!(text.contains(&format!(" {c} ")), "{text}");
        }
        assert!(text.contains("weighted") && text.contains("unweighted"));
    }

    #[test]
    fn grid_marks_failures() {
        let summary = GridSummary {
            config_hash: "h".into(),
            rows: vec![
                GridRow {
                    id: "a".into(),
                    label: "T".into(),
                    kind: PipelineKind::UnimodalBaseline,
                    translation_stages: 0,
                    status: RowStatus::Ok { metrics: [0.5; 7] },
                },
                GridRow {
                    id: "b".into(),
                    label: "T -> V".into(),
                    kind: PipelineKind::BimodalTranslate,
                    translation_stages: 1,
                    status: RowStatus::Failed {
                        message: "boom".into(),
                    },
                },
            ],
        };
        let text = render_grid(&summary);
        assert!(text.contains("FAILED: boom") && text.contains("2 specs, 1 failed"));
        let json = serde_json::to_string(&summary).unwrap();
        assert_eq!(serde_json::from_str::<GridSummary>(&json).unwrap(), summary);
    }
}
