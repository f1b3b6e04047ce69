//! Keyword and sentence similarity tables, one column per labeled run.
//!
//! Failing keyword cells carry a `*` marker (red in terminal output). In the
//! sentence table the best score of each row is bolded.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::fold;
use crate::scoring::{KeywordResult, SentenceResult, SimilarityReport};
use crate::trace::TraceLine;

pub const OVERALL_LABEL: &str = "Overall";
const RED: &str = "\x1b[31m";
const BOLD: &str = "\x1b[1m";
const RESET: &str = "\x1b[0m";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv row {row}: {detail}")]
    BadRow { row: usize, detail: String },
}

/// The scores of one run that go into a report column.
#[derive(Debug, Clone, PartialEq)]
pub struct RunColumn {
    pub label: String,
    pub keyword_results: Vec<KeywordResult>,
    pub sentence_results: Vec<SentenceResult>,
    pub overall: Option<f64>,
}

impl RunColumn {
    /// Uses the final iteration of a trace.
    pub fn from_trace(label: impl Into<String>, lines: &[TraceLine]) -> Option<Self> {
        let last = lines.last()?;
        Some(Self {
            label: label.into(),
            keyword_results: last.keyword_scores.clone(),
            sentence_results: last.sentence_scores.clone(),
            overall: Some(last.overall.value()),
        })
    }

    pub fn from_report(label: impl Into<String>, report: &SimilarityReport) -> Self {
        Self {
            label: label.into(),
            keyword_results: report.keyword_results.clone(),
            sentence_results: report.sentence_results.clone(),
            overall: Some(report.overall.value()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeywordCell {
    pub aggregated: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeywordRow {
    pub keyword: String,
    pub cells: Vec<Option<KeywordCell>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceRow {
    pub label: String,
    pub cells: Vec<Option<f64>>,
}

impl SentenceRow {
    /// Column holding the strictly best value, if there is one and at least
    /// two runs have a value.
    pub fn best(&self) -> Option<usize> {
        let present: Vec<(usize, f64)> = self
            .cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|v| (i, round4(v))))
            .collect();
        if present.len() < 2 {
            return None;
        }
        let max = present.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = present.iter().filter(|(_, v)| *v == max).map(|(i, _)| *i).collect();
        (winners.len() == 1).then(|| winners[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTables {
    pub labels: Vec<String>,
    pub keyword_rows: Vec<KeywordRow>,
    pub sentence_rows: Vec<SentenceRow>,
}

/// Value as printed in every report format.
pub fn round4(v: f64) -> f64 {
    format!("{v:.4}").parse().expect("formatted float parses")
}

pub fn build_report(columns: &[RunColumn]) -> ReportTables {
    let labels = columns.iter().map(|c| c.label.clone()).collect();

    let mut keyword_rows: Vec<KeywordRow> = Vec::new();
    for (col, run) in columns.iter().enumerate() {
        for kr in &run.keyword_results {
            let idx = match keyword_rows.iter().position(|r| fold(&r.keyword) == fold(&kr.phrase)) {
                Some(i) => i,
                None => {
                    keyword_rows.push(KeywordRow {
                        keyword: kr.phrase.clone(),
                        cells: vec![None; columns.len()],
                    });
                    keyword_rows.len() - 1
                }
            };
            keyword_rows[idx].cells[col] = Some(KeywordCell {
                aggregated: kr.aggregated.value(),
                passed: kr.passed,
            });
        }
    }

    let n_sentences = columns.iter().map(|c| c.sentence_results.len()).max().unwrap_or(0);
    let mut sentence_rows: Vec<SentenceRow> = (0..n_sentences)
        .map(|i| SentenceRow {
            label: format!("Sentence {}", i + 1),
            cells: columns
                .iter()
                .map(|c| c.sentence_results.get(i).map(|s| s.aggregated.value()))
                .collect(),
        })
        .collect();
    if columns.iter().any(|c| c.overall.is_some()) {
        sentence_rows.push(SentenceRow {
            label: OVERALL_LABEL.to_string(),
            cells: columns.iter().map(|c| c.overall).collect(),
        });
    }

    ReportTables {
        labels,
        keyword_rows,
        sentence_rows,
    }
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

pub fn render_markdown(t: &ReportTables) -> String {
    let mut out = String::new();
    let header = |first: &str| {
        let mut h = format!("| {first} |");
        for l in &t.labels {
            let _ = write!(h, " {} |", md_escape(l));
        }
        h.push('\n');
        h.push_str("|---|");
        h.push_str(&"---:|".repeat(t.labels.len()));
        h.push('\n');
        h
    };

    out.push_str("## Keywords\n\n");
    out.push_str(&header("Keyword"));
    for row in &t.keyword_rows {
        let _ = write!(out, "| {} |", md_escape(&row.keyword));
        for cell in &row.cells {
            match cell {
                Some(c) => {
                    let mark = if c.passed { "" } else { "*" };
                    let _ = write!(out, " {:.4}{mark} |", c.aggregated);
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out.push_str("\n`*` marks keywords that did not pass the threshold.\n");

    if !t.sentence_rows.is_empty() {
        out.push_str("\n## Sentences\n\n");
        out.push_str(&header("Sentence"));
        for row in &t.sentence_rows {
            let best = row.best();
            let _ = write!(out, "| {} |", row.label);
            for (i, cell) in row.cells.iter().enumerate() {
                match cell {
                    Some(v) if best == Some(i) => {
                        let _ = write!(out, " **{v:.4}** |");
                    }
                    Some(v) => {
                        let _ = write!(out, " {v:.4} |");
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn render_terminal(t: &ReportTables, color: bool) -> String {
    let paint = |s: String, code: &str| if color { format!("{code}{s}{RESET}") } else { s };
    let width = t
        .keyword_rows
        .iter()
        .map(|r| r.keyword.chars().count())
        .chain(t.sentence_rows.iter().map(|r| r.label.len()))
        .chain(std::iter::once(8))
        .max()
        .unwrap_or(8);
    let col = t.labels.iter().map(|l| l.chars().count()).max().unwrap_or(0).max(8);

    let mut out = String::new();
    let mut header = format!("{:width$}", "Keyword");
    for l in &t.labels {
        let _ = write!(header, "  {l:>col$}");
    }
    out.push_str(header.trim_end());
    out.push('\n');
    for row in &t.keyword_rows {
        let _ = write!(out, "{:width$}", row.keyword);
        for cell in &row.cells {
            let text = match cell {
                Some(c) if !c.passed => paint(format!("{:>col$}*", format!("{:.4}", c.aggregated)), RED),
                Some(c) => format!("{:>col$} ", format!("{:.4}", c.aggregated)),
                None => format!("{:>col$} ", "-"),
            };
            let _ = write!(out, "  {text}");
        }
        out.truncate(out.trim_end_matches(' ').len());
        out.push('\n');
    }
    if !t.sentence_rows.is_empty() {
        out.push('\n');
        for row in &t.sentence_rows {
            let best = row.best();
            let _ = write!(out, "{:width$}", row.label);
            for (i, cell) in row.cells.iter().enumerate() {
                let text = match cell {
                    Some(v) if best == Some(i) => paint(format!("{:>col$}", format!("{v:.4}")), BOLD),
                    Some(v) => format!("{:>col$}", format!("{v:.4}")),
                    None => format!("{:>col$}", "-"),
                };
                let text = format!("{text} ");
                let _ = write!(out, "  {text}");
            }
            out.truncate(out.trim_end_matches(' ').len());
            out.push('\n');
        }
    }
    out
}

/// One CSV line. `passed` is empty for sentence and overall rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub keyword: String,
    pub run_label: String,
    pub aggregated: f64,
    pub passed: Option<bool>,
}

/// The rows written by [`render_csv`], with values rounded as printed.
pub fn csv_rows(t: &ReportTables) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for row in &t.keyword_rows {
        for (label, cell) in t.labels.iter().zip(&row.cells) {
            if let Some(c) = cell {
                rows.push(CsvRow {
                    keyword: row.keyword.clone(),
                    run_label: label.clone(),
                    aggregated: round4(c.aggregated),
                    passed: Some(c.passed),
                });
            }
        }
    }
    for row in &t.sentence_rows {
        for (label, cell) in t.labels.iter().zip(&row.cells) {
            if let Some(v) = cell {
                rows.push(CsvRow {
                    keyword: row.label.clone(),
                    run_label: label.clone(),
                    aggregated: round4(*v),
                    passed: None,
                });
            }
        }
    }
    rows
}

pub fn render_csv(t: &ReportTables) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["keyword", "run_label", "aggregated", "passed"])
        .expect("in-memory csv write");
    for row in csv_rows(t) {
        let passed = row.passed.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([
            row.keyword.as_str(),
            row.run_label.as_str(),
            &format!("{:.4}", row.aggregated),
            &passed,
        ])
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, ReportError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["keyword", "run_label", "aggregated", "passed"] {
        return Err(ReportError::BadRow {
            row: 0,
            detail: format!("unexpected header {headers:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |detail: String| ReportError::BadRow { row: i + 1, detail };
        let aggregated: f64 = rec[2].parse().map_err(|e| bad(format!("aggregated: {e}")))?;
        let passed = match &rec[3] {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            other => return Err(bad(format!("passed: {other:?}"))),
        };
        rows.push(CsvRow {
            keyword: rec[0].to_string(),
            run_label: rec[1].to_string(),
            aggregated,
            passed,
        });
    }
    Ok(rows)
}
