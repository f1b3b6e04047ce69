//! On-disk run layout:
//!
//! ```text
//! <out>/config.json        RunConfig
//! <out>/summary.json       prompt, outcome, final max similarity
//! <out>/trace.jsonl        one TraceLine per iteration
//! <out>/iterNN/imgMM.png   generated images
//! ```

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{latent_png, BackendError};
use crate::model::{
    image_id, ImagePayload, ImageRef, IterationRecord, KeywordSet, Outcome, PolicyAction, Prompt,
    RunConfig, RunTrace, SimilarityScore,
};
use crate::scoring::{KeywordResult, SentenceResult, SimilarityReport};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("trace {} is missing or empty", .0.display())]
    MissingTrace(PathBuf),
    #[error("{}:{line}: schema mismatch: {detail}", path.display())]
    SchemaMismatch {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("image {id}: {source}")]
    Image { id: String, source: BackendError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub iteration: usize,
    #[serde(default)]
    pub seed: u64,
    pub rendered_prompt: String,
    pub keywords: KeywordSet,
    pub images: Vec<String>,
    pub keyword_scores: Vec<KeywordResult>,
    pub sentence_scores: Vec<SentenceResult>,
    pub overall: SimilarityScore,
    pub action: PolicyAction,
}

impl TraceLine {
    pub fn from_record(record: &IterationRecord) -> Self {
        Self {
            iteration: record.iteration,
            seed: record.seed,
            rendered_prompt: record.rendered_prompt.clone(),
            keywords: record.keywords.clone(),
            images: record
                .image_refs
                .iter()
                .map(|r| path_string(&r.relative_path()))
                .collect(),
            keyword_scores: record.report.keyword_results.clone(),
            sentence_scores: record.report.sentence_results.clone(),
            overall: record.report.overall,
            action: record.policy_action.clone(),
        }
    }

    /// Rebuilds the record; image payloads become paths relative to the run directory.
    pub fn into_record(self) -> IterationRecord {
        let image_refs = self
            .images
            .iter()
            .enumerate()
            .map(|(i, p)| ImageRef {
                id: image_id(self.iteration, i),
                iteration: self.iteration,
                index_in_batch: i,
                payload: ImagePayload::Path(PathBuf::from(p)),
            })
            .collect();
        IterationRecord {
            iteration: self.iteration,
            seed: self.seed,
            rendered_prompt: self.rendered_prompt,
            keywords: self.keywords,
            image_refs,
            report: SimilarityReport::new(self.keyword_scores, self.sentence_scores, self.overall),
            policy_action: self.action,
        }
    }
}

fn path_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub prompt: String,
    #[serde(default)]
    pub negative_prompt: String,
    pub outcome: Outcome,
    pub iterations: usize,
    pub final_max_similarity: SimilarityScore,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TraceError> {
    let mut text = serde_json::to_string_pretty(value).expect("trace types serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_image(out_dir: &Path, image: &ImageRef) -> Result<(), TraceError> {
    let target = out_dir.join(image.relative_path());
    let parent = target.parent().expect("image path has a parent");
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    match &image.payload {
        ImagePayload::Latent(latent) => {
            let bytes = latent_png::encode(latent).map_err(|source| TraceError::Image {
                id: image.id.clone(),
                source,
            })?;
            fs::write(&target, bytes).map_err(io_err(&target))
        }
        ImagePayload::Bytes(bytes) => fs::write(&target, bytes).map_err(io_err(&target)),
        ImagePayload::Path(src) => {
            let src = if src.is_relative() && !src.exists() {
                out_dir.join(src)
            } else {
                src.clone()
            };
            let same = match (fs::canonicalize(&src), fs::canonicalize(&target)) {
                (Ok(a), Ok(b)) => a == b,
                _ => false,
            };
            if same {
                Ok(())
            } else {
                fs::copy(&src, &target).map(|_| ()).map_err(io_err(&src))
            }
        }
    }
}

fn remove_stale_iterations(out_dir: &Path, keep: usize) -> Result<(), TraceError> {
    let Ok(entries) = fs::read_dir(out_dir) else {
        return Ok(());
    };
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let stale = name
            .strip_prefix("iter")
            .and_then(|n| n.parse::<usize>().ok())
            .is_some_and(|n| n >= keep);
        if stale && entry.path().is_dir() {
            fs::remove_dir_all(entry.path()).map_err(io_err(&entry.path()))?;
        }
    }
    Ok(())
}

/// Writes the trace, config, summary and images to `out_dir`, replacing a
/// previous run in the same place.
///
/// Returns the trace as it reads back from disk.
pub fn persist_trace(trace: &RunTrace, out_dir: &Path) -> Result<RunTrace, TraceError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    for record in &trace.records {
        for image in &record.image_refs {
            write_image(out_dir, image)?;
        }
    }
    remove_stale_iterations(out_dir, trace.records.len())?;

    write_json(&out_dir.join(CONFIG_FILE), &trace.config)?;
    write_json(
        &out_dir.join(SUMMARY_FILE),
        &RunSummary {
            prompt: trace.initial_prompt.text().to_string(),
            negative_prompt: trace.initial_prompt.negative_text().to_string(),
            outcome: trace.outcome,
            iterations: trace.records.len(),
            final_max_similarity: trace.final_max_similarity,
        },
    )?;

    let lines: Vec<TraceLine> = trace.records.iter().map(TraceLine::from_record).collect();
    let path = out_dir.join(TRACE_FILE);
    let mut file = io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
    for line in &lines {
        let json = serde_json::to_string(line).expect("trace line serializes");
        writeln!(file, "{json}").map_err(io_err(&path))?;
    }
    file.flush().map_err(io_err(&path))?;

    Ok(RunTrace {
        records: lines.into_iter().map(TraceLine::into_record).collect(),
        ..trace.clone()
    })
}

/// Reads `trace.jsonl`. `path` may be the file itself or its run directory.
pub fn read_trace_lines(path: &Path) -> Result<Vec<TraceLine>, TraceError> {
    let path = if path.is_dir() {
        path.join(TRACE_FILE)
    } else {
        path.to_path_buf()
    };
    let file = fs::File::open(&path).map_err(|_| TraceError::MissingTrace(path.clone()))?;
    let mut lines = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine =
            serde_json::from_str(&line).map_err(|e| TraceError::SchemaMismatch {
                path: path.clone(),
                line: n + 1,
                detail: e.to_string(),
            })?;
        lines.push(parsed);
    }
    if lines.is_empty() {
        return Err(TraceError::MissingTrace(path));
    }
    Ok(lines)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TraceError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| TraceError::SchemaMismatch {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })
}

/// Loads a full run written by [`persist_trace`].
pub fn load_trace(out_dir: &Path) -> Result<RunTrace, TraceError> {
    let config: RunConfig = read_json(&out_dir.join(CONFIG_FILE))?;
    let summary: RunSummary = read_json(&out_dir.join(SUMMARY_FILE))?;
    let records = read_trace_lines(&out_dir.join(TRACE_FILE))?
        .into_iter()
        .map(TraceLine::into_record)
        .collect();
    let schema = |detail: String| TraceError::SchemaMismatch {
        path: out_dir.join(SUMMARY_FILE),
        line: 0,
        detail,
    };
    let initial_prompt = Prompt::new(summary.prompt)
        .and_then(|p| p.with_negative(summary.negative_prompt))
        .map_err(|e| schema(e.to_string()))?;
    Ok(RunTrace {
        config,
        initial_prompt,
        records,
        outcome: summary.outcome,
        final_max_similarity: summary.final_max_similarity,
    })
}
