use std::path::PathBuf;

use layerfuse_core::{classify_tensors, read_checkpoint, similarity_table, LayerPatterns, LayerSimilarity};
use serde_json::{json, Value};

use crate::config::{check_eps, pick_patterns, required, SimilarityArgs};
use crate::error::CliError;
use crate::report::{digest, emit, object, write_file};
use crate::Ctx;

pub struct Job {
    base: PathBuf,
    other: PathBuf,
    eps: f64,
    patterns: LayerPatterns,
    report: Option<PathBuf>,
    csv: Option<PathBuf>,
}

pub fn prepare(a: SimilarityArgs) -> Result<Job, CliError> {
    Ok(Job {
        base: required(a.base, "base")?,
        other: required(a.other, "other")?,
        eps: check_eps(a.eps)?,
        patterns: pick_patterns(a.patterns, a.layer_patterns)?,
        report: a.report,
        csv: a.csv,
    })
}

pub(crate) fn similarity_rows(table: &[LayerSimilarity]) -> Value {
    json!(table)
}

pub(crate) fn similarity_csv(table: &[LayerSimilarity]) -> String {
    let mut out = String::from("layer_name,kind,rows,score\n");
    for row in table {
        out.push_str(&format!("{},{},{},{}\n", row.layer_name, row.kind, row.rows, row.score));
    }
    out
}

pub fn execute(job: Job, ctx: Ctx) -> Result<(), CliError> {
    let base = read_checkpoint(&job.base)?;
    let other = read_checkpoint(&job.other)?;
    let cls = classify_tensors(&base, &job.patterns)?;
    let table = similarity_table(&base, &other, &cls, job.eps)?;
    drop((base, other));

    let scores = table.iter().map(|r| r.score);
    let summary = if table.is_empty() {
        json!({ "layers": 0, "mean": "undefined", "min": "undefined", "max": "undefined" })
    } else {
        json!({
            "layers": table.len(),
            "mean": scores.clone().sum::<f64>() / table.len() as f64,
            "min": scores.clone().fold(f64::INFINITY, f64::min),
            "max": scores.fold(f64::NEG_INFINITY, f64::max),
        })
    };
    let report = json!({
        "command": "similarity",
        "inputs": { "base": digest(&job.base)?, "other": digest(&job.other)? },
        "eps": job.eps,
        "patterns": job.patterns,
        "passthrough_tensors": cls.passthrough.len(),
        "summary": summary,
        "layers": similarity_rows(&table),
    });
    if let Some(path) = &job.csv {
        write_file(path, similarity_csv(&table).as_bytes())?;
    }
    emit(object(report), job.report.as_deref(), ctx)
}
