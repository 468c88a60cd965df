use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use layerfuse_core::metrics::MetricsSummary;
use layerfuse_core::{
    parse_angles_loose, parse_angles_strict, parse_bboxes, AngleRecord, BBox, BBoxEvalRecord, EulerConvention,
    EulerTriple, InvalidReason, ParsedResponse, Task,
};
use serde::Deserialize;
use serde_json::json;

use crate::config::{required, EvalArgs, ParserArg};
use crate::error::CliError;
use crate::report::{digest, emit, object, read_jsonl, write_file};
use crate::Ctx;

#[derive(Debug, Deserialize)]
struct ResponseLine {
    id: String,
    response: String,
}

#[derive(Debug, Deserialize)]
struct TruthLine {
    id: String,
    yaw: Option<f64>,
    pitch: Option<f64>,
    roll: Option<f64>,
    bbox: Option<[i64; 4]>,
}

pub struct Job {
    task: Task,
    parser: ParserArg,
    convention: EulerConvention,
    responses: PathBuf,
    truth: PathBuf,
    report: Option<PathBuf>,
    csv: Option<PathBuf>,
}

pub fn prepare(a: EvalArgs) -> Result<Job, CliError> {
    let task: Task = a
        .task
        .ok_or_else(|| CliError::Usage("missing required argument --task".into()))?
        .into();
    let parser = a.parser.unwrap_or(ParserArg::Strict);
    if task == Task::BBox && parser == ParserArg::Loose {
        return Err(CliError::invalid("the loose parser only applies to the hpe task"));
    }
    if task == Task::BBox && a.convention.is_some() {
        return Err(CliError::invalid("--convention only applies to the hpe task"));
    }
    Ok(Job {
        task,
        parser,
        convention: a.convention.map(Into::into).unwrap_or_default(),
        responses: required(a.responses, "responses")?,
        truth: required(a.truth, "truth")?,
        report: a.report,
        csv: a.csv,
    })
}

/// Pairs every response with its ground truth; both sides must cover the
/// same ids exactly once.
fn join(
    responses: Vec<(usize, ResponseLine)>,
    truth: Vec<(usize, TruthLine)>,
    rpath: &Path,
    tpath: &Path,
) -> Result<Vec<(String, TruthLine)>, CliError> {
    let mut by_id: HashMap<String, (usize, TruthLine)> = HashMap::with_capacity(truth.len());
    for (line, t) in truth {
        if by_id.contains_key(&t.id) {
            return Err(CliError::input(tpath, line, format!("duplicate id '{}'", t.id)));
        }
        by_id.insert(t.id.clone(), (line, t));
    }
    let mut pairs = Vec::with_capacity(responses.len());
    for (line, r) in responses {
        let Some((_, t)) = by_id.remove(&r.id) else {
            return Err(CliError::input(rpath, line, format!("id '{}' has no ground truth (or is repeated)", r.id)));
        };
        pairs.push((r.response, t));
    }
    if let Some((line, t)) = by_id.values().min_by_key(|(line, _)| *line) {
        return Err(CliError::input(tpath, *line, format!("id '{}' has no response", t.id)));
    }
    Ok(pairs)
}

fn angle_truth(t: &TruthLine, path: &Path) -> Result<EulerTriple, CliError> {
    match (t.yaw, t.pitch, t.roll) {
        (Some(y), Some(p), Some(r)) if y.is_finite() && p.is_finite() && r.is_finite() => {
            Ok(EulerTriple::new(y, p, r))
        }
        _ => Err(CliError::input(path, 0, format!("id '{}': needs finite yaw, pitch and roll", t.id))),
    }
}

fn bbox_truth(t: &TruthLine, path: &Path) -> Result<BBox, CliError> {
    let [x0, y0, x1, y1] = t
        .bbox
        .ok_or_else(|| CliError::input(path, 0, format!("id '{}': needs a bbox", t.id)))?;
    let b = BBox::new(x0, y0, x1, y1);
    if x1 <= x0 || y1 <= y0 {
        return Err(CliError::input(path, 0, format!("id '{}': degenerate bbox {:?}", t.id, b.as_array())));
    }
    Ok(b)
}

pub fn execute(job: Job, ctx: Ctx) -> Result<(), CliError> {
    let responses = read_jsonl::<ResponseLine>(&job.responses)?;
    let truth = read_jsonl::<TruthLine>(&job.truth)?;
    let pairs = join(responses, truth, &job.responses, &job.truth)?;

    let mut breakdown: BTreeMap<String, usize> = InvalidReason::ALL.iter().map(|r| (r.to_string(), 0)).collect();
    let mut tally = |p: &ParsedResponse| {
        if let Some(reason) = p.reason() {
            *breakdown.get_mut(&reason.to_string()).expect("all reasons present") += 1;
        }
    };

    let summary = match job.task {
        Task::Angle => {
            let mut records = Vec::with_capacity(pairs.len());
            for (raw, t) in &pairs {
                let parsed = match job.parser {
                    ParserArg::Strict => parse_angles_strict(raw),
                    ParserArg::Loose => parse_angles_loose(raw),
                };
                tally(&parsed);
                records.push(AngleRecord {
                    pred: parsed.angles(),
                    gt: angle_truth(t, &job.truth)?,
                });
            }
            MetricsSummary::for_angles(&records, job.convention)?
        }
        Task::BBox => {
            let mut records = Vec::with_capacity(pairs.len());
            for (raw, t) in &pairs {
                let parsed = parse_bboxes(raw);
                tally(&parsed);
                records.push(BBoxEvalRecord {
                    pred: parsed.boxes().and_then(|b| b.first().copied()),
                    gt: bbox_truth(t, &job.truth)?,
                });
            }
            MetricsSummary::for_bboxes(&records)?
        }
    };

    let mut report = json!({
        "command": "eval",
        "task": match job.task { Task::Angle => "hpe", Task::BBox => "bbox" },
        "parser": match job.parser { ParserArg::Strict => "strict", ParserArg::Loose => "loose" },
        "inputs": { "responses": digest(&job.responses)?, "truth": digest(&job.truth)? },
        "summary": summary,
        "invalid_breakdown": breakdown,
    });
    if job.task == Task::Angle {
        report["convention"] = json!(job.convention);
    }
    if let Some(path) = &job.csv {
        write_file(path, summary.to_csv().as_bytes())?;
    }
    emit(object(report), job.report.as_deref(), ctx)
}
