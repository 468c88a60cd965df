use std::collections::BTreeMap;
use std::path::PathBuf;

use layerfuse_core::responses::Grammar;
use layerfuse_core::{error_ratios, InvalidReason, Task, ValidityCounts};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{required, TaskArg, ValidateArgs};
use crate::error::CliError;
use crate::report::{digest, emit, object, read_jsonl};
use crate::Ctx;

#[derive(Debug, Deserialize)]
struct Line {
    task: Option<TaskArg>,
    response: String,
}

pub struct Job {
    input: PathBuf,
    default_task: Option<Task>,
    grammar: Grammar,
    report: Option<PathBuf>,
}

pub fn prepare(a: ValidateArgs) -> Result<Job, CliError> {
    let grammar = match a.recycle_cap {
        Some(0) => return Err(CliError::invalid("recycle cap must be at least 1")),
        Some(cap) => Grammar { recycle_cap: cap },
        None => Grammar::default(),
    };
    Ok(Job {
        input: required(a.input, "input")?,
        default_task: a.task.map(Into::into),
        grammar,
        report: a.report,
    })
}

#[derive(Default)]
struct Tally {
    total: u64,
    invalid: u64,
    reasons: BTreeMap<String, u64>,
}

impl Tally {
    fn new() -> Self {
        Self {
            reasons: InvalidReason::ALL.iter().map(|r| (r.to_string(), 0)).collect(),
            ..Self::default()
        }
    }

    fn to_json(&self, ratio: Option<f64>) -> Value {
        json!({
            "total": self.total,
            "valid": self.total - self.invalid,
            "invalid": self.invalid,
            "invalid_ratio": ratio.map_or(json!("undefined"), |r| json!(r)),
            "reasons": self.reasons,
        })
    }
}

pub fn execute(job: Job, ctx: Ctx) -> Result<(), CliError> {
    let lines = read_jsonl::<Line>(&job.input)?;
    let (mut hpe, mut bbox) = (Tally::new(), Tally::new());
    for (lineno, line) in &lines {
        let task = line
            .task
            .map(Task::from)
            .or(job.default_task)
            .ok_or_else(|| CliError::input(&job.input, *lineno, "no task on the line and no --task given"))?;
        let outcome = match task {
            Task::Angle => job.grammar.parse_angles_strict(&line.response),
            Task::BBox => job.grammar.parse_bboxes(&line.response),
        };
        let tally = if task == Task::Angle { &mut hpe } else { &mut bbox };
        tally.total += 1;
        if let Some(reason) = outcome.reason() {
            tally.invalid += 1;
            *tally.reasons.get_mut(&reason.to_string()).expect("all reasons present") += 1;
        }
    }
    let counts = ValidityCounts {
        e_angle: hpe.invalid,
        t_angle: hpe.total,
        e_bbox: bbox.invalid,
        t_bbox: bbox.total,
    };
    let (e_angle, e_bbox) = error_ratios(&counts);
    let total = hpe.total + bbox.total;
    let invalid = hpe.invalid + bbox.invalid;
    let report = json!({
        "command": "validate",
        "input": digest(&job.input)?,
        "recycle_cap": job.grammar.recycle_cap,
        "total": total,
        "invalid": invalid,
        "invalid_ratio": if total > 0 { json!(invalid as f64 / total as f64) } else { json!("undefined") },
        "hpe": hpe.to_json(e_angle),
        "bbox": bbox.to_json(e_bbox),
    });
    emit(object(report), job.report.as_deref(), ctx)
}
