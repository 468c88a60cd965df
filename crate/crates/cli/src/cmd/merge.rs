use std::path::{Path, PathBuf};

use layerfuse_core::merge::{task_arithmetic_layout, wta_layout};
use layerfuse_core::{
    accumulate_checkpoint, adapters_from_checkpoint, classify_tensors, read_checkpoint, replacement_report,
    select_layers, similarity_table, Checkpoint, LayerPatterns, MergeConfig, MergeMode,
};
use serde_json::{json, Value};

use super::similarity::{similarity_csv, similarity_rows};
use crate::config::{check_eps, pick_patterns, required, MergeArgs};
use crate::error::CliError;
use crate::report::{digest, emit, ensure_distinct, object, write_file};
use crate::Ctx;

pub struct Job {
    base: PathBuf,
    other: PathBuf,
    out: PathBuf,
    cfg: MergeConfig,
    eps: f64,
    patterns: LayerPatterns,
    base_adapters: Option<PathBuf>,
    other_adapters: Option<PathBuf>,
    lora_scale: f64,
    report: Option<PathBuf>,
    csv: Option<PathBuf>,
}

pub fn prepare(a: MergeArgs) -> Result<Job, CliError> {
    let base = required(a.base, "base")?;
    let other = required(a.other, "other")?;
    let out = required(a.out, "out")?;
    let defaults = MergeConfig::default();
    let cfg = MergeConfig {
        threshold: a.threshold.unwrap_or(defaults.threshold),
        safeguard_frac: a.safeguard.unwrap_or(defaults.safeguard_frac),
        mode: a.mode.map(Into::into).unwrap_or(defaults.mode),
        lambda: a.lambda.unwrap_or(defaults.lambda),
    };
    cfg.validate().map_err(CliError::rejected)?;
    let lora_scale = a.lora_scale.unwrap_or(1.0);
    if !(lora_scale.is_finite() && lora_scale >= 0.0) {
        return Err(CliError::invalid(format!(
            "lora scale must be finite and nonnegative, got {lora_scale}"
        )));
    }
    Ok(Job {
        base,
        other,
        out,
        cfg,
        eps: check_eps(a.eps)?,
        patterns: pick_patterns(a.patterns, a.layer_patterns)?,
        base_adapters: a.base_adapters,
        other_adapters: a.other_adapters,
        lora_scale,
        report: a.report,
        csv: a.csv,
    })
}

fn load(path: &Path, adapters: Option<&Path>, scale: f64) -> Result<Checkpoint, CliError> {
    let ckpt = read_checkpoint(path)?;
    match adapters {
        None => Ok(ckpt),
        Some(a) => {
            let ads = adapters_from_checkpoint(&read_checkpoint(a)?, scale)?;
            Ok(accumulate_checkpoint(&ckpt, &ads)?)
        }
    }
}

fn optional_digest(path: Option<&Path>) -> Result<Value, CliError> {
    path.map_or(Ok(Value::Null), digest)
}

pub fn execute(job: Job, ctx: Ctx) -> Result<(), CliError> {
    let mut inputs: Vec<&Path> = vec![&job.base, &job.other];
    inputs.extend(job.base_adapters.as_deref());
    inputs.extend(job.other_adapters.as_deref());
    ensure_distinct(&job.out, &inputs)?;

    let base = load(&job.base, job.base_adapters.as_deref(), job.lora_scale)?;
    let other = load(&job.other, job.other_adapters.as_deref(), job.lora_scale)?;
    let cls = classify_tensors(&base, &job.patterns)?;
    let table = similarity_table(&base, &other, &cls, job.eps)?;

    let (mode, details, csv) = match job.cfg.mode {
        MergeMode::Wta => {
            let plan = select_layers(&table, &job.cfg)?;
            wta_layout(&base, &other, &plan, &cls)?.write_to(&job.out)?;
            let rep = replacement_report(&plan);
            let details = json!({
                "threshold": job.cfg.threshold,
                "safeguard": job.cfg.safeguard_frac,
                "safeguarded_layers": job.cfg.safeguard_count(table.len()),
                "by_source": rep.by_source,
                "by_kind": rep.by_kind,
                "decisions": rep.rows,
            });
            ("wta", details, rep.to_csv())
        }
        MergeMode::TaskArithmetic => {
            task_arithmetic_layout(&base, &[(&other, job.cfg.lambda)], &cls)?.write_to(&job.out)?;
            let details = json!({
                "lambda": job.cfg.lambda,
                "similarity": similarity_rows(&table),
            });
            ("ta", details, similarity_csv(&table))
        }
    };
    drop((base, other));

    let report = json!({
        "command": "merge",
        "mode": mode,
        "inputs": {
            "base": digest(&job.base)?,
            "other": digest(&job.other)?,
            "base_adapters": optional_digest(job.base_adapters.as_deref())?,
            "other_adapters": optional_digest(job.other_adapters.as_deref())?,
        },
        "lora_scale": job.lora_scale,
        "eps": job.eps,
        "patterns": job.patterns,
        "mergeable_layers": cls.mergeable.len(),
        "passthrough_tensors": cls.passthrough.len(),
        "merge": details,
        "output": digest(&job.out)?,
    });
    if let Some(path) = &job.csv {
        write_file(path, csv.as_bytes())?;
    }
    emit(object(report), job.report.as_deref(), ctx)
}
