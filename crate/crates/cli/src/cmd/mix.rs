use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use layerfuse_core::{mix, Manifest, ManifestEntry, MixConfig, RatioBase};
use serde_json::json;

use crate::config::{required, MixArgs};
use crate::error::CliError;
use crate::report::{digest, emit, ensure_distinct, object, read_jsonl};
use crate::Ctx;

pub struct Job {
    task: PathBuf,
    pools: Vec<PathBuf>,
    cfg: MixConfig,
    out: PathBuf,
    report: Option<PathBuf>,
}

pub fn prepare(a: MixArgs) -> Result<Job, CliError> {
    let ratio = a
        .ratio
        .ok_or_else(|| CliError::Usage("missing required argument --ratio".into()))?;
    let cfg = MixConfig {
        ratio,
        seed: a.seed.unwrap_or(0),
        shuffle: a.shuffle,
        base: a.ratio_of.map(Into::into).unwrap_or(RatioBase::Pool),
    };
    cfg.validate().map_err(CliError::rejected)?;
    Ok(Job {
        task: required(a.task, "task")?,
        pools: a.pools,
        cfg,
        out: required(a.out, "out")?,
        report: a.report,
    })
}

fn load(path: &Path) -> Result<Manifest, CliError> {
    let entries = read_jsonl::<ManifestEntry>(path)?.into_iter().map(|(_, e)| e).collect();
    Manifest::new(entries).map_err(CliError::from)
}

pub fn execute(job: Job, ctx: Ctx) -> Result<(), CliError> {
    let mut inputs: Vec<&Path> = vec![&job.task];
    inputs.extend(job.pools.iter().map(PathBuf::as_path));
    ensure_distinct(&job.out, &inputs)?;

    let task = load(&job.task)?;
    let pools = job.pools.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let mixed = mix(&task, &pools, &job.cfg)?;

    let file = File::create(&job.out).map_err(|e| CliError::io(&job.out, e))?;
    let mut w = BufWriter::new(file);
    mixed
        .write_jsonl(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&job.out, e))?;

    let chosen: HashSet<&str> = mixed.ids().collect();
    let mut pool_reports = Vec::with_capacity(pools.len());
    for (path, pool) in job.pools.iter().zip(&pools) {
        let taken = pool.ids().filter(|id| chosen.contains(id)).count();
        pool_reports.push(json!({ "manifest": digest(path)?, "size": pool.len(), "sampled": taken }));
    }
    let report = json!({
        "command": "mix",
        "ratio": job.cfg.ratio,
        "ratio_of": job.cfg.base,
        "seed": job.cfg.seed,
        "shuffle": job.cfg.shuffle,
        "task": { "manifest": digest(&job.task)?, "size": task.len() },
        "pools": pool_reports,
        "output": { "manifest": digest(&job.out)?, "size": mixed.len() },
    });
    emit(object(report), job.report.as_deref(), ctx)
}
