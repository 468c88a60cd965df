use std::collections::BTreeMap;
use std::path::PathBuf;

use layerfuse_core::tensorstore::{perturb, transformer_fixture_spec, write_synthetic, FixtureSpec};
use layerfuse_core::{classify_tensors, read_checkpoint, write_checkpoint, DType, LayerPatterns};
use serde_json::json;

use crate::config::{required, GenFixtureArgs};
use crate::error::CliError;
use crate::report::{digest, emit, ensure_distinct, object};
use crate::Ctx;

const DEFAULT_BLOCKS: usize = 4;
const DEFAULT_HIDDEN: usize = 64;

enum Layout {
    SpecFile(PathBuf),
    Transformer {
        blocks: usize,
        hidden: usize,
        ffn: usize,
        dtype: DType,
    },
    Perturb {
        base: PathBuf,
        noise: f32,
        graded: bool,
    },
}

pub struct Job {
    layout: Layout,
    seed: u64,
    out: PathBuf,
    report: Option<PathBuf>,
}

pub fn prepare(a: GenFixtureArgs) -> Result<Job, CliError> {
    let out = required(a.out, "out")?;
    let shape_flags = a.blocks.is_some() || a.hidden.is_some() || a.ffn.is_some() || a.dtype.is_some();
    let layout = match (a.perturb, a.spec) {
        (Some(_), Some(_)) => return Err(CliError::invalid("--perturb and --spec are mutually exclusive")),
        (Some(base), None) => {
            if shape_flags {
                return Err(CliError::invalid("--perturb keeps the base layout; drop the shape flags"));
            }
            let noise = a
                .noise
                .ok_or_else(|| CliError::Usage("--perturb requires --noise".into()))?;
            if !(noise.is_finite() && noise >= 0.0) {
                return Err(CliError::invalid(format!("noise must be finite and nonnegative, got {noise}")));
            }
            Layout::Perturb {
                base,
                noise,
                graded: a.graded,
            }
        }
        (None, spec) => {
            if a.noise.is_some() || a.graded {
                return Err(CliError::invalid("--noise and --graded only apply with --perturb"));
            }
            match spec {
                Some(_) if shape_flags => {
                    return Err(CliError::invalid("--spec already fixes the layout; drop the shape flags"))
                }
                Some(path) => Layout::SpecFile(path),
                None => {
                    let blocks = a.blocks.unwrap_or(DEFAULT_BLOCKS);
                    let hidden = a.hidden.unwrap_or(DEFAULT_HIDDEN);
                    let ffn = a.ffn.unwrap_or(4 * hidden);
                    if blocks == 0 || hidden == 0 || ffn == 0 {
                        return Err(CliError::invalid("blocks, hidden and ffn must be positive"));
                    }
                    Layout::Transformer {
                        blocks,
                        hidden,
                        ffn,
                        dtype: a.dtype.map(Into::into).unwrap_or(DType::F32),
                    }
                }
            }
        }
    };
    Ok(Job {
        layout,
        seed: a.seed.unwrap_or(0),
        out,
        report: a.report,
    })
}

pub fn execute(job: Job, ctx: Ctx) -> Result<(), CliError> {
    let seed = job.seed;
    let source = match job.layout {
        Layout::SpecFile(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let spec: FixtureSpec =
                serde_json::from_str(&text).map_err(|e| CliError::input(&path, e.line(), e.to_string()))?;
            ensure_distinct(&job.out, &[&path])?;
            write_synthetic(&spec, seed, &job.out)?;
            json!({ "kind": "spec", "spec": digest(&path)? })
        }
        Layout::Transformer {
            blocks,
            hidden,
            ffn,
            dtype,
        } => {
            write_synthetic(&transformer_fixture_spec(blocks, hidden, ffn, dtype), seed, &job.out)?;
            json!({
                "kind": "transformer",
                "blocks": blocks,
                "hidden": hidden,
                "ffn": ffn,
                "dtype": dtype.as_str(),
            })
        }
        Layout::Perturb { base, noise, graded } => {
            ensure_distinct(&job.out, &[&base])?;
            let ckpt = read_checkpoint(&base)?;
            let cls = classify_tensors(&ckpt, &LayerPatterns::default())?;
            let n = cls.mergeable.len();
            let sigmas: BTreeMap<String, f32> = cls
                .mergeable
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    let sigma = if graded { noise * (i + 1) as f32 / n as f32 } else { noise };
                    (name.clone(), sigma)
                })
                .collect();
            let noisy = perturb(&ckpt, &sigmas, seed)?;
            drop(ckpt);
            write_checkpoint(&noisy, &job.out)?;
            json!({
                "kind": "perturb",
                "base": digest(&base)?,
                "noise": noise,
                "graded": graded,
                "perturbed_layers": n,
            })
        }
    };
    let report = json!({
        "command": "gen-fixture",
        "seed": seed,
        "source": source,
        "output": digest(&job.out)?,
    });
    emit(object(report), job.report.as_deref(), ctx)
}
