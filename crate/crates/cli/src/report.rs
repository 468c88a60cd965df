use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::Ctx;

/// `{"path", "bytes", "sha256"}` for a file on disk.
pub fn digest(path: &Path) -> Result<Value, CliError> {
    let mut file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(json!({
        "path": path.display().to_string(),
        "bytes": bytes,
        "sha256": hex::encode(hasher.finalize()),
    }))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON to `dest`, or to stdout when `dest` is `None`.
pub fn emit(mut report: Map<String, Value>, dest: Option<&Path>, ctx: Ctx) -> Result<(), CliError> {
    if ctx.stamp {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        report.insert("generated_at_unix".into(), json!(secs));
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(report)).expect("report is valid JSON");
    text.push('\n');
    match dest {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

/// Non-blank lines of a JSONL file, each parsed as `T`, with 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| CliError::input(path, i + 1, e.to_string()))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Refuses to write over one of the inputs (they may be memory-mapped).
pub fn ensure_distinct(out: &Path, inputs: &[&Path]) -> Result<(), CliError> {
    let Ok(out_real) = out.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        if input.canonicalize().map(|p| p == out_real).unwrap_or(false) {
            return Err(CliError::invalid(format!(
                "output {} would overwrite input {}",
                out.display(),
                input.display()
            )));
        }
    }
    Ok(())
}

pub fn object(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(map) => map,
        _ => unreachable!("reports are built from json! objects"),
    }
}
