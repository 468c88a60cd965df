//! Manifest-level rehearsal mixing.
//!
//! Each pool is permuted once by a seeded PRNG (stream = pool index) and the
//! first `floor(r * n)` entries are taken. Raising `r` with the same seed
//! therefore only ever adds ids.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stream id for the optional output shuffle; pools use streams 0..n.
const SHUFFLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
}

impl ManifestEntry {
    pub fn new(id: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
        }
    }
}

/// Ordered entries with unique ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self { entries })
    }

    /// `n` entries `{prefix}{i:06}` tagged with `source`.
    pub fn synthetic(prefix: &str, source: &str, n: usize) -> Self {
        Self {
            entries: (0..n)
                .map(|i| ManifestEntry::new(format!("{prefix}{i:06}"), source))
                .collect(),
        }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// One JSON object per line; blank lines are skipped.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Config(format!("manifest read failed: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("manifest line {}: {e}", lineno + 1)))?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut writer, e)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

/// What the ratio is a fraction of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioBase {
    /// `floor(r * |pool|)` from each pool.
    #[default]
    Pool,
    /// `floor(r * |task|)` from each pool, capped at the pool size.
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub shuffle: bool,
    #[serde(default)]
    pub base: RatioBase,
}

impl MixConfig {
    pub fn new(ratio: f64, seed: u64) -> Self {
        Self {
            ratio,
            seed,
            shuffle: false,
            base: RatioBase::Pool,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "ratio must lie in [0, 1], got {}",
                self.ratio
            )));
        }
        Ok(())
    }

    /// `floor(ratio * n)`, with a tiny slack so that e.g. 0.29 * 100 gives 29.
    pub fn sample_count(&self, n: usize) -> usize {
        ((self.ratio * n as f64) + 1e-9).floor() as usize
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Task entries followed by each pool's sample, in pool order.
pub fn mix(task: &Manifest, pools: &[Manifest], cfg: &MixConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut seen: HashSet<&str> = HashSet::new();
    for id in task.ids().chain(pools.iter().flat_map(|p| p.ids())) {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }

    let mut out = task.entries.clone();
    for (index, pool) in pools.iter().enumerate() {
        let want = match cfg.base {
            RatioBase::Pool => cfg.sample_count(pool.len()),
            RatioBase::Task => cfg.sample_count(task.len()).min(pool.len()),
        };
        if want == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng(cfg.seed, index as u64));
        out.extend(order[..want].iter().map(|&i| pool.entries[i].clone()));
    }
    if cfg.shuffle {
        out.shuffle(&mut rng(cfg.seed, SHUFFLE_STREAM));
    }
    Ok(Manifest { entries: out })
}
