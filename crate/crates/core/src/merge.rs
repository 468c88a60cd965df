//! Checkpoint merging.
//!
//! Winner-takes-all: every mergeable layer is copied whole from exactly one
//! of the two inputs. The lowest-scoring `ceil(safeguard_frac * L)` layers
//! always come from the original model; of the rest, layers scoring below
//! the threshold come from the original and the others from the
//! HPE-oriented model.
//!
//! Task arithmetic (baseline): `base + λ (other - base)` per mergeable layer.
//!
//! Both produce a [`MergedLayout`], which can be materialized in memory or
//! streamed to disk one bounded chunk at a time.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{LayerClassification, LayerKind, LayerSimilarity};
use crate::tensorstore::{encode_f32, Checkpoint, CheckpointWriter, TensorHeader, TensorRecord};

pub const DEFAULT_THRESHOLD: f64 = 0.95;
pub const DEFAULT_SAFEGUARD: f64 = 0.01;
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    #[default]
    #[serde(alias = "WTA")]
    Wta,
    #[serde(rename = "ta", alias = "task_arithmetic")]
    TaskArithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub threshold: f64,
    pub safeguard_frac: f64,
    pub mode: MergeMode,
    pub lambda: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            safeguard_frac: DEFAULT_SAFEGUARD,
            mode: MergeMode::Wta,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl MergeConfig {
    pub fn wta(threshold: f64, safeguard_frac: f64) -> Self {
        Self {
            threshold,
            safeguard_frac,
            ..Self::default()
        }
    }

    pub fn task_arithmetic(lambda: f64) -> Self {
        Self {
            mode: MergeMode::TaskArithmetic,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1], got {}",
                self.threshold
            )));
        }
        if !(self.safeguard_frac >= 0.0 && self.safeguard_frac < 1.0) {
            return Err(Error::Config(format!(
                "safeguard fraction must lie in [0, 1), got {}",
                self.safeguard_frac
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Number of layers forced to the original model out of `layers`.
    pub fn safeguard_count(&self, layers: usize) -> usize {
        if layers == 0 || self.safeguard_frac <= 0.0 {
            return 0;
        }
        // Slack absorbs products like 0.07 * 100 = 7.000000000000001.
        let raw = (self.safeguard_frac * layers as f64 - 1e-9).ceil() as usize;
        raw.clamp(1, layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Original,
    HpeOriented,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Original => "Original",
            Source::HpeOriented => "HpeOriented",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reason {
    Safeguard,
    BelowThreshold,
    AtOrAboveThreshold,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reason::Safeguard => "Safeguard",
            Reason::BelowThreshold => "BelowThreshold",
            Reason::AtOrAboveThreshold => "AtOrAboveThreshold",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub layer_name: String,
    pub kind: LayerKind,
    pub score: f64,
    pub source: Source,
    pub reason: Reason,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MergePlan {
    pub decisions: Vec<Decision>,
}

impl MergePlan {
    pub fn count(&self, source: Source) -> usize {
        self.decisions.iter().filter(|d| d.source == source).count()
    }

    pub fn source_of(&self, name: &str) -> Option<Source> {
        self.decisions
            .iter()
            .find(|d| d.layer_name == name)
            .map(|d| d.source)
    }
}

/// Winner-takes-all layer selection.
pub fn select_layers(table: &[LayerSimilarity], cfg: &MergeConfig) -> Result<MergePlan> {
    cfg.validate()?;
    if cfg.mode != MergeMode::Wta {
        return Err(Error::Config("layer selection requires wta mode".into()));
    }
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let mut order: Vec<usize> = (0..table.len()).collect();
    // Stable sort: equal scores keep checkpoint order, so earlier layers win ties.
    order.sort_by(|&a, &b| table[a].score.total_cmp(&table[b].score));
    let guarded: HashSet<usize> = order
        .into_iter()
        .take(cfg.safeguard_count(table.len()))
        .collect();

    let decisions = table
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let (source, reason) = if guarded.contains(&i) {
                (Source::Original, Reason::Safeguard)
            } else if row.score < cfg.threshold {
                (Source::Original, Reason::BelowThreshold)
            } else {
                (Source::HpeOriented, Reason::AtOrAboveThreshold)
            };
            Decision {
                layer_name: row.layer_name.clone(),
                kind: row.kind,
                score: row.score,
                source,
                reason,
            }
        })
        .collect();
    Ok(MergePlan { decisions })
}

/// How one output tensor is produced.
#[derive(Debug, Clone)]
pub enum TensorSource {
    Copy(TensorRecord),
    /// `base + Σ λᵢ (otherᵢ - base)`, emitted in the base dtype.
    Interpolate {
        base: TensorRecord,
        others: Vec<(TensorRecord, f64)>,
    },
}

impl TensorSource {
    fn header(&self) -> TensorHeader {
        match self {
            TensorSource::Copy(t) | TensorSource::Interpolate { base: t, .. } => TensorHeader::of(t),
        }
    }
}

/// Output checkpoint described tensor by tensor, not yet materialized.
#[derive(Debug, Clone)]
pub struct MergedLayout {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorSource>,
}

const BLOCK: usize = 1 << 20;
const SUB_BLOCK: usize = 1 << 14;

fn interpolate_block(
    base: &TensorRecord,
    others: &[(TensorRecord, f64)],
    start: usize,
    out: &mut [f32],
) {
    out.par_chunks_mut(SUB_BLOCK)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let lo = start + ci * SUB_BLOCK;
            let range = lo..lo + chunk.len();
            let mut b = Vec::with_capacity(chunk.len());
            base.decode_range(range.clone(), &mut b);
            let mut acc: Vec<f64> = b.iter().map(|&x| x as f64).collect();
            let mut o = Vec::with_capacity(chunk.len());
            for (other, lambda) in others {
                other.decode_range(range.clone(), &mut o);
                for ((a, &x), &y) in acc.iter_mut().zip(&b).zip(&o) {
                    *a += lambda * (y as f64 - x as f64);
                }
            }
            for (slot, a) in chunk.iter_mut().zip(acc) {
                *slot = a as f32;
            }
        });
}

impl MergedLayout {
    pub fn into_checkpoint(self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        *ckpt.metadata_mut() = self.metadata;
        for src in self.tensors {
            let record = match src {
                TensorSource::Copy(t) => t,
                TensorSource::Interpolate { base, others } => {
                    let mut values = vec![0f32; base.numel()];
                    for (bi, block) in values.chunks_mut(BLOCK).enumerate() {
                        interpolate_block(&base, &others, bi * BLOCK, block);
                    }
                    TensorRecord::from_f32(base.name(), base.dtype(), base.shape().to_vec(), &values)?
                }
            };
            ckpt.insert(record)?;
        }
        Ok(ckpt)
    }

    /// Streams the output to `path`. Copied tensors go straight from their
    /// (usually memory-mapped) source; interpolated ones are computed one
    /// block at a time, so extra memory stays bounded by the block size.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let headers: Vec<TensorHeader> = self.tensors.iter().map(TensorSource::header).collect();
        let mut writer = CheckpointWriter::create(path, &self.metadata, &headers)?;
        let mut values = Vec::new();
        let mut bytes = Vec::new();
        for src in &self.tensors {
            match src {
                TensorSource::Copy(t) => writer.write_data(t.data())?,
                TensorSource::Interpolate { base, others } => {
                    let n = base.numel();
                    let mut start = 0;
                    while start < n {
                        let len = BLOCK.min(n - start);
                        values.resize(len, 0.0);
                        interpolate_block(base, others, start, &mut values);
                        bytes.clear();
                        encode_f32(base.dtype(), &values, &mut bytes);
                        writer.write_data(&bytes)?;
                        start += len;
                    }
                }
            }
        }
        writer.finish()
    }
}

fn counterpart<'a>(base: &TensorRecord, other: &'a Checkpoint) -> Result<&'a TensorRecord> {
    let o = other.require(base.name())?;
    if o.shape() != base.shape() {
        return Err(Error::ShapeMismatch {
            context: format!("layer '{}'", base.name()),
            left: base.shape().to_vec(),
            right: o.shape().to_vec(),
        });
    }
    if o.dtype() != base.dtype() {
        return Err(Error::DTypeMismatch {
            tensor: base.name().to_string(),
        });
    }
    Ok(o)
}

/// Layout for a winner-takes-all merge. Output order follows `base`.
pub fn wta_layout(
    base: &Checkpoint,
    hpe: &Checkpoint,
    plan: &MergePlan,
    cls: &LayerClassification,
) -> Result<MergedLayout> {
    let planned: Vec<&str> = plan.decisions.iter().map(|d| d.layer_name.as_str()).collect();
    if planned != cls.mergeable {
        let missing: Vec<&String> = cls
            .mergeable
            .iter()
            .filter(|n| !planned.contains(&n.as_str()))
            .collect();
        return Err(Error::PlanMismatch(format!(
            "plan has {} layers, classification {} (unplanned: {:?})",
            planned.len(),
            cls.mergeable.len(),
            missing
        )));
    }
    let sources: BTreeMap<&str, Source> = plan
        .decisions
        .iter()
        .map(|d| (d.layer_name.as_str(), d.source))
        .collect();
    let tensors = base
        .iter()
        .map(|t| match sources.get(t.name()) {
            Some(Source::HpeOriented) => Ok(TensorSource::Copy(counterpart(t, hpe)?.clone())),
            _ => Ok(TensorSource::Copy(t.clone())),
        })
        .collect::<Result<_>>()?;
    Ok(MergedLayout {
        metadata: base.metadata().clone(),
        tensors,
    })
}

pub fn merge_wta(
    base: &Checkpoint,
    hpe: &Checkpoint,
    plan: &MergePlan,
    cls: &LayerClassification,
) -> Result<Checkpoint> {
    wta_layout(base, hpe, plan, cls)?.into_checkpoint()
}

/// Layout for `base + Σ λᵢ (otherᵢ - base)` on mergeable layers.
pub fn task_arithmetic_layout(
    base: &Checkpoint,
    others: &[(&Checkpoint, f64)],
    cls: &LayerClassification,
) -> Result<MergedLayout> {
    for (_, lambda) in others {
        if !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite, got {lambda}")));
        }
    }
    let tensors = base
        .iter()
        .map(|t| {
            if !cls.is_mergeable(t.name()) {
                return Ok(TensorSource::Copy(t.clone()));
            }
            t.check_finite()?;
            let paired = others
                .iter()
                .map(|(ckpt, lambda)| {
                    let o = counterpart(t, ckpt)?;
                    o.check_finite()?;
                    Ok((o.clone(), *lambda))
                })
                .collect::<Result<_>>()?;
            Ok(TensorSource::Interpolate {
                base: t.clone(),
                others: paired,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MergedLayout {
        metadata: base.metadata().clone(),
        tensors,
    })
}

/// Two-model task arithmetic with `cfg.lambda`.
pub fn merge_task_arithmetic(
    base: &Checkpoint,
    hpe: &Checkpoint,
    cfg: &MergeConfig,
    cls: &LayerClassification,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.mode != MergeMode::TaskArithmetic {
        return Err(Error::Config("task arithmetic requires ta mode".into()));
    }
    task_arithmetic_layout(base, &[(hpe, cfg.lambda)], cls)?.into_checkpoint()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer_name: String,
    pub kind: LayerKind,
    pub score: f64,
    pub source: Source,
    pub reason: Reason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementReport {
    pub rows: Vec<ReportRow>,
    pub by_source: BTreeMap<Source, usize>,
    pub by_kind: BTreeMap<String, BTreeMap<Source, usize>>,
}

impl ReplacementReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_name,kind,score,source,reason\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer_name, r.kind, r.score, r.source, r.reason
            ));
        }
        out
    }
}

/// Per-layer rows plus counts per source, overall and per layer kind.
pub fn replacement_report(plan: &MergePlan) -> ReplacementReport {
    let zero = || BTreeMap::from([(Source::Original, 0), (Source::HpeOriented, 0)]);
    let mut by_source = zero();
    let mut by_kind: BTreeMap<String, BTreeMap<Source, usize>> = BTreeMap::new();
    let rows = plan
        .decisions
        .iter()
        .map(|d| {
            *by_source.entry(d.source).or_default() += 1;
            *by_kind
                .entry(d.kind.to_string())
                .or_insert_with(zero)
                .entry(d.source)
                .or_default() += 1;
            ReportRow {
                layer_name: d.layer_name.clone(),
                kind: d.kind,
                score: d.score,
                source: d.source,
                reason: d.reason,
            }
        })
        .collect();
    ReplacementReport {
        rows,
        by_source,
        by_kind,
    }
}
