//! Per-layer similarity scores: cosine similarity of corresponding rows
//! (along the last dimension), averaged over rows.

use std::collections::HashMap;
use std::fmt;

use globset::{Glob, GlobSet, GlobSetBuilder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::Matrix;
use crate::tensorstore::{Checkpoint, TensorRecord};

pub const DEFAULT_EPS: f64 = 1e-8;

/// Anything that can hand out rows of a d×k matrix as f32.
pub trait Rows: Sync {
    fn dims(&self) -> (usize, usize);
    fn row_into(&self, i: usize, out: &mut Vec<f32>);
}

impl Rows for Matrix {
    fn dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    fn row_into(&self, i: usize, out: &mut Vec<f32>) {
        out.clear();
        out.extend_from_slice(self.row(i));
    }
}

impl Rows for TensorRecord {
    fn dims(&self) -> (usize, usize) {
        match self.shape() {
            [d, k] => (*d, *k),
            // Rank-1 tensors are treated as a single row.
            [k] => (1, *k),
            s => (s[0], s[1..].iter().product()),
        }
    }

    fn row_into(&self, i: usize, out: &mut Vec<f32>) {
        let k = self.dims().1;
        self.decode_range(i * k..(i + 1) * k, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    AttentionQkv,
    MlpDense,
    Other,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::AttentionQkv => "attention_qkv",
            LayerKind::MlpDense => "mlp_dense",
            LayerKind::Other => "other",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub layer_name: String,
    pub kind: LayerKind,
    pub rows: usize,
    pub score: f64,
}

fn cosine_row(x: &[f32], y: &[f32], eps: f64) -> Option<f64> {
    let (mut dot, mut xx, mut yy) = (0f64, 0f64, 0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    if !(xx.is_finite() && yy.is_finite()) {
        return None;
    }
    let (nx, ny) = (xx.sqrt(), yy.sqrt());
    let cos = match (nx < eps, ny < eps) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (nx.max(eps) * ny.max(eps)),
    };
    Some(cos.clamp(-1.0, 1.0))
}

fn check_pair(w1: &impl Rows, w2: &impl Rows, eps: f64, context: &str) -> Result<(usize, usize)> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let (d1, k1) = w1.dims();
    let (d2, k2) = w2.dims();
    if (d1, k1) != (d2, k2) {
        return Err(Error::ShapeMismatch {
            context: context.to_string(),
            left: vec![d1, k1],
            right: vec![d2, k2],
        });
    }
    Ok((d1, k1))
}

fn fold_rows(
    w1: &impl Rows,
    w2: &impl Rows,
    eps: f64,
    context: &str,
    mut each: impl FnMut(f64),
) -> Result<usize> {
    let (d, k) = check_pair(w1, w2, eps, context)?;
    let mut x = Vec::with_capacity(k);
    let mut y = Vec::with_capacity(k);
    for i in 0..d {
        w1.row_into(i, &mut x);
        w2.row_into(i, &mut y);
        let c = cosine_row(&x, &y, eps).ok_or_else(|| Error::NonFinite {
            tensor: if context.is_empty() { "matrix".into() } else { context.to_string() },
        })?;
        each(c);
    }
    Ok(d)
}

/// Cosine similarity of each row pair. A row pair where both norms are below
/// `eps` scores 1; where only one is, 0.
pub fn rowwise_cosine(w1: &impl Rows, w2: &impl Rows, eps: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(w1.dims().0);
    fold_rows(w1, w2, eps, "", |c| out.push(c))?;
    Ok(out)
}

/// Mean of [`rowwise_cosine`], summed in row order.
pub fn layer_similarity(w1: &impl Rows, w2: &impl Rows, eps: f64) -> Result<f64> {
    layer_similarity_named(w1, w2, eps, "")
}

fn layer_similarity_named(w1: &impl Rows, w2: &impl Rows, eps: f64, name: &str) -> Result<f64> {
    let mut sum = 0f64;
    let d = fold_rows(w1, w2, eps, name, |c| sum += c)?;
    Ok((sum / d as f64).clamp(-1.0, 1.0))
}

/// Glob patterns selecting mergeable projection weights, grouped by kind.
/// When deserialized, kinds left out are empty rather than defaulted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPatterns {
    #[serde(default)]
    pub attention_qkv: Vec<String>,
    #[serde(default)]
    pub mlp_dense: Vec<String>,
    #[serde(default)]
    pub other: Vec<String>,
}

impl Default for LayerPatterns {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|p| p.to_string()).collect();
        Self {
            attention_qkv: s(&[
                "*query_key_value.weight",
                "*.qkv.weight",
                "*.q_proj.weight",
                "*.k_proj.weight",
                "*.v_proj.weight",
            ]),
            mlp_dense: s(&[
                "*.up_proj.weight",
                "*.down_proj.weight",
                "*dense_h_to_4h.weight",
                "*dense_4h_to_h.weight",
            ]),
            other: Vec::new(),
        }
    }
}

impl LayerPatterns {
    /// Only user-supplied patterns, tagged as [`LayerKind::Other`].
    pub fn custom(patterns: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            attention_qkv: Vec::new(),
            mlp_dense: Vec::new(),
            other: patterns.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.attention_qkv.is_empty() && self.mlp_dense.is_empty() && self.other.is_empty()
    }

    /// Nonempty and every pattern compiles.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("layer pattern set is empty".into()));
        }
        self.compile().map(drop)
    }

    fn compile(&self) -> Result<[(LayerKind, GlobSet); 3]> {
        let build = |patterns: &[String]| -> Result<GlobSet> {
            let mut b = GlobSetBuilder::new();
            for p in patterns {
                b.add(Glob::new(p).map_err(|e| Error::Pattern {
                    pattern: p.clone(),
                    reason: e.to_string(),
                })?);
            }
            b.build().map_err(|e| Error::Pattern {
                pattern: patterns.join(","),
                reason: e.to_string(),
            })
        };
        Ok([
            (LayerKind::AttentionQkv, build(&self.attention_qkv)?),
            (LayerKind::MlpDense, build(&self.mlp_dense)?),
            (LayerKind::Other, build(&self.other)?),
        ])
    }
}

/// Partition of a checkpoint's tensors into mergeable projection weights and
/// passthrough tensors, both in checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerClassification {
    pub mergeable: Vec<String>,
    pub passthrough: Vec<String>,
    kinds: HashMap<String, LayerKind>,
}

impl LayerClassification {
    pub fn kind(&self, name: &str) -> Option<LayerKind> {
        self.kinds.get(name).copied()
    }

    pub fn is_mergeable(&self, name: &str) -> bool {
        self.kinds.contains_key(name)
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias")
}

/// Matrix-like tensors matching a pattern (and not bias-named) are
/// mergeable; everything else passes through.
pub fn classify_tensors(ckpt: &Checkpoint, patterns: &LayerPatterns) -> Result<LayerClassification> {
    patterns.validate()?;
    let sets = patterns.compile()?;
    let mut cls = LayerClassification::default();
    for t in ckpt.iter() {
        let kind = if t.is_matrix() && !is_bias(t.name()) {
            sets.iter()
                .find(|(_, set)| set.is_match(t.name()))
                .map(|(kind, _)| *kind)
        } else {
            None
        };
        match kind {
            Some(kind) => {
                cls.mergeable.push(t.name().to_string());
                cls.kinds.insert(t.name().to_string(), kind);
            }
            None => cls.passthrough.push(t.name().to_string()),
        }
    }
    Ok(cls)
}

/// One score per mergeable layer, in checkpoint order. Layers are scored
/// in parallel; each score is reduced sequentially so results do not depend
/// on the thread count.
pub fn similarity_table(
    base: &Checkpoint,
    other: &Checkpoint,
    cls: &LayerClassification,
    eps: f64,
) -> Result<Vec<LayerSimilarity>> {
    cls.mergeable
        .par_iter()
        .map(|name| {
            let a = base.require(name)?;
            let b = other.require(name)?;
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("layer '{name}'"),
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            if a.dtype() != b.dtype() {
                return Err(Error::DTypeMismatch { tensor: name.clone() });
            }
            let score = layer_similarity_named(a, b, eps, name)?;
            Ok(LayerSimilarity {
                layer_name: name.clone(),
                kind: cls.kind(name).unwrap_or(LayerKind::Other),
                rows: a.shape()[0],
                score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorstore::{gen_synthetic, transformer_fixture_spec, DType};

    fn m(rows: usize, cols: usize, v: &[f32]) -> Matrix {
        Matrix::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn rowwise_examples() {
        let id = Matrix::identity(2);
        assert_eq!(rowwise_cosine(&id, &id, DEFAULT_EPS).unwrap(), vec![1.0, 1.0]);
        let r = rowwise_cosine(&m(1, 2, &[1.0, 0.0]), &m(1, 2, &[0.0, 1.0]), DEFAULT_EPS).unwrap();
        assert_eq!(r, vec![0.0]);
        // dot 1, norms sqrt(2)*1 -> 1/sqrt(2); second row parallel.
        let w1 = m(2, 2, &[1.0, 1.0, 2.0, 0.0]);
        let w2 = m(2, 2, &[1.0, 0.0, 2.0, 0.0]);
        let r = rowwise_cosine(&w1, &w2, DEFAULT_EPS).unwrap();
        assert!((r[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(r[1], 1.0);
        let s = layer_similarity(&w1, &w2, DEFAULT_EPS).unwrap();
        assert!((s - 0.853_553_390_593_273_8).abs() < 1e-12, "{s}");
    }

    #[test]
    fn antiparallel_and_zero_rows() {
        let w = m(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.25, -4.0]);
        let neg = m(2, 3, &w.data().iter().map(|x| -x).collect::<Vec<_>>());
        assert_eq!(layer_similarity(&w, &neg, DEFAULT_EPS).unwrap(), -1.0);
        let z = Matrix::zeros(1, 3);
        assert_eq!(rowwise_cosine(&z, &z, DEFAULT_EPS).unwrap(), vec![1.0]);
        assert_eq!(rowwise_cosine(&z, &m(1, 3, &[1.0, 0.0, 0.0]), DEFAULT_EPS).unwrap(), vec![0.0]);
    }

    #[test]
    fn errors() {
        let e = rowwise_cosine(&Matrix::identity(2), &Matrix::identity(3), DEFAULT_EPS).unwrap_err();
        assert!(matches!(e, Error::ShapeMismatch { .. }));
        assert!(rowwise_cosine(&Matrix::identity(2), &Matrix::identity(2), 0.0).is_err());
        let nan = m(1, 2, &[f32::NAN, 1.0]);
        assert!(matches!(
            layer_similarity(&nan, &nan, DEFAULT_EPS),
            Err(Error::NonFinite { .. })
        ));
    }

    fn names_ckpt(entries: &[(&str, Vec<usize>)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, shape) in entries {
            let n = shape.iter().product();
            c.insert(TensorRecord::from_f32(*name, DType::F32, shape.clone(), &vec![1.0; n]).unwrap())
                .unwrap();
        }
        c
    }

    #[test]
    fn classify_pattern_rule() {
        let c = names_ckpt(&[
            ("blk.0.qkv.weight", vec![6, 2]),
            ("blk.0.qkv.bias", vec![6]),
            ("embed.weight", vec![4, 2]),
        ]);
        let cls = classify_tensors(&c, &LayerPatterns::custom(["*.qkv.weight"])).unwrap();
        assert_eq!(cls.mergeable, ["blk.0.qkv.weight"]);
        assert_eq!(cls.passthrough, ["blk.0.qkv.bias", "embed.weight"]);
    }

    #[test]
    fn classify_rank_and_bias_rules() {
        let c = names_ckpt(&[("norm.weight", vec![4]), ("x.bias", vec![2, 2]), ("conv.weight", vec![2, 2, 2])]);
        let cls = classify_tensors(&c, &LayerPatterns::custom(["*.weight", "*"])).unwrap();
        assert!(cls.mergeable.is_empty());
        assert_eq!(cls.passthrough.len(), 3);
        assert!(classify_tensors(&c, &LayerPatterns::custom(Vec::<String>::new())).is_err());
        assert!(matches!(
            classify_tensors(&c, &LayerPatterns::custom(["a[".to_string()])),
            Err(Error::Pattern { .. })
        ));
    }

    #[test]
    fn classify_default_fixture() {
        let ckpt = gen_synthetic(&transformer_fixture_spec(4, 8, 16, DType::F32), 1).unwrap();
        let cls = classify_tensors(&ckpt, &LayerPatterns::default()).unwrap();
        let count = |k| cls.mergeable.iter().filter(|n| cls.kind(n) == Some(k)).count();
        assert_eq!(count(LayerKind::AttentionQkv), 4);
        assert_eq!(count(LayerKind::MlpDense), 8);
        assert_eq!(cls.mergeable.len() + cls.passthrough.len(), ckpt.len());
    }

    #[test]
    fn table_errors_name_layer() {
        let a = names_ckpt(&[("l.qkv.weight", vec![2, 2])]);
        let b = names_ckpt(&[("l.qkv.weight", vec![2, 3])]);
        let cls = classify_tensors(&a, &LayerPatterns::default()).unwrap();
        let err = similarity_table(&a, &b, &cls, DEFAULT_EPS).unwrap_err();
        assert!(err.to_string().contains("l.qkv.weight"), "{err}");
        let empty = Checkpoint::new();
        assert!(matches!(
            similarity_table(&a, &empty, &cls, DEFAULT_EPS),
            Err(Error::MissingLayer(_))
        ));
    }
}
