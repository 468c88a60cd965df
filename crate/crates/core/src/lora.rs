//! Folding low-rank adapters into base weights: `W' = W + scale * (B A)`.
//!
//! Products are accumulated in f64 with the rank index summed in ascending
//! order, then rounded once to the base tensor's dtype.

use std::collections::HashSet;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensorstore::{Checkpoint, TensorRecord};

pub const LORA_A_SUFFIX: &str = ".lora_A";
pub const LORA_B_SUFFIX: &str = ".lora_B";

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "matrix construction".into(),
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_record(t: &TensorRecord) -> Result<Self> {
        let (rows, cols) = t.matrix_dims()?;
        Self::new(rows, cols, t.to_f32_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Low-rank update for one layer: `b` is d×r, `a` is r×k.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer_name: String,
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(layer_name: impl Into<String>, a: Matrix, b: Matrix, scale: f64) -> Result<Self> {
        let layer_name = layer_name.into();
        if b.cols != a.rows || a.rows > b.rows.min(a.cols) {
            return Err(Error::ShapeMismatch {
                context: format!("adapter '{layer_name}' (B vs A)"),
                left: b.shape().to_vec(),
                right: a.shape().to_vec(),
            });
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::Config(format!(
                "adapter '{layer_name}': scale must be finite and nonnegative, got {scale}"
            )));
        }
        Ok(Self {
            layer_name,
            a,
            b,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    /// Shape of the delta `B A`.
    pub fn delta_shape(&self) -> [usize; 2] {
        [self.b.rows, self.a.cols]
    }
}

/// `base + scale * (b · a)`.
pub fn apply_lora(base: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    if base.shape() != adapter.delta_shape() {
        return Err(Error::ShapeMismatch {
            context: format!("adapter '{}' (base vs B·A)", adapter.layer_name),
            left: base.shape().to_vec(),
            right: adapter.delta_shape().to_vec(),
        });
    }
    let (d, k, r) = (base.rows, base.cols, adapter.rank());
    let mut out = Vec::with_capacity(d * k);
    let mut acc = vec![0f64; k];
    for i in 0..d {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..r {
            let bip = adapter.b.data[i * r + p] as f64;
            let a_row = adapter.a.row(p);
            for (slot, &apj) in acc.iter_mut().zip(a_row) {
                *slot += bip * apj as f64;
            }
        }
        out.extend(
            base.row(i)
                .iter()
                .zip(&acc)
                .map(|(&w, &delta)| (w as f64 + adapter.scale * delta) as f32),
        );
    }
    Ok(Matrix {
        rows: d,
        cols: k,
        data: out,
    })
}

/// Applies every adapter to its named layer. Untouched tensors are shared
/// with `base`; rewritten layers keep their original dtype.
pub fn accumulate_checkpoint(base: &Checkpoint, adapters: &[LoraAdapter]) -> Result<Checkpoint> {
    let mut seen = HashSet::new();
    for ad in adapters {
        if !seen.insert(ad.layer_name.as_str()) {
            return Err(Error::DuplicateAdapter(ad.layer_name.clone()));
        }
        base.require(&ad.layer_name)?.matrix_dims()?;
    }
    let updated: Vec<TensorRecord> = adapters
        .par_iter()
        .map(|ad| {
            let layer = base.require(&ad.layer_name)?;
            layer.check_finite()?;
            let merged = apply_lora(&Matrix::from_record(layer)?, ad)?;
            TensorRecord::from_f32(
                layer.name(),
                layer.dtype(),
                layer.shape().to_vec(),
                merged.data(),
            )
        })
        .collect::<Result<_>>()?;
    let mut out = base.clone();
    for record in updated {
        out.replace(record)?;
    }
    Ok(out)
}

/// Pairs `<layer>.lora_A` / `<layer>.lora_B` tensors into adapters, in order
/// of first appearance.
pub fn adapters_from_checkpoint(ckpt: &Checkpoint, scale: f64) -> Result<Vec<LoraAdapter>> {
    let mut halves: IndexMap<&str, (Option<&TensorRecord>, Option<&TensorRecord>)> = IndexMap::new();
    for t in ckpt.iter() {
        if let Some(layer) = t.name().strip_suffix(LORA_A_SUFFIX) {
            halves.entry(layer).or_default().0 = Some(t);
        } else if let Some(layer) = t.name().strip_suffix(LORA_B_SUFFIX) {
            halves.entry(layer).or_default().1 = Some(t);
        } else {
            return Err(Error::Config(format!(
                "adapter tensor '{}' lacks a {LORA_A_SUFFIX}/{LORA_B_SUFFIX} suffix",
                t.name()
            )));
        }
    }
    halves
        .into_iter()
        .map(|(layer, pair)| match pair {
            (Some(a), Some(b)) => {
                a.check_finite()?;
                b.check_finite()?;
                LoraAdapter::new(layer, Matrix::from_record(a)?, Matrix::from_record(b)?, scale)
            }
            _ => Err(Error::IncompleteAdapter(layer.to_string())),
        })
        .collect()
}
