//! Deterministic synthetic checkpoints for tests, benches and the CLI.
//!
//! Values come from ChaCha8 (`rand_chacha`), seeded with the caller's seed
//! and using the tensor's position in the spec as the stream id. Each draw
//! takes the top 24 bits of a `u32` and maps them to `k * 2^-23 - 1`, which
//! is exactly representable and lies in `[-1, 1)`.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode_f32, Checkpoint, CheckpointWriter, DType, TensorHeader, TensorRecord};
use crate::error::{Error, Result};

const CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

/// Ordered tensor layout; serialized as a JSON object `name -> {dtype, shape}`.
pub type FixtureSpec = IndexMap<String, TensorSpec>;

fn stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[inline]
fn unit(rng: &mut ChaCha8Rng) -> f32 {
    (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 23) as f32) - 1.0
}

fn check_spec(spec: &FixtureSpec) -> Result<()> {
    if spec.is_empty() {
        return Err(Error::Config("fixture spec is empty".into()));
    }
    for (name, t) in spec {
        if t.shape.is_empty() || t.shape.contains(&0) {
            return Err(Error::InvalidShape {
                tensor: name.clone(),
                shape: t.shape.clone(),
            });
        }
    }
    Ok(())
}

/// Fills `n` values for tensor `index`, handing them to `sink` in chunks.
fn generate(
    seed: u64,
    index: usize,
    n: usize,
    mut sink: impl FnMut(&[f32]) -> Result<()>,
) -> Result<()> {
    let mut rng = stream(seed, index);
    let mut buf = Vec::with_capacity(CHUNK.min(n));
    let mut left = n;
    while left > 0 {
        let take = left.min(CHUNK);
        buf.clear();
        buf.extend((0..take).map(|_| unit(&mut rng)));
        sink(&buf)?;
        left -= take;
    }
    Ok(())
}

/// In-memory synthetic checkpoint. Byte-identical to [`write_synthetic`].
pub fn gen_synthetic(spec: &FixtureSpec, seed: u64) -> Result<Checkpoint> {
    check_spec(spec)?;
    let mut ckpt = Checkpoint::new();
    for (index, (name, t)) in spec.iter().enumerate() {
        let n: usize = t.shape.iter().product();
        let mut bytes = Vec::with_capacity(n * t.dtype.width());
        generate(seed, index, n, |chunk| {
            encode_f32(t.dtype, chunk, &mut bytes);
            Ok(())
        })?;
        ckpt.insert(TensorRecord::new(name.clone(), t.dtype, t.shape.clone(), bytes)?)?;
    }
    Ok(ckpt)
}

/// Streams a synthetic checkpoint to disk without materializing it.
pub fn write_synthetic(spec: &FixtureSpec, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    check_spec(spec)?;
    let headers: Vec<TensorHeader> = spec
        .iter()
        .map(|(name, t)| TensorHeader {
            name: name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
        })
        .collect();
    let mut writer = CheckpointWriter::create(path, &BTreeMap::new(), &headers)?;
    let mut bytes = Vec::with_capacity(CHUNK * 4);
    for (index, h) in headers.iter().enumerate() {
        generate(seed, index, h.shape.iter().product(), |chunk| {
            bytes.clear();
            encode_f32(h.dtype, chunk, &mut bytes);
            writer.write_data(&bytes)
        })?;
    }
    writer.finish()
}

/// Adds `sigma * u`, `u ~ U[-1, 1)`, to each named tensor. Noise for the
/// i-th tensor of `base` uses stream `i` of `seed`.
pub fn perturb(base: &Checkpoint, noise: &BTreeMap<String, f32>, seed: u64) -> Result<Checkpoint> {
    for name in noise.keys() {
        base.require(name)?;
    }
    let mut out = base.clone();
    for (index, t) in base.iter().enumerate() {
        let Some(&sigma) = noise.get(t.name()) else {
            continue;
        };
        let mut values = t.to_f32_vec();
        let mut rng = stream(seed, index);
        for v in &mut values {
            *v += sigma * unit(&mut rng);
        }
        out.replace(TensorRecord::from_f32(
            t.name(),
            t.dtype(),
            t.shape().to_vec(),
            &values,
        )?)?;
    }
    Ok(out)
}

/// Transformer-shaped layout: an embedding, then per block a fused QKV
/// projection (+bias), an attention output projection, MLP up/down
/// projections and two norms, then a final norm.
pub fn transformer_fixture_spec(blocks: usize, hidden: usize, ffn: usize, dtype: DType) -> FixtureSpec {
    let mut spec = FixtureSpec::new();
    let mut add = |name: String, shape: Vec<usize>| {
        spec.insert(name, TensorSpec { dtype, shape });
    };
    add("embed.weight".into(), vec![hidden * 2, hidden]);
    for b in 0..blocks {
        add(format!("blk.{b}.attn_norm.weight"), vec![hidden]);
        add(format!("blk.{b}.attn.qkv.weight"), vec![3 * hidden, hidden]);
        add(format!("blk.{b}.attn.qkv.bias"), vec![3 * hidden]);
        add(format!("blk.{b}.attn.dense.weight"), vec![hidden, hidden]);
        add(format!("blk.{b}.mlp_norm.weight"), vec![hidden]);
        add(format!("blk.{b}.mlp.up_proj.weight"), vec![ffn, hidden]);
        add(format!("blk.{b}.mlp.down_proj.weight"), vec![hidden, ffn]);
    }
    add("final_norm.weight".into(), vec![hidden]);
    spec
}
