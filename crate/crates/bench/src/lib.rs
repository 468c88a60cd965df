//! Shared fixtures for the criterion benches.

use std::collections::BTreeMap;

use layerfuse_core::tensorstore::{gen_synthetic, perturb, transformer_fixture_spec};
use layerfuse_core::{classify_tensors, Checkpoint, DType, LayerPatterns};

/// A transformer-shaped checkpoint and a copy with noise ramping across its
/// mergeable layers, so a threshold splits the layers between the two.
pub fn graded_pair(blocks: usize, hidden: usize, seed: u64) -> (Checkpoint, Checkpoint) {
    let base = gen_synthetic(&transformer_fixture_spec(blocks, hidden, 4 * hidden, DType::F32), seed)
        .expect("fixture spec is valid");
    let cls = classify_tensors(&base, &LayerPatterns::default()).expect("default patterns compile");
    let n = cls.mergeable.len() as f32;
    let noise: BTreeMap<String, f32> = cls
        .mergeable
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), (i + 1) as f32 / n))
        .collect();
    let other = perturb(&base, &noise, seed + 1).expect("noise names exist");
    (base, other)
}

/// Model-style responses cycling through valid and malformed shapes.
pub fn responses(n: usize) -> Vec<String> {
    const SHAPES: [&str; 6] = [
        "The head orientation angles are {072,354,002}.",
        "{112,432,211,201}",
        "[[234,134,100,111]]",
        "[[212,123,212}",
        "A person head",
        "Their head bounding boxes are [[106,168,148,242;245,168,270,230]].",
    ];
    (0..n).map(|i| SHAPES[i % SHAPES.len()].to_string()).collect()
}
