//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the criteria execute in
//! order and the heap counter below sees only this process's own work.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use layerfuse_core::merge::{task_arithmetic_layout, wta_layout, Reason, Source};
use layerfuse_core::metrics::RotationMatrix;
use layerfuse_core::responses::default_allowed_chars;
use layerfuse_core::similarity::DEFAULT_EPS;
use layerfuse_core::tensorstore::{gen_synthetic, perturb, transformer_fixture_spec, write_synthetic};
use layerfuse_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grow(by: usize) {
    let now = CURRENT.fetch_add(by, Ordering::Relaxed) + by;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak heap growth (bytes) above the level at entry while `f` runs.
fn heap_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed).saturating_sub(base))
}

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn c01_circular_mae() -> Outcome {
    ensure(circular_abs_diff(359.0, 1.0) == 2.0, || "359 vs 1 is not 2".into())?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draw = |rng: &mut ChaCha8Rng| {
        let v: f64 = rng.random_range(0.0..360.0);
        if rng.random_bool(0.5) {
            v.floor()
        } else {
            v
        }
    };
    let records: Vec<AngleRecord> = (0..10_000)
        .map(|_| {
            let p = EulerTriple::new(draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let g = EulerTriple::new(draw(&mut rng), draw(&mut rng), draw(&mut rng));
            AngleRecord::valid(p, g)
        })
        .collect();
    let mae = circular_mae(&records).ok_or("no MAE")?;
    let elapsed = start.elapsed();

    // Brute force over one wrap either way.
    let oracle = |a: f64, b: f64| (-1..=1).map(|k| (a - b + 360.0 * k as f64).abs()).fold(f64::INFINITY, f64::min);
    let mut worst = 0f64;
    let mut sums = [0f64; 3];
    for r in &records {
        let (p, g) = (r.pred.unwrap().as_array(), r.gt.as_array());
        for axis in 0..3 {
            let o = oracle(p[axis], g[axis]);
            worst = worst.max((circular_abs_diff(p[axis], g[axis]) - o).abs());
            sums[axis] += o;
        }
    }
    let n = records.len() as f64;
    for (got, sum) in [mae.yaw, mae.pitch, mae.roll].iter().zip(sums) {
        worst = worst.max((got - sum / n).abs());
    }
    ensure(worst == 0.0, || format!("max abs diff {worst:e}"))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("10000 triples, max abs diff 0, {elapsed:.1?}"))
}

/// Base fixture and a copy with noise ramping over its mergeable layers.
fn graded_pair(blocks: usize, hidden: usize, ffn: usize, max_noise: f32, seed: u64) -> (Checkpoint, Checkpoint) {
    let base = gen_synthetic(&transformer_fixture_spec(blocks, hidden, ffn, DType::F32), seed).unwrap();
    let cls = classify_tensors(&base, &LayerPatterns::default()).unwrap();
    let n = cls.mergeable.len() as f32;
    let noise: BTreeMap<String, f32> = cls
        .mergeable
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), max_noise * (i + 1) as f32 / n))
        .collect();
    let other = perturb(&base, &noise, seed + 1000).unwrap();
    (base, other)
}

fn c02_wta_copy_oracle() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cases = 0;
    for seed in 0..4u64 {
        let (base, other) = graded_pair(16, 32, 64, 1.5, seed);
        let cls = classify_tensors(&base, &LayerPatterns::default()).unwrap();
        ensure(cls.mergeable.len() == 48, || format!("{} mergeable layers", cls.mergeable.len()))?;
        let table = similarity_table(&base, &other, &cls, DEFAULT_EPS).unwrap();
        for tau in [0.7, 0.9, 0.95] {
            let plan = select_layers(&table, &MergeConfig::wta(tau, 0.01)).unwrap();
            let merged = merge_wta(&base, &other, &plan, &cls).unwrap();

            let mut oracle = Checkpoint::new();
            for t in base.iter() {
                let hpe = plan.source_of(t.name()) == Some(Source::HpeOriented);
                oracle.insert(if hpe { other.get(t.name()).unwrap().clone() } else { t.clone() }).unwrap();
            }
            let expected = oracle.to_bytes();
            ensure(merged.to_bytes() == expected, || format!("seed {seed} τ {tau}: differs from oracle"))?;

            let path = dir.path().join("m.st");
            wta_layout(&base, &other, &plan, &cls).unwrap().write_to(&path).unwrap();
            ensure(std::fs::read(&path).unwrap() == expected, || "streamed output differs".into())?;

            for name in &cls.mergeable {
                let t = merged.get(name).unwrap();
                let hits = [base.get(name).unwrap(), other.get(name).unwrap()]
                    .iter()
                    .filter(|s| s.data()[..] == t.data()[..])
                    .count();
                ensure(hits == 1, || format!("{name} matches {hits} sources"))?;
            }
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!("{cases} fixture/threshold cases bit-exact, {elapsed:.1?}"))
}

fn c03_threshold_monotone() -> Outcome {
    let (base, other) = graded_pair(16, 32, 64, 1.5, 7);
    let cls = classify_tensors(&base, &LayerPatterns::default()).unwrap();
    let table = similarity_table(&base, &other, &cls, DEFAULT_EPS).unwrap();
    let counts: Vec<usize> = [0.7, 0.8, 0.9, 0.95, 0.98]
        .iter()
        .map(|&t| select_layers(&table, &MergeConfig::wta(t, 0.01)).unwrap().count(Source::HpeOriented))
        .collect();
    ensure(counts.windows(2).all(|w| w[1] <= w[0]), || format!("counts {counts:?}"))?;
    ensure(counts[0] > counts[4], || format!("sweep is flat: {counts:?}"))?;
    Ok(format!("HpeOriented counts over τ 0.7..0.98: {counts:?}"))
}

fn c04_safeguard() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut scores: Vec<f64> = (0..100).map(|_| rng.random_range(0.97..1.0)).collect();
    let table = |scores: &[f64]| -> Vec<LayerSimilarity> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &score)| LayerSimilarity {
                layer_name: format!("layer.{i:03}"),
                kind: LayerKind::Other,
                rows: 1,
                score,
            })
            .collect()
    };
    let cfg = MergeConfig::wta(0.95, 0.01);
    let plan = select_layers(&table(&scores), &cfg).unwrap();
    let forced: Vec<&Decision> = plan.decisions.iter().filter(|d| d.reason == Reason::Safeguard).collect();
    ensure(forced.len() == 1 && plan.count(Source::Original) == 1, || format!("{} forced", forced.len()))?;
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(forced[0].score == min, || "forced layer is not the minimum".into())?;

    let low = min - 0.01;
    scores[60] = low;
    scores[10] = low;
    let runs: Vec<MergePlan> = (0..3).map(|_| select_layers(&table(&scores), &cfg).unwrap()).collect();
    ensure(runs.windows(2).all(|w| w[0] == w[1]), || "plans differ across runs".into())?;
    let forced: Vec<&str> = runs[0]
        .decisions
        .iter()
        .filter(|d| d.reason == Reason::Safeguard)
        .map(|d| d.layer_name.as_str())
        .collect();
    ensure(forced == ["layer.010"], || format!("tie went to {forced:?}"))?;
    Ok("1 of 100 forced (the minimum); tie resolved to the earlier layer".into())
}

fn c05_lora_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0f64;
    for i in 0..1000 {
        let r = if i % 4 == 0 { 10 } else { rng.random_range(1..=10usize) };
        let d = rng.random_range(r..=64);
        let k = rng.random_range(r..=64);
        let mut fill = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let (w, a, b) = (fill(d * k), fill(r * k), fill(d * r));
        let scale = 2.0;
        let ad = LoraAdapter::new("L", Matrix::new(r, k, a.clone()).unwrap(), Matrix::new(d, r, b.clone()).unwrap(), scale)
            .map_err(|e| e.to_string())?;
        let got = apply_lora(&Matrix::new(d, k, w.clone()).unwrap(), &ad).map_err(|e| e.to_string())?;
        for row in 0..d {
            for col in 0..k {
                let mut s = 0f64;
                for p in 0..r {
                    s += b[row * r + p] as f64 * a[p * k + col] as f64;
                }
                let want = w[row * k + col] as f64 + scale * s;
                worst = worst.max((got.get(row, col) as f64 - want).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-5, || format!("max abs diff {worst:e}"))?;
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!("1000 instances (r ≤ 10), max abs diff {worst:.2e}, {elapsed:.1?}"))
}

fn c06_task_arithmetic() -> Outcome {
    let spec = transformer_fixture_spec(4, 32, 64, DType::F32);
    let base = gen_synthetic(&spec, 60).unwrap();
    let other = gen_synthetic(&spec, 61).unwrap();
    let cls = classify_tensors(&base, &LayerPatterns::default()).unwrap();
    let ta = |lambda| merge_task_arithmetic(&base, &other, &MergeConfig::task_arithmetic(lambda), &cls).unwrap();

    ensure(ta(0.0).to_bytes() == base.to_bytes(), || "λ=0 is not the base".into())?;
    let mut worst_one = 0f64;
    let one = ta(1.0);
    for name in &cls.mergeable {
        for (m, o) in one.get(name).unwrap().to_f32_vec().iter().zip(other.get(name).unwrap().to_f32_vec()) {
            worst_one = worst_one.max((m - o).abs() as f64);
        }
    }
    ensure(worst_one <= 1e-6, || format!("λ=1 off by {worst_one:e}"))?;
    let mut worst_mid = 0f64;
    let mid = ta(0.5);
    for name in &cls.mergeable {
        let (b, o) = (base.get(name).unwrap().to_f32_vec(), other.get(name).unwrap().to_f32_vec());
        for ((m, x), y) in mid.get(name).unwrap().to_f32_vec().iter().zip(b).zip(o) {
            worst_mid = worst_mid.max((*m as f64 - (x as f64 + y as f64) / 2.0).abs());
        }
    }
    ensure(worst_mid <= 1e-6, || format!("λ=0.5 off by {worst_mid:e}"))?;
    for name in &cls.passthrough {
        ensure(mid.get(name) == base.get(name), || format!("{name} changed"))?;
    }
    Ok(format!("λ=0 exact; λ=1 max diff {worst_one:.1e}; λ=0.5 max diff {worst_mid:.1e}"))
}

fn c07_taxonomy() -> Outcome {
    use InvalidReason::*;
    let cases: [(&str, Task, InvalidReason); 10] = [
        ("[[000,111,222,333...", Task::BBox, RecycledOutput),
        ("{112,432,211}", Task::BBox, AngleFormatInBBoxTask),
        ("A man in Red", Task::BBox, NlpOutput),
        ("[[212,123,212}", Task::BBox, MixedOutput),
        ("[[234,134,100,111]]", Task::BBox, LogicalError),
        ("{112,432,211,201}", Task::Angle, WrongCount),
        ("[[234,134,100,111]]", Task::Angle, BBoxFormatInAngleTask),
        ("A person head", Task::Angle, NlpOutput),
        ("[[212,123,212}", Task::Angle, MixedOutput),
        ("{999,389,001}", Task::Angle, LogicalError),
    ];
    for (raw, task, want) in cases {
        let parsed = match task {
            Task::Angle => parse_angles_strict(raw),
            Task::BBox => parse_bboxes(raw),
        };
        ensure(parsed.reason() == Some(want), || format!("{raw:?}: parsed as {:?}", parsed.outcome))?;
        ensure(classify_invalid(raw, task) == want, || format!("{raw:?}: classified differently"))?;
    }
    let boxes = parse_bboxes("Their head bounding boxes are [[106,168,148,242;245,168,270,230]].");
    ensure(
        boxes.boxes() == Some(&[BBox::new(106, 168, 148, 242), BBox::new(245, 168, 270, 230)][..]),
        || "correct bbox answer rejected".into(),
    )?;
    let angles = parse_angles_strict("The head orientation angles are {072,354,002}.");
    ensure(angles.angles() == Some(EulerTriple::new(72.0, 354.0, 2.0)), || "correct angle answer rejected".into())?;
    let loose = parse_angles_loose("the angle is {11, 211, 312, 71, 21}");
    ensure(loose.angles() == Some(EulerTriple::new(11.0, 211.0, 312.0)), || format!("loose gave {:?}", loose.outcome))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let alphabet = b"{}[],;.0123456789 -aZ\n";
    for _ in 0..100_000 {
        let len = rng.random_range(0..64);
        let bytes: Vec<u8> = (0..len)
            .map(|_| {
                if rng.random_bool(0.7) {
                    alphabet[rng.random_range(0..alphabet.len())]
                } else {
                    rng.random()
                }
            })
            .collect();
        let raw = String::from_utf8_lossy(&bytes).into_owned();
        let survived = catch_unwind(|| {
            classify_invalid(&raw, Task::Angle);
            classify_invalid(&raw, Task::BBox);
            parse_angles_loose(&raw);
        });
        ensure(survived.is_ok(), || format!("panicked on {bytes:?}"))?;
    }
    Ok("10 table examples + 2 correct answers + loose example; 100000 fuzz inputs".into())
}

fn c08_logit_mask() -> Outcome {
    let mut vocab: Vec<String> = (0..1000).map(|i| format!("{i:03}")).collect();
    vocab.extend(["{", "}", "[[", "]]", ",", ";", " ", "the", "angle", "is", "{0", "1}", "a1", ".", "...", "\n"].map(String::from));
    vocab.extend((0..200).map(|i| format!("tok{i}")));
    let allowed = default_allowed_chars();
    let mask = build_vocab_mask(&vocab, &allowed);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let logits: Vec<f32> = (0..vocab.len()).map(|_| rng.random_range(-30.0f32..30.0)).collect();
        let masked = apply_mask(&logits, &mask).map_err(|e| e.to_string())?;
        let best = (0..masked.len()).fold(0, |b, i| if masked[i] > masked[b] { i } else { b });
        ensure(mask[best], || format!("argmax picked '{}'", vocab[best]))?;
    }
    let sequence = ["{", "001", ",", "002", ",", "003", ",", "004", "}"];
    ensure(sequence.iter().all(|t| t.chars().all(|c| allowed.contains(&c))), || "sequence not allowed".into())?;
    let text: String = sequence.concat();
    let parsed = parse_angles_strict(&text);
    ensure(!parsed.is_valid(), || format!("{text} passed strict parsing"))?;
    Ok(format!("10000 masked argmaxes allowed; {text} still rejected ({:?})", parsed.reason().unwrap()))
}

fn c09_geodesic() -> Outcome {
    let id = RotationMatrix::IDENTITY;
    let g = |a: &RotationMatrix, b: &RotationMatrix| geodesic_error(a, b).unwrap();
    ensure(g(&id, &id).abs() <= 1e-9, || "identity".into())?;
    for (name, r90, r180) in [
        ("x", RotationMatrix::rot_x(90.0), RotationMatrix::rot_x(180.0)),
        ("y", RotationMatrix::rot_y(90.0), RotationMatrix::rot_y(180.0)),
        ("z", RotationMatrix::rot_z(90.0), RotationMatrix::rot_z(180.0)),
    ] {
        ensure((g(&id, &r90) - 90.0).abs() <= 1e-9, || format!("{name} 90"))?;
        ensure((g(&id, &r180) - 180.0).abs() <= 1e-9, || format!("{name} 180"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut triple = || EulerTriple::new(rng.random_range(-180.0..180.0), rng.random_range(-90.0..90.0), rng.random_range(-180.0..180.0));
    let conv = EulerConvention::Zyx;
    let (mut sym, mut tri) = (0f64, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let [a, b, c] = [triple(), triple(), triple()].map(|t| euler_to_rotmat(&t, conv));
        sym = sym.max((g(&a, &b) - g(&b, &a)).abs());
        tri = tri.max(g(&a, &b) - g(&a, &c) - g(&c, &b));
    }
    ensure(sym <= 1e-9, || format!("asymmetry {sym:e}"))?;
    ensure(tri <= 1e-9, || format!("triangle violated by {tri:e}"))?;
    let mut axis = 0f64;
    for _ in 0..1000 {
        let (y1, y2) = (rng.random_range(0.0..360.0), rng.random_range(0.0..360.0));
        let ra = euler_to_rotmat(&EulerTriple::new(y1, 0.0, 0.0), conv);
        let rb = euler_to_rotmat(&EulerTriple::new(y2, 0.0, 0.0), conv);
        axis = axis.max((g(&ra, &rb) - circular_abs_diff(y1, y2)).abs());
    }
    ensure(axis <= 1e-9, || format!("yaw-only mismatch {axis:e}"))?;
    Ok(format!("fixed cases exact to 1e-9; asymmetry {sym:.1e}; yaw-only diff {axis:.1e}"))
}

fn c10_validity_ratio() -> Outcome {
    let counts = ValidityCounts { e_angle: 3057, t_angle: 3532, ..Default::default() };
    let (e, _) = error_ratios(&counts);
    let e = e.ok_or("undefined")?;
    ensure((e - 0.8655).abs() <= 1e-4, || format!("got {e}"))?;
    Ok(format!("3057/3532 = {e:.6}"))
}

fn c11_rehearsal() -> Outcome {
    let task = Manifest::synthetic("task-", "hpe", 1000);
    let pool = Manifest::synthetic("refcoco-", "refcoco", 42_404);
    let mut previous: HashSet<String> = HashSet::new();
    let mut sizes = Vec::new();
    for r in [0.0, 0.01, 0.10, 0.25] {
        let out = mix(&task, std::slice::from_ref(&pool), &MixConfig::new(r, 2024)).map_err(|e| e.to_string())?;
        let taken: HashSet<String> = out.entries().iter().filter(|e| e.source == "refcoco").map(|e| e.id.clone()).collect();
        ensure(previous.is_subset(&taken), || format!("ratio {r} dropped earlier ids"))?;
        sizes.push(taken.len());
        previous = taken;
    }
    ensure(sizes[2] == 4240, || format!("ratio 0.10 sampled {}", sizes[2]))?;
    ensure(sizes == [0, 424, 4240, 10_601], || format!("sizes {sizes:?}"))?;
    Ok(format!("sampled {sizes:?} from 42404, nested"))
}

fn perf_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-perf")
}

fn c12_performance() -> Outcome {
    let dir = perf_dir();
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let result = perf_run(&dir);
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn perf_run(dir: &Path) -> Outcome {
    let spec = transformer_fixture_spec(9, 1024, 4096, DType::F32);
    let params: usize = spec.values().map(|t| t.shape.iter().product::<usize>()).sum();
    let largest = spec.values().map(|t| t.shape.iter().product::<usize>() * 4).max().unwrap();
    let (base_path, other_path) = (dir.join("base.st"), dir.join("other.st"));
    write_synthetic(&spec, 12, &base_path).map_err(|e| e.to_string())?;
    {
        let base = read_checkpoint(&base_path).unwrap();
        let cls = classify_tensors(&base, &LayerPatterns::default()).unwrap();
        let n = cls.mergeable.len() as f32;
        let noise: BTreeMap<String, f32> =
            cls.mergeable.iter().enumerate().map(|(i, name)| (name.clone(), 1.2 * (i + 1) as f32 / n)).collect();
        write_checkpoint(&perturb(&base, &noise, 13).unwrap(), &other_path).map_err(|e| e.to_string())?;
    }
    let size = std::fs::metadata(&base_path).unwrap().len();
    ensure(size >= 400_000_000, || format!("fixture only {size} bytes"))?;

    let wta = |out: &Path| -> layerfuse_core::Result<usize> {
        let base = read_checkpoint(&base_path)?;
        let other = read_checkpoint(&other_path)?;
        let cls = classify_tensors(&base, &LayerPatterns::default())?;
        let table = similarity_table(&base, &other, &cls, DEFAULT_EPS)?;
        let plan = select_layers(&table, &MergeConfig::default())?;
        wta_layout(&base, &other, &plan, &cls)?.write_to(out)?;
        Ok(plan.count(Source::HpeOriented))
    };
    let ta = |out: &Path| -> layerfuse_core::Result<()> {
        let base = read_checkpoint(&base_path)?;
        let other = read_checkpoint(&other_path)?;
        let cls = classify_tensors(&base, &LayerPatterns::default())?;
        task_arithmetic_layout(&base, &[(&other, 0.5)], &cls)?.write_to(out)
    };

    let start = Instant::now();
    let (hpe_layers, wta_peak) = heap_peak(|| wta(&dir.join("wta.st")));
    let hpe_layers = hpe_layers.map_err(|e| e.to_string())?;
    let wta_time = start.elapsed();
    let start = Instant::now();
    let (res, ta_peak) = heap_peak(|| ta(&dir.join("ta.st")));
    res.map_err(|e| e.to_string())?;
    let ta_time = start.elapsed();

    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_layerfuse"))
        .current_dir(dir)
        .args(["merge", "--base", "base.st", "--other", "other.st", "--out", "cli.st", "--report", "cli.json"])
        .status()
        .map_err(|e| e.to_string())?;
    let cli_time = start.elapsed();
    ensure(status.success(), || "CLI merge failed".into())?;
    ensure(
        std::fs::read(dir.join("cli.st")).unwrap() == std::fs::read(dir.join("wta.st")).unwrap(),
        || "CLI output differs from library output".into(),
    )?;

    let limit = 2 * largest;
    let mb = |b: usize| b as f64 / 1e6;
    let detail = format!(
        "{params} params ({:.0} MB/file); wta {wta_time:.1?} heap peak {:.1} MB, ta {ta_time:.1?} heap peak {:.1} MB, \
         cli end-to-end {cli_time:.1?}; limit {:.1} MB (2 × largest tensor); {hpe_layers} layers taken from other",
        size as f64 / 1e6,
        mb(wta_peak),
        mb(ta_peak),
        mb(limit),
    );
    ensure(params >= 100_000_000, || format!("only {params} params"))?;
    for t in [wta_time, ta_time, cli_time] {
        ensure(t < Duration::from_secs(60), || detail.clone())?;
    }
    ensure(wta_peak < limit && ta_peak < limit, || detail.clone())?;
    Ok(detail)
}

fn run_cli(dir: &Path, args: &[&str], threads: Option<&str>) -> Result<Vec<u8>, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_layerfuse"));
    cmd.current_dir(dir).env_remove("LAYERFUSE_THREADS").args(args);
    if let Some(n) = threads {
        cmd.env("LAYERFUSE_THREADS", n);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn c13_cli_determinism() -> Outcome {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let scripts: Vec<Vec<&str>> = vec![
        vec!["gen-fixture", "--blocks", "3", "--hidden", "32", "--seed", "11", "--out", "a.st"],
        vec!["gen-fixture", "--perturb", "a.st", "--noise", "0.9", "--graded", "--seed", "12", "--out", "b.st"],
        vec!["gen-fixture", "--spec", "spec.json", "--seed", "3", "--out", "c.st", "--report", "c.json"],
        vec!["similarity", "--base", "a.st", "--other", "b.st", "--csv", "sim.csv"],
        vec!["merge", "--base", "a.st", "--other", "b.st", "--threshold", "0.9", "--out", "wta.st", "--csv", "wta.csv"],
        vec!["merge", "--mode", "ta", "--base", "a.st", "--other", "b.st", "--out", "ta.st", "--report", "ta.json"],
        vec!["eval", "--task", "hpe", "--responses", "hpe_r.jsonl", "--truth", "hpe_t.jsonl", "--csv", "hpe.csv"],
        vec!["eval", "--task", "bbox", "--responses", "bbox_r.jsonl", "--truth", "bbox_t.jsonl"],
        vec!["validate", "--input", "validate.jsonl", "--task", "hpe"],
        vec!["mix", "--task", "task.jsonl", "--pool", "pool.jsonl", "--ratio", "0.25", "--seed", "9", "--shuffle", "--out", "mix.jsonl"],
    ];
    let setup = |dir: &Path| -> std::io::Result<()> {
        std::fs::copy(data.join("hpe_responses.jsonl"), dir.join("hpe_r.jsonl"))?;
        std::fs::copy(data.join("hpe_truth.jsonl"), dir.join("hpe_t.jsonl"))?;
        std::fs::copy(data.join("bbox_responses.jsonl"), dir.join("bbox_r.jsonl"))?;
        std::fs::copy(data.join("bbox_truth.jsonl"), dir.join("bbox_t.jsonl"))?;
        std::fs::write(dir.join("spec.json"), r#"{"x.qkv.weight":{"dtype":"F16","shape":[64,48]},"y":{"dtype":"F32","shape":[7]}}"#)?;
        let task: String = (0..50).map(|i| format!("{{\"id\":\"t{i}\",\"source\":\"hpe\"}}\n")).collect();
        std::fs::write(dir.join("task.jsonl"), task)?;
        let pool: String = (0..400).map(|i| format!("{{\"id\":\"p{i}\",\"source\":\"pool\"}}\n")).collect();
        std::fs::write(dir.join("pool.jsonl"), pool)?;
        let validate: String = std::fs::read_to_string(data.join("hpe_responses.jsonl"))?
            .lines()
            .chain(std::fs::read_to_string(data.join("bbox_responses.jsonl"))?.lines())
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(dir.join("validate.jsonl"), validate)
    };

    let mut runs = Vec::new();
    for (label, flag, env) in [("threads=1", Some("1"), None), ("threads=4", Some("4"), None), ("env=2", None, Some("2")), ("default", None, None)] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        setup(dir.path()).map_err(|e| e.to_string())?;
        let mut stdout = Vec::new();
        for script in &scripts {
            let mut args: Vec<&str> = Vec::new();
            if let Some(n) = flag {
                args.extend(["--threads", n]);
            }
            args.extend(script.iter().copied());
            stdout.push(run_cli(dir.path(), &args, env)?);
        }
        runs.push((label, snapshot(dir.path()), stdout));
    }
    let (first_label, first_files, first_out) = &runs[0];
    for (label, files, out) in &runs[1..] {
        for (name, bytes) in first_files {
            ensure(files.get(name) == Some(bytes), || format!("{name} differs between {first_label} and {label}"))?;
        }
        ensure(files.len() == first_files.len(), || "different file sets".into())?;
        for (i, (a, b)) in first_out.iter().zip(out).enumerate() {
            ensure(a == b, || format!("stdout of {:?} differs between {first_label} and {label}", scripts[i][0]))?;
        }
    }
    Ok(format!(
        "{} invocations covering all 6 subcommands, {} output files identical across 4 runs",
        scripts.len(),
        first_files.len()
    ))
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("circular MAE boundary and brute-force oracle", c01_circular_mae),
        ("WTA merge equals per-plan copy oracle", c02_wta_copy_oracle),
        ("threshold sweep is monotone", c03_threshold_monotone),
        ("safeguard forces the minimum, ties to earliest", c04_safeguard),
        ("LoRA accumulation equals triple-loop oracle", c05_lora_oracle),
        ("task arithmetic identities", c06_task_arithmetic),
        ("response taxonomy and fuzzing", c07_taxonomy),
        ("logit masking", c08_logit_mask),
        ("geodesic metric", c09_geodesic),
        ("validity-ratio arithmetic", c10_validity_ratio),
        ("rehearsal mixing", c11_rehearsal),
        ("streaming merge performance", c12_performance),
        ("CLI byte-determinism", c13_cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    println!("acceptance: {} criteria", criteria.len());
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("{:02}", i + 1);
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS [{id}] {name} ({elapsed:.1?}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id}] {name} ({elapsed:.1?}): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} failed");
        std::process::exit(1);
    }
    println!("acceptance: all passed");
}
