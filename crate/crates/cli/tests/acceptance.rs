//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p vigru-cli --test acceptance`. Exits non-zero if
//! any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use vigru::checkpoint::{checkpoint_archive, restore, CheckpointMeta};
use vigru::data::{
    augment_batch, augment_image, load_split, median_filter, stratified_split, synth_generate, AugmentConfig,
    DatasetIndex, ImageSample, Record, Split,
};
use vigru::head::{bigru_forward, gru_step, HeadConfig, HeadParams};
use vigru::metrics::{aggregate, prf_per_class, topk_hit, ConfusionMatrix};
use vigru::model::{Model, ModelConfig};
use vigru::params::ParamStore;
use vigru::rng;
use vigru::tensor::{Tape, Tensor};
use vigru::train::{cosine_lr, train, OptimizerState, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// Tolerances and limits.
const GRAD_TOL: f64 = 1e-4;
const GRAD_LIMIT: Duration = Duration::from_secs(60);
const SCHEDULE_REL_TOL: f64 = 1e-12;
const OVERFIT_TARGET: f64 = 0.95;
const OVERFIT_LIMIT: Duration = Duration::from_secs(300);
const BIGRU_INSTANCES: u64 = 100;
const AUG_RANGE_IMAGES: u64 = 1000;
const METRIC_DRAWS: u64 = 1000;

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_vigru"))
        .args(["gradcheck", "--tol", "1e-4"])
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    ensure(out.status.code() == Some(0), format!("gradcheck exited {:?}:\n{text}", out.status.code()))?;
    let mut worst = (0.0f64, String::new());
    for group in ["vit.block.2", "head.bridge", "head.gru.fwd", "head.gru.bwd", "head.cls"] {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(group))
            .ok_or_else(|| format!("group {group} missing:\n{text}"))?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        let err: f64 = cols[3].parse().map_err(|_| format!("unparsable line {line}"))?;
        ensure(err < GRAD_TOL && cols[4] == "pass", format!("{group}: {line}"))?;
        if err > worst.0 {
            worst = (err, group.to_string());
        }
    }
    for frozen in ["vit.embed", "vit.block.1"] {
        ensure(
            text.lines().any(|l| l.starts_with(frozen) && l.contains("skipped")),
            format!("{frozen} should be skipped"),
        )?;
    }
    ensure(elapsed < GRAD_LIMIT, format!("took {elapsed:?}, limit {GRAD_LIMIT:?}"))?;
    Ok(format!(
        "worst rel err {:.2e} ({}) < {GRAD_TOL:e}, {:.1}s < {}s",
        worst.0,
        worst.1,
        elapsed.as_secs_f64(),
        GRAD_LIMIT.as_secs()
    ))
}

fn shape_chain() -> Outcome {
    let model = Model::<f32>::new(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let mut r = rng::substream(0, "acceptance-image", &[]);
    let pixels: Vec<f32> = (0..224 * 224 * 3).map(|_| r.random_range(0.0..1.0)).collect();
    let image = Tensor::new(&[224, 224, 3], pixels).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, &image).map_err(|e| e.to_string())?;
    let checks: [(&str, _, &[usize]); 7] = [
        ("patches", f.patches, &[196, 768]),
        ("embedded (+cls)", f.embedded, &[197, 768]),
        ("z_vit", f.z_vit, &[196, 768]),
        ("z_bridge", f.z_bridge, &[196, 512]),
        ("bigru", f.bigru, &[196, 1024]),
        ("pooled", f.pooled, &[1, 1024]),
        ("logits", f.logits, &[1, 3]),
    ];
    for (name, var, want) in checks {
        ensure(tape.shape(var) == want, format!("{name}: {:?} != {want:?}", tape.shape(var)))?;
    }
    ensure(tape.value(f.logits).iter().all(|v| v.is_finite()), "non-finite logits")?;
    Ok("224×224×3 → 196×768 → (197×768) → 196×768 → 196×512 → 196×1024 → 1024 → 3".into())
}

fn synthetic_train_set(per_class: usize, seed: u64) -> (tempfile::TempDir, Vec<ImageSample<f64>>) {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut index = synth_generate(dir.path(), per_class, 3, 32, seed).expect("synth");
    index.records.iter_mut().for_each(|r| r.split = Some(Split::Train));
    let set = load_split(&index, Split::Train, 32).expect("load");
    (dir, set)
}

fn freezing_audit() -> Outcome {
    let mut config = ModelConfig::tiny();
    config.vit.depth = 12;
    config.vit.freeze_n = 6;
    config.vit.d_model = 16;
    config.vit.mlp_width = 32;
    config.head.d_vit = 16;
    config.head.d_gru = 8;
    let (_dir, set) = synthetic_train_set(8, 11);
    let mut model = Model::<f64>::new(config, 11).map_err(|e| e.to_string())?;
    let initial = model.clone();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 11, ..TrainConfig::default() };
    train(&mut model, &set, &[], &cfg, &AugmentConfig::default(), None).map_err(|e| e.to_string())?;
    let (mut frozen, mut trainable) = (0, 0);
    for ((_, a), (_, b)) in initial.store.iter().zip(model.store.iter()) {
        if a.tensor.requires_grad {
            ensure(!a.tensor.bit_eq(&b.tensor), format!("trainable {} unchanged", a.name))?;
            trainable += 1;
        } else {
            ensure(a.tensor.bit_eq(&b.tensor), format!("frozen {} changed", a.name))?;
            frozen += 1;
        }
    }
    for n in 1..=12 {
        let name = format!("vit.block.{n}.attn.q_proj.weight");
        let grad = initial.store.by_name(&name).ok_or(format!("{name} missing"))?.requires_grad;
        ensure(grad == (n > 6), format!("{name} requires_grad = {grad}"))?;
    }
    Ok(format!("3 epochs, depth 12 / freeze 6: {frozen} frozen tensors bit-identical, {trainable} trainable tensors all moved"))
}

fn bigru_oracle() -> Outcome {
    for case in 0..BIGRU_INSTANCES {
        let mut r = rng::substream(7, "acceptance-bigru", &[case]);
        let p = r.random_range(1..=8usize);
        let d = r.random_range(1..=8usize);
        let cfg = HeadConfig { d_vit: d, d_gru: d, num_classes: 2 };
        let mut store = ParamStore::<f64>::new();
        let head = HeadParams::register(&cfg, &mut store, &mut r);
        let z: Vec<f64> = (0..p * d).map(|_| r.random_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let zv = tape.constant(&[p, d], z.clone()).map_err(|e| e.to_string())?;
        let out = bigru_forward(&mut tape, zv, &head, &binds).map_err(|e| e.to_string())?;
        let got = tape.value(out).to_vec();

        // Two unidirectional passes over explicit row lists, the second
        // over the reversed sequence with its outputs reversed back.
        let mut oracle = Tape::new();
        let ob = store.bind(&mut oracle);
        let rows: Vec<_> = (0..p)
            .map(|i| oracle.constant(&[1, d], z[i * d..(i + 1) * d].to_vec()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let mut run = |order: Vec<usize>, dir| -> Result<Vec<Vec<f64>>, String> {
            let mut h = oracle.constant(&[1, d], vec![0.0; d]).map_err(|e| e.to_string())?;
            let mut states = vec![Vec::new(); p];
            for i in order {
                h = gru_step(&mut oracle, rows[i], h, dir, &ob).map_err(|e| e.to_string())?;
                states[i] = oracle.value(h).to_vec();
            }
            Ok(states)
        };
        let fwd = run((0..p).collect(), &head.forward)?;
        let bwd = run((0..p).rev().collect(), &head.backward)?;
        let want: Vec<f64> = (0..p).flat_map(|i| fwd[i].iter().chain(&bwd[i]).copied().collect::<Vec<_>>()).collect();
        ensure(
            got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()) && got.len() == want.len(),
            format!("instance {case} (P={p}, d={d}) differs"),
        )?;
    }
    Ok(format!("{BIGRU_INSTANCES} seeded instances (P ≤ 8, d_gru ≤ 8) bit-identical"))
}

fn scheduler_endpoints() -> Outcome {
    let (lr0, lr_min, t) = (1e-3, 1e-6, 200);
    let start = cosine_lr(0, t, lr0, lr_min);
    let end = cosine_lr(t, t, lr0, lr_min);
    ensure(((start - lr0) / lr0).abs() <= SCHEDULE_REL_TOL, format!("η(0) = {start:e}"))?;
    ensure(((end - lr_min) / lr_min).abs() <= SCHEDULE_REL_TOL, format!("η(200) = {end:e}"))?;
    let lrs: Vec<f64> = (0..=t).map(|e| cosine_lr(e, t, lr0, lr_min)).collect();
    ensure(lrs.windows(2).all(|w| w[1] <= w[0]), "not monotone")?;
    Ok(format!("η(0) = {start:e}, η(200) = {end:e}, monotone over 0..=200"))
}

fn overfit_sanity() -> Outcome {
    let (_dir, set) = synthetic_train_set(20, 0);
    let mut model = Model::<f64>::new(ModelConfig::tiny(), 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let started = Instant::now();
    let log = train(&mut model, &set, &set, &cfg, &AugmentConfig::disabled(), None).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let best = log.records.iter().map(|r| r.train_top1).fold(0.0, f64::max);
    let first = log.records.iter().find(|r| r.train_top1 >= OVERFIT_TARGET).map(|r| r.epoch);
    let last = log.last().ok_or("empty log")?;
    ensure(set.len() == 60 && log.records.len() == 200 && cfg.batch_size == 32, "loop shape")?;
    ensure(first.is_some(), format!("best train top-1 {best:.4} < {OVERFIT_TARGET}"))?;
    ensure(
        log.records.iter().all(|r| r.test_top2.unwrap_or(0.0) >= r.test_top1.unwrap_or(1.0)),
        "top-2 < top-1 in some epoch",
    )?;
    ensure(elapsed < OVERFIT_LIMIT, format!("took {elapsed:?}"))?;
    Ok(format!(
        "≥ {OVERFIT_TARGET} first at epoch {}, final train top-1 {:.4} (clean {:.4}), {:.0}s",
        first.unwrap(),
        last.train_top1,
        last.test_top1.unwrap_or(f64::NAN),
        elapsed.as_secs_f64()
    ))
}

fn random_image(r: &mut rng::StreamRng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(&[h, w, 3], (0..h * w * 3).map(|_| r.random_range(0.0..=1.0)).collect()).expect("shape")
}

/// Brute-force median: sort every window explicitly.
fn median_oracle(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut win = Vec::new();
            for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    let yy = (y as i64 + dy).max(0).min(h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).max(0).min(w as i64 - 1) as usize;
                    win.push(img[yy * w + xx]);
                }
            }
            win.sort_by(f64::total_cmp);
            out[y * w + x] = win[4];
        }
    }
    out
}

fn augmentation_suite() -> Outcome {
    let mut r = rng::substream(3, "acceptance-aug", &[]);
    let img = random_image(&mut r, 16, 16);
    let none = augment_image(&img, &AugmentConfig::disabled(), &mut rng::substream(1, rng::AUGMENT, &[]));
    ensure(none.bit_eq(&img), "zero-probability output differs")?;

    for (name, cfg) in [
        ("hflip", AugmentConfig { p_hflip: 1.0, ..AugmentConfig::disabled() }),
        ("vflip", AugmentConfig { p_vflip: 1.0, ..AugmentConfig::disabled() }),
    ] {
        let mut s = rng::substream(2, rng::AUGMENT, &[]);
        let twice = augment_image(&augment_image(&img, &cfg, &mut s), &cfg, &mut s);
        ensure(twice.bit_eq(&img), format!("{name} twice is not the identity"))?;
    }
    // Half turn: hflip+vflip composed twice.
    let half = AugmentConfig { p_hflip: 1.0, p_vflip: 1.0, ..AugmentConfig::disabled() };
    let mut s = rng::substream(4, rng::AUGMENT, &[]);
    ensure(augment_image(&augment_image(&img, &half, &mut s), &half, &mut s).bit_eq(&img), "180° twice")?;

    let all = AugmentConfig { p_rot90: 1.0, p_brightness_contrast: 1.0, p_median_blur: 1.0, ..AugmentConfig::default() };
    for i in 0..AUG_RANGE_IMAGES {
        let (h, w) = (r.random_range(1..=12), r.random_range(1..=12));
        let x = random_image(&mut r, h, w);
        let cfg = if i % 2 == 0 { &all } else { &AugmentConfig::default() };
        let y = augment_image(&x, cfg, &mut rng::substream(5, rng::AUGMENT, &[i]));
        ensure(y.shape() == x.shape(), format!("image {i} changed shape"))?;
        ensure(y.data().iter().all(|v| (0.0..=1.0).contains(v)), format!("image {i} left [0,1]"))?;
    }

    let batch: Vec<ImageSample<f64>> = (0..8)
        .map(|i| ImageSample { pixels: random_image(&mut r, 8, 8), label: i % 3, index: i, split: Split::Train })
        .collect();
    let a = augment_batch(&batch, &AugmentConfig::default(), 9, 2);
    let b = augment_batch(&batch, &AugmentConfig::default(), 9, 2);
    ensure(a == b, "same seed gave different batches")?;
    ensure(a.iter().zip(&batch).all(|(x, y)| x.label == y.label), "labels changed")?;

    let hand: [[f64; 25]; 3] = [
        {
            let mut v = [0.0; 25];
            v[12] = 1.0;
            v
        },
        std::array::from_fn(|i| (i % 5) as f64 / 4.0),
        [0.9, 0.1, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6, 0.0, 1.0, 0.35, 0.65, 0.15, 0.85, 0.45, 0.55, 0.25, 0.75, 0.05, 0.95, 0.5, 0.5, 0.2, 0.6],
    ];
    for (k, h) in hand.iter().enumerate() {
        let t = Tensor::new(&[5, 5, 1], h.to_vec()).expect("5×5");
        let got = median_filter(&t, 3);
        ensure(got.data() == median_oracle(h, 5, 5).as_slice(), format!("median hand image {k}"))?;
    }
    Ok(format!(
        "identity, flip/180° involutions, range on {AUG_RANGE_IMAGES} images, determinism, median vs brute force on 3 hand 5×5 images"
    ))
}

fn metrics_oracle() -> Outcome {
    let mut r = rng::substream(8, "acceptance-metrics", &[]);
    let mut cm = ConfusionMatrix::new(3);
    let mut draws = Vec::new();
    for _ in 0..METRIC_DRAWS {
        // Coarse logits so ties occur.
        let logits: Vec<f64> = (0..3).map(|_| f64::from(r.random_range(0..4u8))).collect();
        let label = r.random_range(0..3usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        for k in 1..=3 {
            let brute = order[..k].contains(&label);
            ensure(topk_hit(&logits, label, k).map_err(|e| e.to_string())? == brute, format!("topk k={k} {logits:?} {label}"))?;
        }
        cm.add(label, order[0]).map_err(|e| e.to_string())?;
        draws.push((label, order[0]));
    }
    let per = prf_per_class(&cm);
    for c in 0..3 {
        let tp = draws.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let pred = draws.iter().filter(|&&(_, p)| p == c).count() as f64;
        let sup = draws.iter().filter(|&&(t, _)| t == c).count() as f64;
        let (p, rc) = (tp / pred, tp / sup);
        let f1 = 2.0 * p * rc / (p + rc);
        ensure(per[c].precision == p && per[c].recall == rc && per[c].f1 == f1, format!("class {c} mismatch"))?;
    }
    let mut matrices = 0;
    for _ in 0..METRIC_DRAWS {
        let rows: Vec<Vec<u64>> = (0..3).map(|_| (0..3).map(|_| r.random_range(0..40u64)).collect()).collect();
        let m = ConfusionMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
        if m.total() == 0 {
            continue;
        }
        let agg = aggregate(&prf_per_class(&m), &m.supports()).map_err(|e| e.to_string())?;
        let top1 = m.trace() as f64 / m.total() as f64;
        ensure(agg.weighted.recall.to_bits() == top1.to_bits(), format!("weighted recall {} != top-1 {top1}", agg.weighted.recall))?;
        matrices += 1;
    }
    Ok(format!("{METRIC_DRAWS} draws match brute force exactly; weighted recall == top-1 on {matrices} matrices"))
}

fn split_audit() -> Outcome {
    let counts = [("Bleeding", 1093usize), ("Ischemia", 1130), ("Normal", 4427)];
    let mut index = DatasetIndex::default();
    for (label, (name, n)) in counts.iter().enumerate() {
        index.classes.push(name.to_string());
        for i in 0..*n {
            index.records.push(Record {
                path: PathBuf::from(format!("{name}/{i:05}.png")),
                label,
                class_name: name.to_string(),
                split: None,
            });
        }
    }
    let split = stratified_split(&index, 0.8, 42).map_err(|e| e.to_string())?;
    let train = split.split_counts(Split::Train);
    let test = split.split_counts(Split::Test);
    for (c, (name, n)) in counts.iter().enumerate() {
        let want = (0.8 * *n as f64).round() as usize;
        ensure(train[c] == want, format!("{name}: {} train, want {want}", train[c]))?;
        ensure(train[c] + test[c] == *n, format!("{name}: union incomplete"))?;
    }
    ensure(split.records.len() == 6650 && split.records.iter().all(|r| r.split.is_some()), "records lost or untagged")?;
    Ok(format!("train {train:?} / test {test:?} of 6650, disjoint and complete"))
}

fn checkpoint_round_trip() -> Outcome {
    let (_dir, set) = synthetic_train_set(3, 6);
    let mut model = Model::<f64>::new(ModelConfig::tiny(), 6).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 1, batch_size: 4, seed: 6, last_checkpoint_path: None, ..TrainConfig::default() };
    train(&mut model, &set, &[], &cfg, &AugmentConfig::default(), None).map_err(|e| e.to_string())?;
    // Optimizer with live moments from one real step.
    let mut opt = OptimizerState::new(&model.store);
    let g = model.sample_grads(&set[0].pixels, set[0].label).map_err(|e| e.to_string())?;
    for ((_, p), g) in model.store.iter_mut().zip(g.grads) {
        p.tensor.grad = g;
    }
    vigru::train::adam_step(&mut model.store, &mut opt, 1e-3, &cfg.adam()).map_err(|e| e.to_string())?;
    model.store.clear_grads();

    let meta = CheckpointMeta { epoch: 1, best_test_top1: None, seed: 6 };
    let bytes = checkpoint_archive(&model, Some(&opt), &meta).map_err(|e| e.to_string())?.to_bytes();
    let archive = vigru::archive::Archive::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let back = restore::<f64>(&archive, Some(&model.config)).map_err(|e| e.to_string())?;
    for ((_, a), (_, b)) in model.store.iter().zip(back.model.store.iter()) {
        ensure(a.tensor.bit_eq(&b.tensor), format!("{} differs", a.name))?;
    }
    let restored = back.optimizer.ok_or("optimizer missing")?;
    ensure(restored.step == opt.step, "step differs")?;
    for (a, b) in restored.moments.iter().zip(&opt.moments) {
        let same = match (a, b) {
            (Some(a), Some(b)) => a.m.iter().chain(&a.v).zip(b.m.iter().chain(&b.v)).all(|(x, y)| x.to_bits() == y.to_bits()),
            (None, None) => true,
            _ => false,
        };
        ensure(same, "moment buffers differ")?;
    }
    let mut other = model.config.clone();
    other.vit.freeze_n = 0;
    let rejected = matches!(restore::<f64>(&archive, Some(&other)), Err(vigru::Error::Load(m)) if m.contains("hash"));
    ensure(rejected, "mismatched config accepted")?;
    Ok(format!("{} tensors + moments bit-exact, mismatched hash rejected", model.store.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("shape-chain audit (default config)", shape_chain),
        ("freezing audit", freezing_audit),
        ("Bi-GRU oracle", bigru_oracle),
        ("scheduler endpoints", scheduler_endpoints),
        ("overfit sanity", overfit_sanity),
        ("augmentation suite", augmentation_suite),
        ("metrics oracle", metrics_oracle),
        ("split audit", split_audit),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL  {:>2}. {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
