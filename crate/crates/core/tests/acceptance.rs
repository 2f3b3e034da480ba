//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Training criteria take tens of minutes on one core.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{gradcheck, objective_weights, random_tensor, tiny_unetmer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unetmer::backbone::{AttentionGate, BackboneConfig, Variant};
use unetmer::bottleneck::{patches_to_tokens, token_count, Transformer, TransformerConfig};
use unetmer::checkpoint::{load_checkpoint, save_checkpoint};
use unetmer::dataset::{preprocess, PreprocessSpec, Sample, SyntheticSpec};
use unetmer::evaluate::{self, coverage_curve, pearson, protoseg_sa};
use unetmer::model::{argmax_labels, UNetmer, UNetmerConfig};
use unetmer::nn::ParamStore;
use unetmer::patchify::{split, stitch, Scale};
use unetmer::training::{lr_at_epoch, train, TrainConfig};
use unetmer::{LabelMap, Tensor};

const GRAD_TOL: f64 = 1e-4;
const JACCARD_TOL: f64 = 1e-12;
const TRAIN_DICE_MIN: f64 = 0.90;
const ABLATION_GAP_MIN: f64 = 0.02;
const PEARSON_MIN: f64 = 0.3;
const SEEDS: [u64; 3] = [0, 1, 2];
const N_SAMPLES: usize = 200;
const N_TRAIN: usize = 160;
const EPOCHS: usize = 30;

type Check = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Check);
/// Detail line, the trained model and its test set, reused by criterion 12.
type DeskRun = (String, UNetmer<f32>, Vec<Sample<f32>>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scales(v: &[usize]) -> Vec<Scale> {
    v.iter().map(|&s| Scale::new(s).unwrap()).collect()
}

fn corpus(spec: &SyntheticSpec, seed: u64) -> (Vec<Sample<f32>>, Vec<Sample<f32>>) {
    let mut all: Vec<Sample<f32>> = spec
        .generate(seed, N_SAMPLES)
        .unwrap()
        .iter()
        .map(|s| preprocess(s, &PreprocessSpec::default()).unwrap())
        .collect();
    let test = all.split_off(N_TRAIN);
    (all, test)
}

fn desk_model(model_scales: &[usize], use_transformer: bool) -> UNetmerConfig {
    let mut c = UNetmerConfig { scales: scales(model_scales), use_transformer, ..UNetmerConfig::default() };
    c.backbone.base_channels = 16;
    c
}

fn train_desk(
    spec: &SyntheticSpec,
    seed: u64,
    model_scales: &[usize],
    use_transformer: bool,
    lr0: f64,
) -> (UNetmer<f32>, Vec<Sample<f32>>, Duration) {
    let (tr, te) = corpus(spec, seed);
    let mut model = UNetmer::<f32>::new(desk_model(model_scales, use_transformer), seed).unwrap();
    let cfg = TrainConfig { epochs: EPOCHS, lr0, scales: scales(model_scales), seed, ..TrainConfig::default() };
    let start = Instant::now();
    train(&mut model, &tr, &[], &cfg).unwrap();
    (model, te, start.elapsed())
}

fn mean_dice_at(model: &UNetmer<f32>, test: &[Sample<f32>], s: Scale) -> f64 {
    let total: f64 = test
        .iter()
        .map(|x| {
            let pred = argmax_labels(&model.forward_at_scale(&x.image, s).unwrap()).unwrap();
            evaluate::dice(&pred, &x.mask, 2).unwrap()
        })
        .sum();
    total / test.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c1_patchify_round_trip() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    for _ in 0..100 {
        let c = rng.random_range(1..=3);
        let h = 8 * rng.random_range(1..=8);
        let w = 8 * rng.random_range(1..=8);
        let x = Tensor::<f64>::from_fn(&[c, h, w], |_| rng.random_range(-1e6..1e6) * rng.random::<f64>());
        for s in Scale::ALL {
            let back = stitch(&split(&x, s).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            let exact =
                back.shape() == x.shape() && back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(exact, || format!("{c}x{h}x{w} at s={s} not bit-exact"))?;
            cases += 1;
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(5), || format!("took {t:?}"))?;
    Ok(format!("{cases} round trips bit-exact in {t:.1?}"))
}

fn c2_token_counts() -> Check {
    for ((h, w), n) in [((256, 256), 4), ((64, 64), 2)] {
        ensure(token_count((h, w), n) == 256, || format!("{h}x{w} n={n}: {}", token_count((h, w), n)))?;
        for s in Scale::ALL {
            let side = (h / s.get()) >> n;
            let bottlenecks = Tensor::<f64>::zeros(&[s.patch_count(), 3, side, side]);
            let tokens = patches_to_tokens(&bottlenecks, s).map_err(|e| e.to_string())?;
            ensure(tokens.shape()[1] == 256, || format!("{h}x{w} n={n} s={s}: {:?}", tokens.shape()))?;
        }
    }
    let cfg = UNetmerConfig {
        backbone: BackboneConfig { base_channels: 2, n_pool: 2, ..Default::default() },
        transformer: TransformerConfig { num_layers: 1, num_heads: 2, mlp_ratio: 2.0 },
        scales: scales(&[1, 2, 4, 8]),
        input_size: (64, 64),
        use_transformer: true,
    };
    let model = UNetmer::<f32>::new(cfg, 0).map_err(|e| e.to_string())?;
    ensure(model.config().num_tokens() == 256, || "model token count".into())?;
    let image = Tensor::<f32>::zeros(&[1, 64, 64]);
    for s in Scale::ALL {
        model.forward_at_scale(&image, s).map_err(|e| format!("s={s}: {e}"))?;
    }
    Ok("256 tokens at every scale for 256x256/n=4 and 64x64/n=2".into())
}

fn c3_parameter_invariance() -> Check {
    let mut counts = Vec::new();
    for variant in Variant::ALL {
        let cfg = |v: &[usize]| UNetmerConfig {
            backbone: BackboneConfig { variant, base_channels: 4, n_pool: 2, ..Default::default() },
            transformer: TransformerConfig { num_layers: 1, num_heads: 2, mlp_ratio: 2.0 },
            scales: scales(v),
            input_size: (64, 64),
            use_transformer: true,
        };
        let one = UNetmer::<f32>::new(cfg(&[1]), 0).map_err(|e| e.to_string())?;
        let all = UNetmer::<f32>::new(cfg(&[1, 2, 4, 8]), 0).map_err(|e| e.to_string())?;
        ensure(one.parameter_count() == all.parameter_count(), || {
            format!("{variant}: {} vs {}", one.parameter_count(), all.parameter_count())
        })?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        save_checkpoint(&all, dir.path()).map_err(|e| e.to_string())?;
        let loaded = load_checkpoint::<f32>(dir.path()).map_err(|e| e.to_string())?;
        let image = Tensor::<f32>::from_fn(&[1, 64, 64], |i| ((i * 7919) % 97) as f32 / 97.0);
        let out = loaded.forward_multiscale(&image).map_err(|e| format!("{variant}: {e}"))?;
        ensure(out.maps.len() == 4, || format!("{variant}: {} scales", out.maps.len()))?;
        for (s, m) in &out.maps {
            ensure(m.shape() == [2, 64, 64] && m.all_finite(), || format!("{variant} s={s}: {:?}", m.shape()))?;
        }
        counts.push(format!("{variant}={}", one.parameter_count()));
    }
    Ok(format!("equal counts ({}), forward ok at s=1,2,4,8", counts.join(", ")))
}

fn c4_gradient_checks() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let tcfg = TransformerConfig { num_layers: 1, num_heads: 2, mlp_ratio: 4.0 };
    let t = Transformer::new(&mut store, "t", &tcfg, 8, 4, &mut rng).unwrap();
    let x = random_tensor(&[1, 4, 8], &mut rng);
    let w = objective_weights(&[1, 4, 8], &mut rng);
    let block = gradcheck(&mut store, &[x], false, 64, |g, v| {
        let e = t.embed(g, v[0]).unwrap();
        let y = t.blocks_forward(g, e).unwrap();
        g.weighted_sum(y, w.clone()).unwrap()
    });

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let gate = AttentionGate::new(&mut store, "gate", 3, 4, &mut rng);
    let g_in = random_tensor(&[2, 3, 4, 4], &mut rng);
    let x_in = random_tensor(&[2, 4, 4, 4], &mut rng);
    let w = objective_weights(&[2, 4, 4, 4], &mut rng);
    let gate_report = gradcheck(&mut store, &[g_in, x_in], true, 64, |g, v| {
        let y = gate.forward(g, v[0], v[1]).unwrap();
        g.weighted_sum(y, w.clone()).unwrap()
    });

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = UNetmer::<f64>::new(tiny_unetmer(true), 4).unwrap();
    let x = random_tensor(&[2, 1, 16, 16], &mut rng);
    let labels: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.random_range(0..2u8)).collect();
    let s = Scale::new(2).unwrap();
    let m = model.clone();
    let full = gradcheck(model.params_mut(), &[x], true, 12, |g, v| {
        let y = m.forward_graph(g, v[0], s).unwrap();
        g.cross_entropy(y, &labels).unwrap()
    });

    let elapsed = start.elapsed();
    for (name, r) in [("transformer block", &block), ("attention gate", &gate_report), ("tiny model", &full)] {
        ensure(r.max_rel < GRAD_TOL, || format!("{name}: max rel {:.2e} at {}", r.max_rel, r.worst))?;
    }
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max rel err: block {:.1e}, gate {:.1e}, model {:.1e} ({} entries, {elapsed:.1?})",
        block.max_rel,
        gate_report.max_rel,
        full.max_rel,
        block.checked + gate_report.checked + full.checked
    ))
}

/// Independent confusion-matrix oracle: `m[pred][gt]` pixel counts.
fn oracle(pred: &[u8], gt: &[u8]) -> [f64; 6] {
    let mut m = [[0usize; 2]; 2];
    for i in 0..pred.len() {
        m[pred[i] as usize][gt[i] as usize] += 1;
    }
    let (tp, fp, fn_, tn) = (m[1][1], m[1][0], m[0][1], m[0][0]);
    let pred_empty = tp + fp == 0;
    let div = |a: usize, b: usize, when_zero: bool| {
        if b > 0 {
            a as f64 / b as f64
        } else if when_zero {
            1.0
        } else {
            0.0
        }
    };
    let dice = div(2 * tp, 2 * tp + fp + fn_, true);
    [
        dice,
        div(tp, tp + fp + fn_, true),
        div(tp + tn, pred.len(), true),
        div(tp, tp + fn_, pred_empty),
        div(tn, tn + fp, tn + fn_ == 0),
        dice,
    ]
}

fn c5_metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_j = 0.0f64;
    for i in 0..1000 {
        // densities include all-empty and all-full masks
        let (pa, pb) = match i % 10 {
            0 => (0.0, rng.random::<f64>()),
            1 => (rng.random::<f64>(), 0.0),
            2 => (0.0, 0.0),
            3 => (1.0, rng.random::<f64>()),
            _ => (rng.random::<f64>(), rng.random::<f64>()),
        };
        let pred: Vec<u8> = (0..256).map(|_| rng.random_bool(pa) as u8).collect();
        let gt: Vec<u8> = (0..256).map(|_| rng.random_bool(pb) as u8).collect();
        let p = LabelMap::new(&[16, 16], pred.clone()).unwrap();
        let g = LabelMap::new(&[16, 16], gt.clone()).unwrap();
        let m = evaluate::metrics(&p, &g, 2).map_err(|e| e.to_string())?;
        let got = [
            evaluate::dice(&p, &g, 2).unwrap(),
            evaluate::jaccard(&p, &g, 2).unwrap(),
            evaluate::pixel_accuracy(&p, &g, 2).unwrap(),
            evaluate::sensitivity(&p, &g, 2).unwrap(),
            evaluate::specificity(&p, &g, 2).unwrap(),
            evaluate::confidence_score(&p, &g, 2).unwrap(),
        ];
        let want = oracle(&pred, &gt);
        ensure(got == want && m.values() == want[..5], || {
            format!("pair {i}: got {got:?}, metrics {:?}, oracle {want:?}", m.values())
        })?;
        let d = got[0];
        let dj = (got[1] - d / (2.0 - d)).abs();
        max_j = max_j.max(dj);
        ensure(dj <= JACCARD_TOL, || format!("pair {i}: |J - D/(2-D)| = {dj:e}"))?;
        ensure(got.iter().all(|v| (0.0..=1.0).contains(v)), || format!("pair {i}: out of range {got:?}"))?;
    }
    Ok(format!("1000 pairs exact, max |J - D/(2-D)| = {max_j:.1e}"))
}

fn c6_confidence_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..500 {
        let k = if i % 2 == 0 { 2 } else { 3 };
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let map = |rng: &mut ChaCha8Rng, p: f64| {
            let data = (0..h * w).map(|_| if rng.random_bool(p) { rng.random_range(1..k) as u8 } else { 0 }).collect();
            LabelMap::new(&[h, w], data).unwrap()
        };
        let (pa, pb) = (rng.random::<f64>(), rng.random::<f64>());
        let a = map(&mut rng, pa);
        let b = map(&mut rng, pb);
        let ab = evaluate::confidence_score(&a, &b, k).unwrap();
        let ba = evaluate::confidence_score(&b, &a, k).unwrap();
        ensure(ab.to_bits() == ba.to_bits(), || format!("case {i}: C(a,b)={ab} C(b,a)={ba}"))?;
        ensure((0.0..=1.0).contains(&ab), || format!("case {i}: C={ab}"))?;
        if a.data().iter().any(|&v| v > 0) {
            let aa = evaluate::confidence_score(&a, &a, k).unwrap();
            ensure(aa == 1.0, || format!("case {i}: C(a,a)={aa}"))?;
        }
        if k == 2 {
            // complement foreground is disjoint from a's
            let comp = LabelMap::new(&[h, w], a.data().iter().map(|&v| 1 - v).collect()).unwrap();
            if a.data().iter().any(|&v| v > 0) && comp.data().iter().any(|&v| v > 0) {
                let c = evaluate::confidence_score(&a, &comp, k).unwrap();
                ensure(c == 0.0, || format!("case {i}: disjoint C={c}"))?;
            }
        }
    }
    Ok("symmetry, identity, disjointness and range hold on 500 random pairs".into())
}

fn c7_desk_training() -> Result<DeskRun, String> {
    let (model, test, elapsed) = train_desk(&SyntheticSpec::default(), 0, &[1, 2], true, 1e-4);
    let dice = mean_dice_at(&model, &test, Scale::ONE);
    let detail = format!("B_s=1 test dice {dice:.4} after {EPOCHS} epochs in {elapsed:.0?}");
    ensure(dice >= TRAIN_DICE_MIN, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(20 * 60), || detail.clone())?;
    Ok((detail, model, test))
}

/// Large ellipses of random polarity: the patch-local context at s=4 no
/// longer identifies the foreground, so the shared bottleneck matters.
fn ablation_corpus() -> SyntheticSpec {
    SyntheticSpec { random_polarity: true, radius_range: (0.15, 0.4), ..SyntheticSpec::default() }
}

fn c8_transformer_ablation() -> Check {
    let s4 = Scale::new(4).unwrap();
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    for seed in SEEDS {
        let (with, test, _) = train_desk(&ablation_corpus(), seed, &[4], true, 1e-3);
        let (without, _, _) = train_desk(&ablation_corpus(), seed, &[4], false, 1e-3);
        let (a, b) = (mean_dice_at(&with, &test, s4), mean_dice_at(&without, &test, s4));
        gaps.push(a - b);
        lines.push(format!("seed {seed}: {a:.4} vs {b:.4}"));
    }
    let m = median(gaps);
    let detail = format!("median gap {m:.4} ({})", lines.join("; "));
    ensure(m >= ABLATION_GAP_MIN, || detail.clone())?;
    Ok(detail)
}

/// Contrast reaching below the unit noise level gives a spread of
/// difficulties.
fn ranking_corpus() -> SyntheticSpec {
    SyntheticSpec { contrast_range: (0.2, 3.0), ..SyntheticSpec::default() }
}

struct RankingRun {
    pearson: f64,
    coverage_50: f64,
    coverage_100: f64,
}

fn ranking_runs() -> Vec<RankingRun> {
    let pair = (Scale::ONE, Scale::new(2).unwrap());
    SEEDS
        .iter()
        .map(|&seed| {
            let (model, test, _) = train_desk(&ranking_corpus(), seed, &[1, 2], true, 1e-4);
            let mut c12 = Vec::new();
            let mut dice = Vec::new();
            for x in &test {
                let out = model.forward_multiscale(&x.image).unwrap();
                c12.push(evaluate::confidence_score(&out.labels[&pair.0], &out.labels[&pair.1], 2).unwrap());
                dice.push(evaluate::dice(&out.labels[&Scale::ONE], &x.mask, 2).unwrap());
            }
            let cov = coverage_curve(&c12, &dice, &[50.0, 100.0]).unwrap();
            RankingRun {
                pearson: pearson(&c12, &dice).unwrap_or(f64::NAN),
                coverage_50: cov[0].1,
                coverage_100: cov[1].1,
            }
        })
        .collect()
}

fn c9_ranking_correlation(runs: &[RankingRun]) -> Check {
    let rs: Vec<f64> = runs.iter().map(|r| r.pearson).collect();
    let m = median(rs.clone());
    let detail = format!(
        "median Pearson(C12, dice) {m:.4} over {} test images (seeds: {})",
        N_SAMPLES - N_TRAIN,
        rs.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(", ")
    );
    ensure(m > PEARSON_MIN, || detail.clone())?;
    Ok(detail)
}

fn c10_coverage(runs: &[RankingRun]) -> Check {
    let parts: Vec<String> = runs.iter().map(|r| format!("{:.4} >= {:.4}", r.coverage_50, r.coverage_100)).collect();
    let detail = format!("dice at d=50% vs d=100% per seed: {}", parts.join("; "));
    ensure(runs.iter().all(|r| r.coverage_50 >= r.coverage_100), || detail.clone())?;
    Ok(detail)
}

fn c11_lr_schedule() -> Check {
    let cfg = TrainConfig::default();
    let expected = [(0, 1e-4), (19, 1e-4), (20, 5e-5), (39, 5e-5), (40, 2.5e-5), (99, 6.25e-6)];
    for (epoch, lr) in expected {
        let got = lr_at_epoch(&cfg, epoch);
        ensure(got == lr, || format!("epoch {epoch}: {got:e} != {lr:e}"))?;
    }
    Ok("exact at epochs 0, 19, 20, 39, 40, 99".into())
}

fn c12_protoseg(trained: Option<&(UNetmer<f32>, Vec<Sample<f32>>)>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let mask = LabelMap::new(&[32, 32], (0..1024).map(|_| rng.random_bool(0.3) as u8).collect()).unwrap();
        let feats = Tensor::<f64>::from_fn(&[3, 32, 32], |i| if i < 1024 { mask.data()[i] as f64 } else { 0.0 });
        let sa = protoseg_sa(&feats, &mask).map_err(|e| e.to_string())?;
        ensure(sa == Some(1.0), || format!("mask-as-feature SA {sa:?}"))?;
    }
    let (model, test) = trained.ok_or("no trained model from criterion 7")?;
    let (mut input, mut deep, mut n) = (0.0, 0.0, 0.0);
    for x in test {
        let a = protoseg_sa(&x.image, &x.mask).map_err(|e| e.to_string())?;
        let b = model.protoseg_score(&x.image, &x.mask).map_err(|e| e.to_string())?;
        if let (Some(a), Some(b)) = (a, b) {
            input += a;
            deep += b;
            n += 1.0;
        }
    }
    let detail = format!("SA 1.0 on mask features; deep {:.4} vs input {:.4} over {n} images", deep / n, input / n);
    ensure(n > 0.0 && deep > input, || detail.clone())?;
    Ok(detail)
}

fn run<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn report(failures: &mut usize, n: usize, name: &str, start: Instant, r: &Result<String, String>) {
    let t = start.elapsed();
    match r {
        Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{t:.1?}]"),
        Err(d) => {
            *failures += 1;
            println!("criterion {n:>2} FAIL  {name}: {d} [{t:.1?}]");
        }
    }
}

fn main() {
    // `cargo test <filter>` passes the filter through; run only when it
    // could select this target
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = filters.is_empty() || filters.iter().any(|f| "acceptance criterion".contains(f.as_str()));
    if !selected || std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;
    let quick: [Criterion; 6] = [
        (1, "patchify round trip", c1_patchify_round_trip),
        (2, "token count scale invariance", c2_token_counts),
        (3, "parameter invariance", c3_parameter_invariance),
        (4, "gradient checks", c4_gradient_checks),
        (5, "metric oracle equivalence", c5_metric_oracle),
        (6, "confidence score algebra", c6_confidence_algebra),
    ];
    for (n, name, f) in quick {
        let t = Instant::now();
        let r = run(f);
        report(&mut failures, n, name, t, &r);
    }

    let t = Instant::now();
    let c7 = run(c7_desk_training);
    let trained = c7.as_ref().ok().map(|(_, m, te)| (m.clone(), te.clone()));
    report(&mut failures, 7, "desk-scale training", t, &c7.map(|(d, _, _)| d));

    let t = Instant::now();
    report(&mut failures, 8, "transformer ablation at s=4", t, &run(c8_transformer_ablation));

    let t = Instant::now();
    let runs = run(|| Ok(ranking_runs()));
    let c9 = runs.as_ref().map_err(Clone::clone).and_then(|r| c9_ranking_correlation(r));
    report(&mut failures, 9, "ranking correlation", t, &c9);
    let t = Instant::now();
    let c10 = runs.as_ref().map_err(Clone::clone).and_then(|r| c10_coverage(r));
    report(&mut failures, 10, "coverage monotonicity", t, &c10);

    let t = Instant::now();
    report(&mut failures, 11, "lr schedule", t, &run(c11_lr_schedule));

    let t = Instant::now();
    report(&mut failures, 12, "ProtoSeg sanity", t, &run(|| c12_protoseg(trained.as_ref())));

    println!("{} of 12 criteria passed", 12 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
