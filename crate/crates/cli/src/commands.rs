//! Subcommand implementations. Each takes a fully resolved [`RunConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use unetmer::checkpoint::{load_checkpoint, save_checkpoint};
use unetmer::container::write_bytes;
use unetmer::dataset::{
    group_volumes, load_manifest, preprocess, slices_to_volume, write_dataset, DatasetManifest, Modality,
    PreprocessSpec, Sample, Split,
};
use unetmer::evaluate::{self, pair_name, ImageScales, MetricSet, MetricsReport, DEFAULT_DECILES};
use unetmer::model::argmax_labels;
use unetmer::patchify::Scale;
use unetmer::training::train_with;
use unetmer::UNetmerF32;
use unetmer::{Error, LabelMap, Result};

use crate::config::RunConfig;

pub const HISTORY: &str = "history.txt";
pub const METRICS: &str = "metrics.csv";
pub const RANKING: &str = "ranking.csv";
pub const COVERAGE: &str = "coverage.csv";
pub const PEARSON: &str = "pearson.csv";
pub const PROTOSEG: &str = "protoseg.csv";
pub const SWEEP: &str = "sweep.csv";
pub const CHECKPOINT_BEST: &str = "checkpoint_best";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final";
pub const RESOLVED_CONFIG: &str = "resolved_config";

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml()?)
}

fn preprocess_spec(cfg: &RunConfig, modality: Modality) -> PreprocessSpec {
    cfg.preprocess.clone().unwrap_or_else(|| PreprocessSpec::for_modality(modality, None))
}

fn load_split(cfg: &RunConfig, manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample<f32>>> {
    let spec = preprocess_spec(cfg, manifest.modality);
    manifest.load_split::<f32>(split)?.iter().map(|s| preprocess(s, &spec)).collect()
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require_out()?;
    let s = &cfg.synth;
    if s.count == 0 {
        return Err(Error::Validation("count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&s.test_fraction) {
        return Err(Error::Validation(format!("test_fraction {} outside [0, 1]", s.test_fraction)));
    }
    let samples = s.spec.generate(s.seed, s.count)?;
    let n_test = (s.test_fraction * s.count as f64).round() as usize;
    let tagged: Vec<_> = samples
        .into_iter()
        .enumerate()
        .map(|(i, x)| (x, if i + n_test >= s.count { Split::Test } else { Split::Train }))
        .collect();
    let path = write_dataset(out, &tagged, Modality::Synth, 2)?;
    echo_config(cfg, out)?;
    println!("wrote {} samples ({} test) to {}", s.count, n_test, path.display());
    Ok(())
}

pub struct TrainOutcome {
    pub model: UNetmerF32,
    pub best_val_dice: Option<f64>,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate_training()?;
    let out = cfg.require_out()?.to_path_buf();
    let manifest = load_manifest(cfg.require_manifest()?)?;
    let model_cfg = cfg.model.clone().unwrap_or_default();
    if model_cfg.backbone.num_classes != manifest.num_classes {
        return Err(Error::Validation(format!(
            "model has {} classes, manifest has {}",
            model_cfg.backbone.num_classes, manifest.num_classes
        )));
    }
    let mut all = load_split(cfg, &manifest, Split::Train)?;
    let n_val = (cfg.val_fraction() * all.len() as f64).round() as usize;
    if n_val >= all.len() {
        return Err(Error::Validation(format!(
            "val_fraction {} leaves no training samples out of {}",
            cfg.val_fraction(),
            all.len()
        )));
    }
    let val = all.split_off(all.len() - n_val);

    echo_config(cfg, &out)?;
    let mut model = UNetmerF32::new(model_cfg, cfg.train.seed)?;
    log::info!("training {} parameters on {} samples", model.parameter_count(), all.len());
    let mut best = None;
    let history = train_with(&mut model, &all, &val, &cfg.train, |ev| {
        if ev.is_best {
            best = ev.record.val_dice_s1;
            save_checkpoint(ev.model, &out.join(CHECKPOINT_BEST))?;
        }
        Ok(())
    })?;
    history.write(&out.join(HISTORY))?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FINAL))?;
    if let Some(last) = history.records.last() {
        println!(
            "trained {} epochs, final loss {:.4}{}",
            history.records.len(),
            last.train_loss,
            best.map_or_else(String::new, |d| format!(", best val dice {d:.4}"))
        );
    }
    Ok(TrainOutcome { model, best_val_dice: best })
}

fn load_model(cfg: &RunConfig) -> Result<UNetmerF32> {
    let model = load_checkpoint::<f32>(cfg.require_checkpoint()?)?;
    if let Some(expected) = &cfg.model {
        if expected != model.config() {
            return Err(Error::Validation("checkpoint model configuration does not match the configured model".into()));
        }
    }
    Ok(model)
}

/// Scores predictions per image, except that slices of one volume are
/// stitched back together and scored as a whole.
fn score(samples: &[Sample<f32>], predictions: &[LabelMap], num_classes: usize) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for (s, p) in samples.iter().zip(predictions) {
        if s.volume_key.is_none() {
            rows.push((s.id.clone(), evaluate::metrics(p, &s.mask, num_classes)?));
        }
    }
    let index: BTreeMap<&str, usize> = samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    for (key, slices) in group_volumes(samples) {
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for s in &slices {
            let slice = s
                .slice_index
                .ok_or_else(|| Error::Validation(format!("sample {} has a volume but no slice index", s.id)))?;
            pred.push((slice, predictions[index[s.id.as_str()]].clone()));
            gt.push((slice, s.mask.clone()));
        }
        let pv = slices_to_volume(&pred, &key)?;
        let gv = slices_to_volume(&gt, &key)?;
        rows.push((key, evaluate::metrics(&pv, &gv, num_classes)?));
    }
    Ok(MetricsReport::new(rows))
}

fn metrics_block(out: &mut String, s: Scale, report: &MetricsReport) {
    for line in report.to_csv().lines().skip(1) {
        let _ = writeln!(out, "{s},{line}");
    }
}

pub fn eval(cfg: &RunConfig) -> Result<BTreeMap<Scale, MetricsReport>> {
    let out = cfg.require_out()?.to_path_buf();
    let model = load_model(cfg)?;
    let manifest = load_manifest(cfg.require_manifest()?)?;
    let samples = load_split(cfg, &manifest, cfg.split())?;
    if samples.is_empty() {
        return Err(Error::Validation(format!("the {} split is empty", cfg.split())));
    }
    let k = model.config().backbone.num_classes;
    let scales = if cfg.per_scale { model.config().scales.clone() } else { vec![Scale::ONE] };
    let mut preds: BTreeMap<Scale, Vec<LabelMap>> = BTreeMap::new();
    for s in &samples {
        let multi = model.forward_scales(&s.image, &scales)?;
        for (scale, labels) in multi.labels {
            preds.entry(scale).or_default().push(labels);
        }
    }
    let mut csv = format!("scale,id,{}\n", MetricSet::NAMES.join(","));
    let mut reports = BTreeMap::new();
    for (&s, p) in &preds {
        let report = score(&samples, p, k)?;
        metrics_block(&mut csv, s, &report);
        println!("B_s={s} ({} items)\n{}", report.per_image.len(), report.summary());
        reports.insert(s, report);
    }
    write_text(&out.join(METRICS), &csv)?;
    echo_config(cfg, &out)?;
    Ok(reports)
}

pub fn rank(cfg: &RunConfig) -> Result<evaluate::ConfidenceReport> {
    let out = cfg.require_out()?.to_path_buf();
    let (i, j) = cfg.pair();
    if i == j {
        return Err(Error::Validation(format!("confidence pair needs i != j, got ({i}, {j})")));
    }
    let model = load_model(cfg)?;
    let scales = model.config().scales.clone();
    if scales.len() < 2 {
        return Err(Error::Validation("confidence requires ≥2 scales".into()));
    }
    for s in [i, j] {
        if !scales.contains(&s) {
            return Err(Error::Validation(format!("scale {s} is not among the checkpoint scales")));
        }
    }
    let mut pairs = vec![(i, j)];
    for (a, &p) in scales.iter().enumerate() {
        for &q in &scales[a + 1..] {
            if (p, q) != (i, j) && (q, p) != (i, j) {
                pairs.push((p, q));
            }
        }
    }
    let manifest = load_manifest(cfg.require_manifest()?)?;
    let samples = load_split(cfg, &manifest, cfg.split())?;
    if samples.is_empty() {
        return Err(Error::Validation(format!("the {} split is empty", cfg.split())));
    }
    let k = model.config().backbone.num_classes;
    let mut images = Vec::with_capacity(samples.len());
    let mut protoseg = String::from("id,sa\n");
    for s in &samples {
        let multi = model.forward_multiscale(&s.image)?;
        let gt = (!cfg.ignore_ground_truth).then(|| s.mask.clone());
        if cfg.protoseg {
            let reference = match &gt {
                Some(m) => m.clone(),
                None => argmax_labels(&multi.maps[&Scale::ONE])?,
            };
            match model.protoseg_score(&s.image, &reference)? {
                Some(sa) => {
                    let _ = writeln!(protoseg, "{},{sa:.6}", s.id);
                }
                None => {
                    let _ = writeln!(protoseg, "{},", s.id);
                }
            }
        }
        images.push(ImageScales { id: s.id.clone(), labels: multi.labels, ground_truth: gt });
    }
    let report = evaluate::rank_by_difficulty(&images, &pairs, 0, k, &DEFAULT_DECILES)?;
    write_text(&out.join(RANKING), &report.ranking_csv())?;
    if !cfg.ignore_ground_truth {
        write_text(&out.join(COVERAGE), &report.coverage_csv())?;
        write_text(&out.join(PEARSON), &report.pearson_csv())?;
        for (&p, r) in report.pairs.iter().zip(&report.pearson) {
            match r {
                Some(r) => println!("pearson({}, dice) = {r:.4}", pair_name(p)),
                None => println!("pearson({}, dice) undefined", pair_name(p)),
            }
        }
    }
    if cfg.protoseg {
        write_text(&out.join(PROTOSEG), &protoseg)?;
    }
    echo_config(cfg, &out)?;
    println!("most difficult: {}", report.ranking.iter().take(5).cloned().collect::<Vec<_>>().join(" "));
    Ok(report)
}

struct SweepRun {
    tag: String,
    cfg: RunConfig,
}

fn sweep_runs(cfg: &RunConfig, out: &Path) -> Vec<SweepRun> {
    let mut runs = Vec::new();
    for &variant in &cfg.sweep.backbones {
        for scales in &cfg.sweep.scale_sets {
            for &tr in &cfg.sweep.transformer {
                let mut c = cfg.clone();
                let m = c.model_or_default();
                m.backbone.variant = variant;
                m.scales = scales.clone();
                m.use_transformer = tr;
                c.train.scales = scales.clone();
                let s: Vec<String> = scales.iter().map(|s| s.to_string()).collect();
                let tag = format!("{variant}_s{}_{}", s.join("-"), if tr { "tr" } else { "notr" });
                c.out = Some(out.join(&tag));
                runs.push(SweepRun { tag, cfg: c });
            }
        }
    }
    runs
}

fn run_one(run: &SweepRun) -> Result<String> {
    let outcome = train(&run.cfg)?;
    let mut eval_cfg = run.cfg.clone();
    let dir = run.cfg.require_out()?;
    eval_cfg.checkpoint = Some(dir.join(CHECKPOINT_FINAL));
    eval_cfg.out = Some(dir.join("eval"));
    eval_cfg.per_scale = false;
    let reports = eval(&eval_cfg)?;
    let r = &reports[&Scale::ONE];
    let m = run.cfg.model.clone().unwrap_or_default();
    let scales: Vec<String> = m.scales.iter().map(|s| s.to_string()).collect();
    let mut row = format!(
        "{},{},{},{},{},{}",
        run.tag,
        m.backbone.variant,
        scales.join(" "),
        m.use_transformer,
        outcome.model.parameter_count(),
        outcome.best_val_dice.map_or_else(String::new, |d| format!("{d:.6}"))
    );
    for (mu, sd) in r.mean.values().iter().zip(r.std.values()) {
        let _ = write!(row, ",{mu:.6},{sd:.6}");
    }
    Ok(row)
}

/// Trains and scores every backbone × scale set × transformer combination,
/// `sweep.jobs` at a time, and writes one combined table.
pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let out: PathBuf = cfg.require_out()?.to_path_buf();
    let runs = sweep_runs(cfg, &out);
    if runs.is_empty() {
        return Err(Error::Validation("sweep has no configurations".into()));
    }
    for r in &runs {
        r.cfg.validate_training().map_err(|e| Error::Validation(format!("{}: {e}", r.tag)))?;
    }
    cfg.require_manifest()?;
    echo_config(cfg, &out)?;
    let jobs = cfg.sweep.jobs.clamp(1, runs.len());
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<Result<String>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                log::info!("sweep run {}", run.tag);
                let row = run_one(run);
                rows.lock().expect("sweep results lock")[i] = Some(row);
            });
        }
    });
    let mut header = String::from("tag,backbone,scales,transformer,parameters,best_val_dice");
    for n in MetricSet::NAMES {
        let _ = write!(header, ",{n}_mean,{n}_std");
    }
    let mut table = header + "\n";
    for row in rows.into_inner().expect("sweep results lock") {
        table.push_str(&row.expect("every run finished")?);
        table.push('\n');
    }
    write_text(&out.join(SWEEP), &table)?;
    print!("{table}");
    Ok(())
}
