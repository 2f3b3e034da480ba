//! Segmentation metrics, scale-agreement confidence, difficulty ranking and
//! prototype-based layer probing.
//!
//! Binary metrics treat label 0 as background and every other label as a
//! foreground class. With more than two classes each foreground class is
//! scored one-vs-rest and the results are macro-averaged.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::patchify::Scale;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

/// One-vs-rest pixel counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of_class(pred: &[u8], gt: &[u8], class: u8) -> Self {
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p == class, g == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `a / b`, or the agreement value when `b` is zero: 1 if `empty_pred`
    /// else 0.
    fn ratio(a: usize, b: usize, empty_pred: bool) -> f64 {
        if b == 0 {
            if empty_pred {
                1.0
            } else {
                0.0
            }
        } else {
            a as f64 / b as f64
        }
    }

    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        Self::ratio(2 * self.tp, den, true)
    }

    pub fn jaccard(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        Self::ratio(self.tp, den, true)
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.fn_ + self.tn;
        Self::ratio(self.tp + self.tn, total, true)
    }

    pub fn sensitivity(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_, self.tp + self.fp == 0)
    }

    pub fn specificity(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp, self.tn + self.fn_ == 0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricSet {
    pub dice: f64,
    pub jaccard: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 5] = ["dice", "jaccard", "accuracy", "sensitivity", "specificity"];

    pub fn values(&self) -> [f64; 5] {
        [self.dice, self.jaccard, self.accuracy, self.sensitivity, self.specificity]
    }

    fn from_values(v: [f64; 5]) -> Self {
        MetricSet { dice: v[0], jaccard: v[1], accuracy: v[2], sensitivity: v[3], specificity: v[4] }
    }
}

fn check_pair(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(invalid!("shape mismatch: {:?} vs {:?}", pred.shape(), gt.shape()));
    }
    if num_classes < 2 {
        return Err(invalid!("num_classes must be at least 2"));
    }
    for (name, m) in [("prediction", pred), ("ground truth", gt)] {
        let max = m.max_label() as usize;
        if !m.is_empty() && max >= num_classes {
            return Err(invalid!("{name} label {max} >= num_classes {num_classes}"));
        }
    }
    Ok(())
}

fn macro_average(pred: &LabelMap, gt: &LabelMap, num_classes: usize, f: impl Fn(&Confusion) -> f64) -> Result<f64> {
    check_pair(pred, gt, num_classes)?;
    let total: f64 = (1..num_classes).map(|c| f(&Confusion::of_class(pred.data(), gt.data(), c as u8))).sum();
    Ok(total / (num_classes - 1) as f64)
}

pub fn dice(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<f64> {
    macro_average(pred, gt, num_classes, Confusion::dice)
}

pub fn jaccard(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<f64> {
    macro_average(pred, gt, num_classes, Confusion::jaccard)
}

pub fn pixel_accuracy(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<f64> {
    macro_average(pred, gt, num_classes, Confusion::accuracy)
}

pub fn sensitivity(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<f64> {
    macro_average(pred, gt, num_classes, Confusion::sensitivity)
}

pub fn specificity(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<f64> {
    macro_average(pred, gt, num_classes, Confusion::specificity)
}

pub fn metrics(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<MetricSet> {
    check_pair(pred, gt, num_classes)?;
    let mut acc = [0.0; 5];
    for c in 1..num_classes {
        let conf = Confusion::of_class(pred.data(), gt.data(), c as u8);
        let v = [conf.dice(), conf.jaccard(), conf.accuracy(), conf.sensitivity(), conf.specificity()];
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    Ok(MetricSet::from_values(acc.map(|a| a / (num_classes - 1) as f64)))
}

/// Dice agreement between two segmentations of the same image produced at
/// different scales. Symmetric, and 1 when both maps are empty.
pub fn confidence_score(a: &LabelMap, b: &LabelMap, num_classes: usize) -> Result<f64> {
    dice(a, b, num_classes)
}

/// Per-image metric lists with mean and population standard deviation.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_image: Vec<(String, MetricSet)>,
    pub mean: MetricSet,
    pub std: MetricSet,
}

impl MetricsReport {
    pub fn new(per_image: Vec<(String, MetricSet)>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mut mean = [0.0; 5];
        for (_, m) in &per_image {
            for (a, v) in mean.iter_mut().zip(m.values()) {
                *a += v / n;
            }
        }
        let mut var = [0.0; 5];
        for (_, m) in &per_image {
            for ((a, v), mu) in var.iter_mut().zip(m.values()).zip(mean) {
                *a += (v - mu) * (v - mu) / n;
            }
        }
        MetricsReport { per_image, mean: MetricSet::from_values(mean), std: MetricSet::from_values(var.map(f64::sqrt)) }
    }

    /// `id,dice,jaccard,...` rows followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for n in MetricSet::NAMES {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        let rows =
            self.per_image.iter().map(|(id, m)| (id.as_str(), m)).chain([("mean", &self.mean), ("std", &self.std)]);
        for (id, m) in rows {
            out.push_str(id);
            for v in m.values() {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable `metric: mean ± std` table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for ((name, mu), sd) in MetricSet::NAMES.iter().zip(self.mean.values()).zip(self.std.values()) {
            let _ = writeln!(out, "{name:<12} {mu:.4} ± {sd:.4}");
        }
        out
    }
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid!("length mismatch: {} vs {}", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(invalid!("correlation needs at least 2 points, got {}", x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(format!("zero variance in {}", if sxx == 0.0 { "x" } else { "y" })));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Number of samples kept at `d` percent of `n`, rounding up.
pub fn coverage_count(d: f64, n: usize) -> usize {
    // Absorb the round-off in e.g. (200/3)% of 3 before rounding up.
    let raw = d / 100.0 * n as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Mean Dice of the top-`d`% most confident samples for every `d`.
/// Equal scores keep their input order.
pub fn coverage_curve(scores: &[f64], dices: &[f64], deciles: &[f64]) -> Result<Vec<(f64, f64)>> {
    if scores.is_empty() {
        return Err(invalid!("coverage needs at least one sample"));
    }
    if scores.len() != dices.len() {
        return Err(invalid!("length mismatch: {} scores vs {} dices", scores.len(), dices.len()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    deciles
        .iter()
        .map(|&d| {
            if !(d > 0.0 && d <= 100.0) {
                return Err(invalid!("coverage percentile {d} outside (0, 100]"));
            }
            let k = coverage_count(d, scores.len());
            let mean = order[..k].iter().map(|&i| dices[i]).sum::<f64>() / k as f64;
            Ok((d, mean))
        })
        .collect()
}

pub const DEFAULT_DECILES: [f64; 10] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0];

/// Per-scale label maps of one test image.
#[derive(Clone, Debug)]
pub struct ImageScales {
    pub id: String,
    pub labels: BTreeMap<Scale, LabelMap>,
    pub ground_truth: Option<LabelMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfidenceEntry {
    pub id: String,
    /// `C_ij` for every requested pair, in request order.
    pub scores: Vec<f64>,
    /// Dice of the scale-1 map against ground truth.
    pub dice: Option<f64>,
    /// Position in the difficult-first ranking, from 1.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfidenceReport {
    pub pairs: Vec<(Scale, Scale)>,
    /// Pair whose score orders the ranking.
    pub ranking_pair: usize,
    pub entries: Vec<ConfidenceEntry>,
    /// Image ids, least confident first.
    pub ranking: Vec<String>,
    /// Correlation of each pair's score with Dice; `None` when undefined.
    pub pearson: Vec<Option<f64>>,
    pub coverage: Vec<(f64, f64)>,
}

pub fn pair_name((i, j): (Scale, Scale)) -> String {
    format!("c{i}{j}")
}

impl ConfidenceReport {
    /// One record per image in ranking order.
    pub fn ranking_csv(&self) -> String {
        let mut out = String::from("rank,id");
        for &p in &self.pairs {
            out.push(',');
            out.push_str(&pair_name(p));
        }
        out.push_str(",dice\n");
        let mut by_rank: Vec<&ConfidenceEntry> = self.entries.iter().collect();
        by_rank.sort_by_key(|e| e.rank);
        for e in by_rank {
            let _ = write!(out, "{},{}", e.rank, e.id);
            for s in &e.scores {
                let _ = write!(out, ",{s:.6}");
            }
            match e.dice {
                Some(d) => {
                    let _ = writeln!(out, ",{d:.6}");
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }

    pub fn coverage_csv(&self) -> String {
        let mut out = String::from("percentile,mean_dice\n");
        for (d, m) in &self.coverage {
            let _ = writeln!(out, "{d},{m:.6}");
        }
        out
    }

    pub fn pearson_csv(&self) -> String {
        let mut out = String::from("pair,pearson_r\n");
        for (&p, r) in self.pairs.iter().zip(&self.pearson) {
            match r {
                Some(r) => {
                    let _ = writeln!(out, "{},{r:.6}", pair_name(p));
                }
                None => {
                    let _ = writeln!(out, "{},", pair_name(p));
                }
            }
        }
        out
    }
}

/// Scores every image by scale agreement and orders them difficult-first
/// by the pair at `ranking_pair`.
pub fn rank_by_difficulty(
    images: &[ImageScales],
    pairs: &[(Scale, Scale)],
    ranking_pair: usize,
    num_classes: usize,
    deciles: &[f64],
) -> Result<ConfidenceReport> {
    if pairs.is_empty() || ranking_pair >= pairs.len() {
        return Err(invalid!("ranking pair {ranking_pair} not among {} pairs", pairs.len()));
    }
    for &(i, j) in pairs {
        if i == j {
            return Err(invalid!("confidence pair needs distinct scales, got ({i}, {j})"));
        }
    }
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        let get = |s: Scale| img.labels.get(&s).ok_or_else(|| invalid!("image {} has no output at scale {s}", img.id));
        let scores =
            pairs.iter().map(|&(i, j)| confidence_score(get(i)?, get(j)?, num_classes)).collect::<Result<Vec<_>>>()?;
        let dice = match &img.ground_truth {
            Some(gt) => Some(dice(get(Scale::ONE)?, gt, num_classes)?),
            None => None,
        };
        entries.push(ConfidenceEntry { id: img.id.clone(), scores, dice, rank: 0 });
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[a].scores[ranking_pair].total_cmp(&entries[b].scores[ranking_pair]));
    for (r, &i) in order.iter().enumerate() {
        entries[i].rank = r + 1;
    }
    let ranking = order.iter().map(|&i| entries[i].id.clone()).collect();

    let dices: Option<Vec<f64>> = entries.iter().map(|e| e.dice).collect();
    let (pearson, coverage) = match dices {
        Some(d) if !d.is_empty() => {
            let pearson = (0..pairs.len())
                .map(|p| {
                    let s: Vec<f64> = entries.iter().map(|e| e.scores[p]).collect();
                    pearson(&s, &d).ok()
                })
                .collect();
            let s: Vec<f64> = entries.iter().map(|e| e.scores[ranking_pair]).collect();
            (pearson, coverage_curve(&s, &d, deciles)?)
        }
        _ => (vec![None; pairs.len()], Vec::new()),
    };
    Ok(ConfidenceReport { pairs: pairs.to_vec(), ranking_pair, entries, ranking, pearson, coverage })
}

/// Nearest-neighbour resampling of a label map, sampling source pixel
/// centres.
pub fn resize_nearest(mask: &LabelMap, (h, w): (usize, usize)) -> LabelMap {
    let (sh, sw) = (mask.shape()[0], mask.shape()[1]);
    let src = mask.data();
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let sy = ((2 * y + 1) * sh / (2 * h)).min(sh - 1);
            let sx = ((2 * x + 1) * sw / (2 * w)).min(sw - 1);
            src[sy * sw + sx]
        })
        .collect();
    LabelMap::new(&[h, w], data).expect("length matches")
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Segmentation ability of a feature map: Dice of the nearest-prototype
/// (cosine) foreground/background split against `reference`. `None` when
/// either region is empty at feature resolution.
pub fn protoseg_sa<T: Scalar>(features: &Tensor<T>, reference: &LabelMap) -> Result<Option<f64>> {
    let [c, h, w] = *features.shape() else {
        return Err(invalid!("expected [C, h, w] features, got {:?}", features.shape()));
    };
    let [rh, rw] = *reference.shape() else {
        return Err(invalid!("expected [H, W] reference, got {:?}", reference.shape()));
    };
    if h == 0 || w == 0 || h > rh || w > rw {
        return Err(invalid!("feature grid {h}x{w} cannot be matched to mask {rh}x{rw}"));
    }
    let small = resize_nearest(reference, (h, w));
    let p = h * w;
    let d = features.data();
    let vec_at = |i: usize| -> Vec<f64> { (0..c).map(|k| d[k * p + i].as_f64()).collect() };
    let mut fg = vec![0.0; c];
    let mut bg = vec![0.0; c];
    let (mut nf, mut nb) = (0usize, 0usize);
    for (i, &l) in small.data().iter().enumerate() {
        let (acc, n) = if l > 0 { (&mut fg, &mut nf) } else { (&mut bg, &mut nb) };
        *n += 1;
        for (a, k) in acc.iter_mut().zip(0..c) {
            *a += d[k * p + i].as_f64();
        }
    }
    if nf == 0 || nb == 0 {
        return Ok(None);
    }
    fg.iter_mut().for_each(|v| *v /= nf as f64);
    bg.iter_mut().for_each(|v| *v /= nb as f64);
    let assigned: Vec<u8> = (0..p)
        .map(|i| {
            let v = vec_at(i);
            u8::from(cosine(&v, &fg) > cosine(&v, &bg))
        })
        .collect();
    let small_pred = LabelMap::new(&[h, w], assigned)?;
    let pred = resize_nearest(&small_pred, (rh, rw));
    let binary_ref = LabelMap::new(&[rh, rw], reference.data().iter().map(|&l| u8::from(l > 0)).collect())?;
    Ok(Some(dice(&pred, &binary_ref, 2)?))
}

/// Mean defined SA over the given feature maps.
pub fn mean_sa<T: Scalar>(layers: &[&Tensor<T>], reference: &LabelMap) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for f in layers {
        if let Some(v) = protoseg_sa(f, reference)? {
            vals.push(v);
        }
    }
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(rows: &[&[u8]]) -> LabelMap {
        let w = rows[0].len();
        LabelMap::new(&[rows.len(), w], rows.concat()).unwrap()
    }

    #[test]
    fn hand_counted_pair() {
        let p = lm(&[&[1, 1], &[0, 0]]);
        let g = lm(&[&[1, 0], &[0, 0]]);
        let m = metrics(&p, &g, 2).unwrap();
        assert_eq!(m.dice, 2.0 / 3.0);
        assert_eq!(m.jaccard, 0.5);
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.sensitivity, 1.0);
        assert_eq!(m.specificity, 2.0 / 3.0);
    }

    #[test]
    fn identity_and_disjoint() {
        let a = lm(&[&[1, 0], &[0, 1]]);
        let b = lm(&[&[0, 1], &[1, 0]]);
        let m = metrics(&a, &a, 2).unwrap();
        assert_eq!(m.values(), [1.0; 5]);
        assert_eq!(dice(&a, &b, 2).unwrap(), 0.0);
        assert_eq!(confidence_score(&a, &b, 2).unwrap(), 0.0);
    }

    #[test]
    fn all_background_agreement() {
        let z = LabelMap::zeros(&[4, 4]);
        let m = metrics(&z, &z, 2).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.specificity, 1.0);
        assert_eq!(m.dice, 1.0);
        assert_eq!(m.sensitivity, 1.0);
    }

    #[test]
    fn undefined_sensitivity_penalizes_false_positives() {
        let p = lm(&[&[1, 0]]);
        let g = lm(&[&[0, 0]]);
        assert_eq!(sensitivity(&p, &g, 2).unwrap(), 0.0);
        assert_eq!(dice(&p, &g, 2).unwrap(), 0.0);
    }

    #[test]
    fn multi_class_is_macro_averaged() {
        let p = lm(&[&[1, 2, 0, 0]]);
        let g = lm(&[&[1, 0, 0, 0]]);
        // class 1 perfect, class 2 spurious
        assert_eq!(dice(&p, &g, 3).unwrap(), 0.5);
        assert!(dice(&p, &g, 2).is_err());
    }

    #[test]
    fn half_disagreement_gives_half_confidence() {
        let a = lm(&[&[1, 1, 1, 1, 0, 0, 0, 0]]);
        let b = lm(&[&[1, 1, 0, 0, 1, 1, 0, 0]]);
        assert_eq!(confidence_score(&a, &b, 2).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(dice(&LabelMap::zeros(&[2, 2]), &LabelMap::zeros(&[2, 3]), 2).is_err());
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn coverage_cases() {
        let c = coverage_curve(&[0.9, 0.5, 0.1], &[0.8, 0.6, 0.2], &[200.0 / 3.0, 100.0]).unwrap();
        assert!((c[0].1 - 0.7).abs() < 1e-12);
        assert!((c[1].1 - (0.8 + 0.6 + 0.2) / 3.0).abs() < 1e-12);
        let flat = coverage_curve(&[0.5; 4], &[0.4, 0.4, 0.4, 0.4], &DEFAULT_DECILES).unwrap();
        assert!(flat.iter().all(|&(_, m)| (m - 0.4).abs() < 1e-12));
        assert!(coverage_curve(&[], &[], &[50.0]).is_err());
        assert!(coverage_curve(&[0.1], &[0.1], &[0.0]).is_err());
    }

    #[test]
    fn ties_keep_input_order() {
        let c = coverage_curve(&[0.5, 0.5, 0.5], &[1.0, 0.0, 0.0], &[30.0]).unwrap();
        assert_eq!(c[0].1, 1.0);
    }

    fn images(scores: &[(&str, LabelMap, LabelMap)]) -> Vec<ImageScales> {
        let two = Scale::new(2).unwrap();
        scores
            .iter()
            .map(|(id, a, b)| ImageScales {
                id: id.to_string(),
                labels: [(Scale::ONE, a.clone()), (two, b.clone())].into(),
                ground_truth: Some(a.clone()),
            })
            .collect()
    }

    #[test]
    fn ranking_is_difficult_first() {
        let full = lm(&[&[1, 1, 1, 1, 1]]);
        let a = images(&[("easy", full.clone(), full.clone()), ("hard", full.clone(), lm(&[&[1, 0, 0, 0, 0]]))]);
        let pair = (Scale::ONE, Scale::new(2).unwrap());
        let r = rank_by_difficulty(&a, &[pair], 0, 2, &DEFAULT_DECILES).unwrap();
        assert_eq!(r.ranking, vec!["hard", "easy"]);
        assert_eq!(r.entries[1].rank, 1);
        assert!(r.ranking_csv().starts_with("rank,id,c12,dice\n1,hard,"));

        let single = rank_by_difficulty(&a[..1], &[pair], 0, 2, &DEFAULT_DECILES).unwrap();
        assert_eq!(single.ranking, vec!["easy"]);
        assert_eq!(single.pearson, vec![None]);

        assert!(rank_by_difficulty(&a, &[(Scale::ONE, Scale::new(4).unwrap())], 0, 2, &[]).is_err());
        assert!(rank_by_difficulty(&a, &[(Scale::ONE, Scale::ONE)], 0, 2, &[]).is_err());
    }

    #[test]
    fn protoseg_on_mask_features_is_perfect() {
        let mask = LabelMap::new(&[8, 8], (0..64).map(|i| u8::from(i % 8 < 3 && i / 8 > 2)).collect()).unwrap();
        let mut f = Tensor::<f64>::zeros(&[3, 8, 8]);
        for (i, &l) in mask.data().iter().enumerate() {
            f.data_mut()[i] = l as f64;
        }
        assert_eq!(protoseg_sa(&f, &mask).unwrap(), Some(1.0));

        let constant = Tensor::<f64>::full(&[3, 8, 8], 0.7);
        assert_eq!(protoseg_sa(&constant, &mask).unwrap(), Some(0.0));

        assert_eq!(protoseg_sa(&f, &LabelMap::zeros(&[8, 8])).unwrap(), None);
    }

    #[test]
    fn protoseg_downsamples_reference() {
        let mask = LabelMap::new(&[4, 4], vec![1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let f = Tensor::<f64>::from_vec(&[2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(protoseg_sa(&f, &mask).unwrap(), Some(1.0));
    }

    fn binary_map() -> impl Strategy<Value = LabelMap> {
        proptest::collection::vec(0u8..2, 36).prop_map(|d| LabelMap::new(&[6, 6], d).unwrap())
    }

    proptest! {
        #[test]
        fn confidence_is_symmetric_and_bounded(a in binary_map(), b in binary_map()) {
            let ab = confidence_score(&a, &b, 2).unwrap();
            prop_assert_eq!(ab, confidence_score(&b, &a, 2).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn jaccard_follows_from_dice(a in binary_map(), b in binary_map()) {
            let m = metrics(&a, &b, 2).unwrap();
            prop_assert!(m.jaccard <= m.dice);
            prop_assert!((m.jaccard - m.dice / (2.0 - m.dice)).abs() < 1e-12);
            for v in m.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
