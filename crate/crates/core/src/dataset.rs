//! Image/mask corpora: manifests, preprocessing, volume slicing and a
//! synthetic ellipse generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{read_array, read_bytes, write_array, write_bytes, RawArray};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

/// One image `[C, H, W]` with its label mask `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T = f32> {
    pub image: Tensor<T>,
    pub mask: LabelMap,
    pub id: String,
    pub volume_key: Option<String>,
    pub slice_index: Option<usize>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(id: impl Into<String>, image: Tensor<T>, mask: LabelMap) -> Result<Self> {
        let s = Sample { image, mask, id: id.into(), volume_key: None, slice_index: None };
        s.check_shapes()?;
        Ok(s)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.shape()[0], self.mask.shape()[1])
    }

    fn check_shapes(&self) -> Result<()> {
        if self.image.rank() != 3 || self.mask.shape().len() != 2 {
            return Err(invalid!(
                "sample {}: expected image [C, H, W] and mask [H, W], got {:?} and {:?}",
                self.id,
                self.image.shape(),
                self.mask.shape()
            ));
        }
        if self.image.shape()[1..] != *self.mask.shape() {
            return Err(invalid!(
                "sample {}: image {:?} and mask {:?} differ spatially",
                self.id,
                self.image.shape(),
                self.mask.shape()
            ));
        }
        Ok(())
    }

    /// Checks shapes, labels `< num_classes` and divisibility of both sides
    /// by `unit`.
    pub fn validate(&self, num_classes: usize, unit: usize) -> Result<()> {
        self.check_shapes()?;
        let max = self.mask.max_label() as usize;
        if max >= num_classes {
            return Err(invalid!("sample {}: label {max} >= num_classes {num_classes}", self.id));
        }
        let (h, w) = self.size();
        if h % unit != 0 || w % unit != 0 {
            return Err(invalid!("sample {}: size {h}x{w} not divisible by {unit}", self.id));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            image: self.image.cast(),
            mask: self.mask.clone(),
            id: self.id.clone(),
            volume_key: self.volume_key.clone(),
            slice_index: self.slice_index,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "MR")]
    Mr,
    #[serde(rename = "US")]
    Us,
    #[serde(rename = "ENDO")]
    Endo,
    #[serde(rename = "SYNTH")]
    Synth,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Ct => "CT",
            Modality::Mr => "MR",
            Modality::Us => "US",
            Modality::Endo => "ENDO",
            Modality::Synth => "SYNTH",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "CT" => Modality::Ct,
            "MR" | "MRI" => Modality::Mr,
            "US" => Modality::Us,
            "ENDO" => Modality::Endo,
            "SYNTH" => Modality::Synth,
            other => return Err(invalid!("unknown modality {other:?}")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(invalid!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Paths relative to the manifest root.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub volume_key: Option<String>,
    pub slice_index: Option<usize>,
}

impl ManifestEntry {
    /// Stable identifier: the image file stem.
    pub fn id(&self) -> String {
        self.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// A parsed manifest file.
///
/// Format: a header line `version=1 modality=<M> num_classes=<K>`, then one
/// line per entry `image=<relpath> mask=<relpath> split=<train|test>
/// volume=<key|-> slice=<idx|->`. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub modality: Modality,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

fn parse_fields(line: &str) -> std::result::Result<BTreeMap<&str, &str>, String> {
    let mut out = BTreeMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
        if out.insert(k, v).is_some() {
            return Err(format!("duplicate key {k:?}"));
        }
    }
    Ok(out)
}

fn optional(v: &str) -> Option<&str> {
    (v != "-").then_some(v)
}

impl DatasetManifest {
    pub fn parse<'a>(text: &'a str, path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let perr = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or_else(|| invalid!("empty manifest"))?;
        let h = parse_fields(header).map_err(|m| perr(hline, m))?;
        fn field<'a>(m: &BTreeMap<&'a str, &'a str>, k: &str) -> std::result::Result<&'a str, String> {
            m.get(k).copied().ok_or_else(|| format!("missing {k}="))
        }
        let get = |m: &BTreeMap<&'a str, &'a str>, k: &str, line: usize| field(m, k).map_err(|e| perr(line, e));
        let version = get(&h, "version", hline)?;
        if version != "1" {
            return Err(perr(hline, format!("unsupported version {version}")));
        }
        let modality = get(&h, "modality", hline)?.parse().map_err(|e: Error| perr(hline, e.to_string()))?;
        let num_classes: usize =
            get(&h, "num_classes", hline)?.parse().map_err(|e| perr(hline, format!("num_classes: {e}")))?;
        if !(2..=256).contains(&num_classes) {
            return Err(perr(hline, format!("num_classes {num_classes} outside 2..=256")));
        }

        let mut entries = Vec::new();
        for (n, line) in lines {
            let f = parse_fields(line).map_err(|m| perr(n, m))?;
            let split = get(&f, "split", n)?.parse().map_err(|e: Error| perr(n, e.to_string()))?;
            let slice_index = match f.get("slice").copied().and_then(optional) {
                Some(s) => Some(s.parse().map_err(|e| perr(n, format!("slice: {e}")))?),
                None => None,
            };
            entries.push(ManifestEntry {
                image: PathBuf::from(get(&f, "image", n)?),
                mask: PathBuf::from(get(&f, "mask", n)?),
                split,
                volume_key: f.get("volume").copied().and_then(optional).map(str::to_string),
                slice_index,
            });
        }
        if entries.is_empty() {
            return Err(invalid!("empty manifest"));
        }
        let manifest = DatasetManifest { root, modality, num_classes, entries };
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> Result<()> {
        let mut seen: BTreeMap<&Path, Split> = BTreeMap::new();
        for e in &self.entries {
            for p in [&e.image, &e.mask] {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(invalid!("referenced file {} does not exist", full.display()));
                }
            }
            if let Some(prev) = seen.insert(&e.image, e.split) {
                if prev != e.split {
                    return Err(invalid!("{} appears in both splits", e.image.display()));
                }
            }
        }
        Ok(())
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.split).or_insert(0) += 1;
        }
        out
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_sample<T: Scalar>(&self, entry: &ManifestEntry) -> Result<Sample<T>> {
        let image = read_array(&self.root.join(&entry.image))?.to_tensor::<T>()?;
        let image = match image.rank() {
            2 => {
                let s = [1, image.shape()[0], image.shape()[1]];
                image.reshape(&s)?
            }
            _ => image,
        };
        let mask = read_array(&self.root.join(&entry.mask))?.to_labels()?;
        let mut s = Sample::new(entry.id(), image, mask)?;
        s.volume_key = entry.volume_key.clone();
        s.slice_index = entry.slice_index;
        let max = s.mask.max_label() as usize;
        if max >= self.num_classes {
            return Err(invalid!("{}: label {max} >= num_classes {}", entry.mask.display(), self.num_classes));
        }
        Ok(s)
    }

    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<Vec<Sample<T>>> {
        self.entries(split).map(|e| self.load_sample(e)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("version=1 modality={} num_classes={}\n", self.modality, self.num_classes);
        for e in &self.entries {
            out.push_str(&format!(
                "image={} mask={} split={} volume={} slice={}\n",
                e.image.display(),
                e.mask.display(),
                e.split,
                e.volume_key.as_deref().unwrap_or("-"),
                e.slice_index.map_or_else(|| "-".to_string(), |i| i.to_string()),
            ));
        }
        out
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "not valid UTF-8".into(),
    })?;
    DatasetManifest::parse(&text, path)
}

/// Writes `images/<id>.unma`, `masks/<id>.unma` and `manifest.txt` under
/// `dir` and returns the manifest path.
pub fn write_dataset<T: Scalar>(
    dir: &Path,
    samples: &[(Sample<T>, Split)],
    modality: Modality,
    num_classes: usize,
) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(samples.len());
    for (s, split) in samples {
        let image = PathBuf::from("images").join(format!("{}.unma", s.id));
        let mask = PathBuf::from("masks").join(format!("{}.unma", s.id));
        write_array(&dir.join(&image), &RawArray::from_tensor(&s.image))?;
        write_array(&dir.join(&mask), &RawArray::from_labels(&s.mask))?;
        entries.push(ManifestEntry {
            image,
            mask,
            split: *split,
            volume_key: s.volume_key.clone(),
            slice_index: s.slice_index,
        });
    }
    let manifest = DatasetManifest { root: dir.to_path_buf(), modality, num_classes, entries };
    let path = dir.join("manifest.txt");
    write_bytes(&path, manifest.to_text().as_bytes())?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    pub truncate_percentiles: Option<(f64, f64)>,
    pub normalize: bool,
    pub target_size: Option<(usize, usize)>,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec { truncate_percentiles: None, normalize: true, target_size: None }
    }
}

impl PreprocessSpec {
    /// Truncation to the 5–95 % range is applied to CT only.
    pub fn for_modality(modality: Modality, target_size: Option<(usize, usize)>) -> Self {
        PreprocessSpec {
            truncate_percentiles: (modality == Modality::Ct).then_some((5.0, 95.0)),
            normalize: true,
            target_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.truncate_percentiles {
            if !(0.0 <= lo && lo < hi && hi <= 100.0) {
                return Err(invalid!("truncation percentiles ({lo}, {hi}) must satisfy 0 <= low < high <= 100"));
            }
        }
        if let Some((h, w)) = self.target_size {
            if h == 0 || w == 0 {
                return Err(invalid!("target size must be positive"));
            }
        }
        Ok(())
    }
}

/// Percentile of `sorted` values by linear interpolation between order
/// statistics at rank `p/100 · (n − 1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Bilinear resampling of every channel with half-pixel centres.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, (oh, ow): (usize, usize)) -> Tensor<T> {
    let (_, c, h, w) = image.dims4();
    if (h, w) == (oh, ow) {
        return image.clone().reshape(&[c, h, w]).expect("same length");
    }
    let src = image.data();
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let x0 = (x.floor() as usize).min(n_in - 1);
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, oh, h);
            for x in 0..ow {
                let (x0, x1, fx) = coord(x, ow, w);
                let v = |yy: usize, xx: usize| plane[yy * w + xx].as_f64();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push(T::cast(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).expect("length matches")
}

/// Resize → optional percentile truncation → optional z-score, all per
/// image over every channel.
pub fn preprocess<T: Scalar>(sample: &Sample<T>, spec: &PreprocessSpec) -> Result<Sample<T>> {
    spec.validate()?;
    sample.check_shapes()?;
    let mut out = sample.clone();
    if let Some(size) = spec.target_size {
        if size != sample.size() {
            out.image = resize_bilinear(&sample.image, size);
            out.mask = crate::evaluate::resize_nearest(&sample.mask, size);
        }
    }
    let mut vals: Vec<f64> = out.image.data().iter().map(|v| v.as_f64()).collect();
    if let Some((lo, hi)) = spec.truncate_percentiles {
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        let (a, b) = (percentile(&sorted, lo), percentile(&sorted, hi));
        vals.iter_mut().for_each(|v| *v = v.clamp(a, b));
    }
    if spec.normalize {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var > 0.0 {
            var.sqrt()
        } else {
            log::warn!("sample {}: constant image, normalizing with std = 1", sample.id);
            1.0
        };
        vals.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
    out.image = Tensor::from_vec(out.image.shape(), vals.into_iter().map(T::cast).collect())?;
    Ok(out)
}

/// Splits a `[D, C, H, W]` volume and `[D, H, W]` mask volume into slices.
pub fn volume_to_slices<T: Scalar>(volume: &Tensor<T>, masks: &LabelMap, volume_key: &str) -> Result<Vec<Sample<T>>> {
    let (&[d, c, h, w], &[md, mh, mw]) = (volume.shape(), masks.shape()) else {
        return Err(invalid!(
            "expected [D, C, H, W] volume and [D, H, W] masks, got {:?} and {:?}",
            volume.shape(),
            masks.shape()
        ));
    };
    if (d, h, w) != (md, mh, mw) {
        return Err(invalid!("volume {:?} and mask volume {:?} disagree", volume.shape(), masks.shape()));
    }
    if d == 0 {
        return Err(invalid!("volume has no slices"));
    }
    (0..d)
        .map(|i| {
            let image = volume.index_axis0(i);
            let mask = LabelMap::new(&[h, w], masks.data()[i * h * w..(i + 1) * h * w].to_vec())?;
            debug_assert_eq!(image.shape(), &[c, h, w]);
            let mut s = Sample::new(format!("{volume_key}_{i:04}"), image, mask)?;
            s.volume_key = Some(volume_key.to_string());
            s.slice_index = Some(i);
            Ok(s)
        })
        .collect()
}

/// Places per-slice masks at their indices, which must be exactly `0..D`.
pub fn slices_to_volume(predictions: &[(usize, LabelMap)], volume_key: &str) -> Result<LabelMap> {
    if predictions.is_empty() {
        return Err(invalid!("volume {volume_key}: no slices"));
    }
    let shape = predictions[0].1.shape().to_vec();
    let [h, w] = shape[..] else {
        return Err(invalid!("volume {volume_key}: slices must be [H, W]"));
    };
    let d = predictions.len();
    let mut slots: Vec<Option<&LabelMap>> = vec![None; d];
    for (idx, m) in predictions {
        if m.shape() != shape.as_slice() {
            return Err(invalid!("volume {volume_key}: slice {idx} has shape {:?}", m.shape()));
        }
        match slots.get_mut(*idx) {
            Some(slot @ None) => *slot = Some(m),
            Some(Some(_)) => return Err(invalid!("volume {volume_key}: duplicate slice {idx}")),
            None => {}
        }
    }
    if let Some(missing) = slots.iter().position(Option::is_none) {
        return Err(invalid!("volume {volume_key}: missing slice {missing}"));
    }
    let mut data = Vec::with_capacity(d * h * w);
    for m in slots.into_iter().flatten() {
        data.extend_from_slice(m.data());
    }
    LabelMap::new(&[d, h, w], data)
}

/// Knobs of the ellipse generator beyond seed, count, size and contrast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub size: (usize, usize),
    /// Foreground offset above background, drawn uniformly per image.
    pub contrast_range: (f64, f64),
    pub noise_std: f64,
    /// Semi-axis bounds as fractions of the shorter side.
    pub radius_range: (f64, f64),
    pub max_ellipses: usize,
    /// Draw the sign of the offset at random per image.
    pub random_polarity: bool,
    /// Peak amplitude of a random linear intensity ramp across the image.
    pub bias_field: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: (64, 64),
            contrast_range: (1.0, 3.0),
            noise_std: 1.0,
            radius_range: (0.08, 0.25),
            max_ellipses: 3,
            random_polarity: false,
            bias_field: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h == 0 || w == 0 || h % 64 != 0 || w % 64 != 0 {
            return Err(invalid!("synthetic size {h}x{w} must be a positive multiple of 64"));
        }
        let (lo, hi) = self.contrast_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid!("contrast range ({lo}, {hi}) must be finite with low <= high"));
        }
        let (rlo, rhi) = self.radius_range;
        if !(0.0 < rlo && rlo <= rhi && rhi <= 0.5) {
            return Err(invalid!("radius range ({rlo}, {rhi}) must satisfy 0 < low <= high <= 0.5"));
        }
        if self.max_ellipses == 0 || !(self.noise_std >= 0.0) || !(self.bias_field >= 0.0) {
            return Err(invalid!("max_ellipses must be positive and noise/bias non-negative"));
        }
        Ok(())
    }

    /// Generates `n` single-channel samples; a pure function of `seed`,
    /// `n` and `self`.
    pub fn generate(&self, seed: u64, n: usize) -> Result<Vec<Sample<f32>>> {
        if n < 1 {
            return Err(invalid!("synthetic dataset needs n >= 1, got {n}"));
        }
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| self.one(&mut rng, format!("synth_{i:04}"))).collect()
    }

    fn one(&self, rng: &mut ChaCha8Rng, id: String) -> Result<Sample<f32>> {
        let (h, w) = self.size;
        let side = h.min(w) as f64;
        let count = rng.random_range(1..=self.max_ellipses);
        let mut mask = vec![0u8; h * w];
        for _ in 0..count {
            let a = rng.random_range(self.radius_range.0..=self.radius_range.1) * side;
            let b = rng.random_range(self.radius_range.0..=self.radius_range.1) * side;
            let margin = a.max(b) * 0.5;
            let cy = rng.random_range(margin..h as f64 - margin);
            let cx = rng.random_range(margin..w as f64 - margin);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (st, ct) = theta.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    let u = dx * ct + dy * st;
                    let v = -dx * st + dy * ct;
                    if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                        mask[y * w + x] = 1;
                    }
                }
            }
        }
        // an ellipse can never be empty: its centre pixel lies inside
        debug_assert!(mask.contains(&1));
        let (lo, hi) = self.contrast_range;
        let mut contrast = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        if self.random_polarity && rng.random_bool(0.5) {
            contrast = -contrast;
        }
        let ramp_angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (ry, rx) = ramp_angle.sin_cos();
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| invalid!("noise: {e}"))?;
        let image: Vec<f32> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let ty = (y as f64 + 0.5) / h as f64 - 0.5;
                let tx = (x as f64 + 0.5) / w as f64 - 0.5;
                let bias = self.bias_field * 2.0 * (ty * ry + tx * rx);
                let v = contrast * mask[i] as f64 + bias + noise.sample(rng);
                v as f32
            })
            .collect();
        Sample::new(id, Tensor::from_vec(&[1, h, w], image)?, LabelMap::new(&[h, w], mask)?)
    }
}

/// Ellipse corpus with default knobs: 1–3 ellipses per image, unit-variance
/// Gaussian noise and a foreground offset drawn from `contrast_range`.
pub fn make_synthetic_dataset(
    seed: u64,
    n: usize,
    size: (usize, usize),
    contrast_range: (f64, f64),
) -> Result<Vec<Sample<f32>>> {
    SyntheticSpec { size, contrast_range, ..SyntheticSpec::default() }.generate(seed, n)
}

/// Groups samples by volume key, keeping slices in index order.
pub fn group_volumes<T>(samples: &[Sample<T>]) -> BTreeMap<String, Vec<&Sample<T>>> {
    let mut out: BTreeMap<String, Vec<&Sample<T>>> = BTreeMap::new();
    for s in samples {
        if let Some(k) = &s.volume_key {
            out.entry(k.clone()).or_default().push(s);
        }
    }
    for v in out.values_mut() {
        v.sort_by_key(|s| s.slice_index);
    }
    out
}

/// Ids must be unique within a corpus.
pub fn check_unique_ids<T>(samples: &[Sample<T>]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(invalid!("duplicate sample id {}", s.id));
        }
    }
    Ok(())
}
