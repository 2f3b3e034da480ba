//! Run configuration: a TOML file whose keys the command-line flags mirror.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unetmer::backbone::Variant;
use unetmer::dataset::{PreprocessSpec, Split, SyntheticSpec};
use unetmer::model::UNetmerConfig;
use unetmer::patchify::Scale;
use unetmer::training::TrainConfig;
use unetmer::{Error, Result};

pub const SEED_ENV: &str = "UNETMER_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    /// Trailing fraction of the samples assigned to the test split.
    pub test_fraction: f64,
    pub spec: SyntheticSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 0, count: 200, test_fraction: 0.2, spec: SyntheticSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub backbones: Vec<Variant>,
    pub scale_sets: Vec<Vec<Scale>>,
    pub transformer: Vec<bool>,
    /// Runs trained concurrently.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let s = |v: &[usize]| v.iter().map(|&x| Scale::new(x).expect("valid scale")).collect();
        SweepConfig {
            backbones: vec![Variant::Unet],
            scale_sets: vec![s(&[1]), s(&[1, 2])],
            transformer: vec![true, false],
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Scale pair `(i, j)` ordering the confidence ranking.
    pub pair: Option<(Scale, Scale)>,
    /// Trailing fraction of the training split held out to pick the best
    /// checkpoint.
    pub val_fraction: Option<f64>,
    /// Split scored by `eval` and `rank`; defaults to test.
    pub split: Option<Split>,
    /// `eval`: score every configured scale, not just scale 1.
    pub per_scale: bool,
    /// `rank`: also score images with the ProtoSeg baseline.
    pub protoseg: bool,
    /// `rank`: behave as if no ground truth were available.
    pub ignore_ground_truth: bool,
    /// Defaults to the manifest modality's standard pipeline.
    pub preprocess: Option<PreprocessSpec>,
    /// Checked against the checkpoint by `eval` and `rank` when present.
    pub model: Option<UNetmerConfig>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(format!("cannot serialize config: {e}")))
    }

    /// The seed from the environment wins over file and flags.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.train.seed = seed;
            self.synth.seed = seed;
        }
        Ok(())
    }

    pub fn model_or_default(&mut self) -> &mut UNetmerConfig {
        self.model.get_or_insert_with(UNetmerConfig::default)
    }

    pub fn val_fraction(&self) -> f64 {
        self.val_fraction.unwrap_or(0.1)
    }

    pub fn pair(&self) -> (Scale, Scale) {
        self.pair.unwrap_or((Scale::ONE, Scale::new(2).expect("valid scale")))
    }

    pub fn split(&self) -> Split {
        self.split.unwrap_or(Split::Test)
    }

    pub fn require_manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Validation("no manifest given (--manifest or `manifest` key)".into()))
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Validation("no output directory given (--out or `out` key)".into()))
    }

    pub fn require_checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Validation("no checkpoint given (--checkpoint or `checkpoint` key)".into()))
    }

    /// Cross-field checks shared by training runs.
    pub fn validate_training(&self) -> Result<()> {
        let model = self.model.clone().unwrap_or_default();
        model.validate()?;
        self.train.validate()?;
        if let Some(s) = self.train.scales.iter().find(|s| !model.scales.contains(s)) {
            return Err(Error::Validation(format!(
                "training scale {s} is not among the model scales {:?}",
                model.scales.iter().map(|s| s.get()).collect::<Vec<_>>()
            )));
        }
        let v = self.val_fraction();
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Validation(format!("val_fraction {v} outside [0, 1)")));
        }
        if let Some(p) = &self.preprocess {
            p.validate()?;
        }
        Ok(())
    }
}
