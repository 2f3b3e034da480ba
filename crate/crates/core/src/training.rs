//! Joint multi-scale training with Adam and a step-halving learning rate.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::write_bytes;
use crate::dataset::Sample;
use crate::error::{invalid, Error, Result};
use crate::evaluate;
use crate::model::{argmax_labels, UNetmer};
use crate::nn::{Adam, AdamConfig, Graph};
use crate::patchify::Scale;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

/// How the scale of each optimization step is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSchedule {
    /// `scales[step mod |scales|]`.
    #[default]
    RoundRobin,
    /// Uniform draw from the training RNG.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub scales: Vec<Scale>,
    pub seed: u64,
    pub loss: LossKind,
    pub scale_schedule: ScaleSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr0: 1e-4,
            lr_halving_period: 20,
            scales: vec![Scale::ONE, Scale::new(2).expect("2 is a valid scale")],
            seed: 0,
            loss: LossKind::CrossEntropy,
            scale_schedule: ScaleSchedule::RoundRobin,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(invalid!("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(invalid!("lr0 must be positive, got {}", self.lr0));
        }
        if self.lr_halving_period < 1 {
            return Err(invalid!("lr_halving_period must be at least 1"));
        }
        if self.scales.is_empty() {
            return Err(invalid!("at least one training scale is required"));
        }
        Ok(())
    }
}

/// `lr0 · 0.5^⌊epoch / period⌋`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let halvings = (epoch / config.lr_halving_period.max(1)) as i32;
    config.lr0 * 0.5f64.powi(halvings)
}

/// Scale used at optimization step `step`.
pub fn sample_scale(step: usize, scales: &[Scale], schedule: ScaleSchedule, rng: &mut impl Rng) -> Scale {
    assert!(!scales.is_empty(), "sample_scale needs at least one scale");
    match schedule {
        ScaleSchedule::RoundRobin => scales[step % scales.len()],
        ScaleSchedule::Random => scales[rng.random_range(0..scales.len())],
    }
}

/// Mean per-pixel cross-entropy of `[K, H, W]` or `[B, K, H, W]` logits
/// against the matching label maps.
pub fn loss<T: Scalar>(logits: &Tensor<T>, masks: &[&LabelMap]) -> Result<f64> {
    let (n, k, h, w) = logits.dims4();
    if masks.len() != n {
        return Err(invalid!("{} masks for a batch of {n}", masks.len()));
    }
    let mut labels = Vec::with_capacity(n * h * w);
    for m in masks {
        if m.shape() != [h, w] {
            return Err(invalid!("mask {:?} does not match logits {h}x{w}", m.shape()));
        }
        labels.extend_from_slice(m.data());
    }
    let store = crate::nn::ParamStore::<T>::new();
    let mut g = Graph::new(&store, false);
    let x = g.input(logits.clone().reshape(&[n, k, h, w])?);
    let l = g.cross_entropy(x, &labels)?;
    Ok(g.value(l).data()[0].as_f64())
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub current_lr: f64,
    pub best_val_dice: Option<f64>,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean Dice of the scale-1 prediction on the validation samples.
    pub val_dice_s1: Option<f64>,
    pub steps: usize,
    /// Steps taken at each configured scale, in configuration order.
    pub scale_steps: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn total_steps(&self) -> usize {
        self.records.iter().map(|r| r.steps).sum()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// `epoch lr train_loss val_dice_s1` per line, `-` when no validation
    /// set was given.
    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch lr train_loss val_dice_s1\n");
        for r in &self.records {
            let val = r.val_dice_s1.map_or_else(|| "-".to_string(), |d| format!("{d:.6}"));
            let _ = writeln!(out, "{} {:e} {:.6} {val}", r.epoch, r.lr, r.train_loss);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text().as_bytes())
    }
}

/// Notification passed to the epoch hook of [`train_with`].
pub struct EpochEvent<'a, T> {
    pub model: &'a UNetmer<T>,
    pub record: &'a EpochRecord,
    /// Validation Dice improved (or, without validation data, every epoch).
    pub is_best: bool,
}

/// Mean Dice of scale-1 predictions.
pub fn mean_dice_s1<T: Scalar>(model: &UNetmer<T>, samples: &[Sample<T>]) -> Result<f64> {
    let k = model.config().backbone.num_classes;
    let mut total = 0.0;
    for s in samples {
        let logits = model.forward_at_scale(&s.image, Scale::ONE)?;
        total += evaluate::dice(&argmax_labels(&logits)?, &s.mask, k)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn check_samples<T: Scalar>(model: &UNetmer<T>, samples: &[Sample<T>], scales: &[Scale]) -> Result<()> {
    let cfg = model.config();
    let s_max = scales.iter().map(|s| s.get()).max().unwrap_or(1);
    let unit = s_max << cfg.backbone.n_pool;
    for s in samples {
        s.validate(cfg.backbone.num_classes, unit)?;
        if s.image.shape()[0] != cfg.backbone.in_channels {
            return Err(invalid!(
                "sample {} has {} channels, model expects {}",
                s.id,
                s.image.shape()[0],
                cfg.backbone.in_channels
            ));
        }
        if cfg.use_transformer && s.size() != cfg.input_size {
            return Err(invalid!("sample {} is {:?}, model input size is {:?}", s.id, s.size(), cfg.input_size));
        }
    }
    Ok(())
}

pub fn train<T: Scalar>(
    model: &mut UNetmer<T>,
    train_samples: &[Sample<T>],
    val_samples: &[Sample<T>],
    config: &TrainConfig,
) -> Result<History> {
    train_with(model, train_samples, val_samples, config, |_| Ok(()))
}

/// Trains in place. Each step draws one scale, runs the batch at that scale,
/// back-propagates the stitched full-image cross-entropy and applies one
/// Adam update. `on_epoch` runs after every epoch.
pub fn train_with<T: Scalar>(
    model: &mut UNetmer<T>,
    train_samples: &[Sample<T>],
    val_samples: &[Sample<T>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(EpochEvent<'_, T>) -> Result<()>,
) -> Result<History> {
    config.validate()?;
    if train_samples.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    check_samples(model, train_samples, &config.scales)?;
    check_samples(model, val_samples, &[Scale::ONE])?;

    let mut adam = Adam::new(AdamConfig::default(), model.params());
    let mut state = TrainState {
        epoch: 0,
        step: 0,
        current_lr: config.lr0,
        best_val_dice: None,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        state.current_lr = lr_at_epoch(config, epoch);
        assert_eq!(state.current_lr, config.lr0 * 0.5f64.powi((epoch / config.lr_halving_period) as i32));
        order.shuffle(&mut state.rng);

        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut scale_steps = vec![0; config.scales.len()];
        for batch in order.chunks(config.batch_size) {
            let s = sample_scale(state.step, &config.scales, config.scale_schedule, &mut state.rng);
            if let Some(i) = config.scales.iter().position(|&x| x == s) {
                scale_steps[i] += 1;
            }
            let images: Vec<Tensor<T>> = batch.iter().map(|&i| train_samples[i].image.clone()).collect();
            let mut labels = Vec::new();
            for &i in batch {
                labels.extend_from_slice(train_samples[i].mask.data());
            }
            let x = Tensor::stack(&images)?;

            let (loss_value, grads, updates) = {
                let mut g = Graph::new(model.params(), true);
                let xv = g.input(x);
                let logits = model.forward_graph(&mut g, xv, s)?;
                let l = g.cross_entropy(logits, &labels)?;
                let loss_value = g.value(l).data()[0].as_f64();
                if !loss_value.is_finite() {
                    return Err(Error::Divergence { epoch, step: state.step, loss: loss_value });
                }
                let grads = g.backward(l).into_params();
                (loss_value, grads, g.take_buffer_updates())
            };
            adam.step(model.params_mut(), &grads, state.current_lr);
            for (id, value) in updates {
                model.params_mut().set(id, value)?;
            }
            if !model.params().ids().all(|id| model.params().get(id).all_finite()) {
                return Err(Error::Divergence { epoch, step: state.step, loss: f64::NAN });
            }
            log::debug!("epoch {epoch} step {} scale {s} loss {loss_value:.5}", state.step);
            loss_sum += loss_value;
            steps += 1;
            state.step += 1;
        }

        let val_dice_s1 = if val_samples.is_empty() { None } else { Some(mean_dice_s1(model, val_samples)?) };
        let is_best = match (val_dice_s1, state.best_val_dice) {
            (Some(d), Some(best)) => d > best,
            (Some(_), None) | (None, _) => true,
        };
        if is_best {
            state.best_val_dice = val_dice_s1;
        }
        let record = EpochRecord {
            epoch,
            lr: state.current_lr,
            train_loss: loss_sum / steps.max(1) as f64,
            val_dice_s1,
            steps,
            scale_steps,
        };
        log::info!(
            "epoch {epoch}: lr {:e} loss {:.4} val dice {}",
            record.lr,
            record.train_loss,
            val_dice_s1.map_or_else(|| "-".into(), |d| format!("{d:.4}"))
        );
        on_epoch(EpochEvent { model, record: &record, is_best })?;
        history.records.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr0: f64, period: usize) -> TrainConfig {
        TrainConfig { lr0, lr_halving_period: period, ..TrainConfig::default() }
    }

    #[test]
    fn lr_schedule_values() {
        let c = cfg(1e-4, 20);
        assert_eq!(lr_at_epoch(&c, 0), 1e-4);
        assert_eq!(lr_at_epoch(&c, 20), 5e-5);
        assert_eq!(lr_at_epoch(&c, 45), 2.5e-5);
    }

    #[test]
    fn round_robin_scales() {
        let s = |v: &[usize]| v.iter().map(|&x| Scale::new(x).unwrap()).collect::<Vec<_>>();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let two = s(&[1, 2]);
        let got: Vec<usize> =
            (0..4).map(|i| sample_scale(i, &two, ScaleSchedule::RoundRobin, &mut rng).get()).collect();
        assert_eq!(got, vec![1, 2, 1, 2]);
        assert_eq!(sample_scale(7, &s(&[1]), ScaleSchedule::RoundRobin, &mut rng).get(), 1);
        assert_eq!(sample_scale(6, &s(&[1, 2, 4, 8]), ScaleSchedule::RoundRobin, &mut rng).get(), 4);
        let all = s(&[1, 2, 4, 8]);
        for step in 0..50 {
            assert!(all.contains(&sample_scale(step, &all, ScaleSchedule::Random, &mut rng)));
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[3, 4, 4]);
        let mask = LabelMap::new(&[4, 4], (0..16).map(|i| (i % 3) as u8).collect()).unwrap();
        assert!((loss(&logits, &[&mask]).unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mask = LabelMap::new(&[2, 2], vec![0, 1, 1, 0]).unwrap();
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let logits = Tensor::<f64>::from_fn(&[2, 2, 2], |i| {
                let (c, p) = (i / 4, i % 4);
                if mask.data()[p] as usize == c {
                    margin
                } else {
                    0.0
                }
            });
            let l = loss(&logits, &[&mask]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::<f64>::from_fn(&[2, 4, 4], |_| rng.random_range(-3.0..3.0));
        let mask = LabelMap::new(&[4, 4], (0..16).map(|_| rng.random_range(0..2)).collect()).unwrap();
        let mut expect = 0.0;
        for p in 0..16 {
            let z: Vec<f64> = (0..2).map(|c| logits.data()[c * 16 + p]).collect();
            let lse = (z[0].exp() + z[1].exp()).ln();
            expect += lse - z[mask.data()[p] as usize];
        }
        expect /= 16.0;
        assert!((loss(&logits, &[&mask]).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::<f64>::zeros(&[2, 2, 2]);
        let mask = LabelMap::new(&[2, 2], vec![0, 1, 2, 0]).unwrap();
        assert!(loss(&logits, &[&mask]).is_err());
    }
}
