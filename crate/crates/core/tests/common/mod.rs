//! Shared oracles for integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unetmer::backbone::{BackboneConfig, Variant};
use unetmer::bottleneck::TransformerConfig;
use unetmer::model::UNetmerConfig;
use unetmer::nn::{Graph, ParamStore, Var};
use unetmer::patchify::Scale;
use unetmer::Tensor;

/// Denominator floor: gradients that are structurally zero (a bias feeding
/// batch norm, a key bias under softmax) show only round-off in the central
/// difference, about 1e-11 on O(1) losses at `STEP`.
pub const REL_FLOOR: f64 = 1e-6;
pub const STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel || self.worst.is_empty() {
            self.max_rel = rel.max(self.max_rel);
            self.worst = format!("{what}: analytic {analytic:e} numeric {numeric:e}");
        }
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random objective weights scaled so the weighted sum stays O(1).
pub fn objective_weights(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let scale = 1.0 / (shape.iter().product::<usize>() as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

/// Picks up to `limit` element indices of a tensor of length `len`.
fn sample_indices(len: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..limit).map(|_| rng.random_range(0..len)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Compares reverse-mode gradients of the scalar built by `loss` with
/// central differences, for every input and (a sample of) every trainable
/// parameter.
pub fn gradcheck<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    train: bool,
    per_tensor: usize,
    loss: F,
) -> GradReport
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new(store, train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = loss(&mut g, &vars);
        g.value(root).data()[0]
    };

    let (input_grads, param_grads) = {
        let mut g = Graph::new(&*store, train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = loss(&mut g, &vars);
        let grads = g.backward(root);
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (ig, grads.into_params())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (k, grad) in input_grads.iter().enumerate() {
        for i in sample_indices(grad.len(), per_tensor, &mut rng) {
            let x0 = probe[k].data()[i];
            probe[k].data_mut()[i] = x0 + STEP;
            let up = eval(store, &probe);
            probe[k].data_mut()[i] = x0 - STEP;
            let down = eval(store, &probe);
            probe[k].data_mut()[i] = x0;
            report.record(format!("input{k}[{i}]"), grad.data()[i], (up - down) / (2.0 * STEP));
        }
    }

    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let len = store.get(id).len();
        let analytic = param_grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in sample_indices(len, per_tensor, &mut rng) {
            let p0 = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = p0 + STEP;
            let up = eval(store, inputs);
            store.get_mut(id).data_mut()[i] = p0 - STEP;
            let down = eval(store, inputs);
            store.get_mut(id).data_mut()[i] = p0;
            let what = format!("{}[{i}]", store.path(id));
            report.record(what, analytic.data()[i], (up - down) / (2.0 * STEP));
        }
    }
    report
}

/// Base width 2, two pooling levels, 16x16 input, one transformer layer.
pub fn tiny_unetmer(use_transformer: bool) -> UNetmerConfig {
    UNetmerConfig {
        backbone: BackboneConfig {
            variant: Variant::Unet,
            in_channels: 1,
            base_channels: 2,
            n_pool: 2,
            num_classes: 2,
        },
        transformer: TransformerConfig { num_layers: 1, num_heads: 2, mlp_ratio: 2.0 },
        scales: vec![Scale::ONE, Scale::new(2).unwrap()],
        input_size: (16, 16),
        use_transformer,
    }
}
