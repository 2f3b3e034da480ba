use crate::nn::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Adam {
            config,
            step: 0,
            m: (0..params.len()).map(|_| None).collect(),
            v: (0..params.len()).map(|_| None).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient keep their value but their moments still decay.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::cast(beta1), T::cast(beta2));
        let step_size = T::cast(lr / bc1);
        let inv_bc2 = T::cast(1.0 / bc2);
        let eps = T::cast(eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if params.kind(id) != ParamKind::Trainable {
                continue;
            }
            let i = id.index();
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let shape = g.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let w = params.get_mut(id);
            for (((wj, mj), vj), &gj) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mj = b1 * *mj + (T::one() - b1) * gj;
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                *wj -= step_size * *mj / ((*vj * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamKind::Trainable, Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Tensor::from_vec(&[2], vec![0.3, -5.0]).unwrap();
        adam.step(&mut store, &[Some(g)], 0.01);
        let w = store.get(id).data();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamKind::Trainable, Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..2000 {
            let w = store.get(id).data()[0];
            let g = Tensor::from_vec(&[1], vec![2.0 * (w - 0.5)]).unwrap();
            adam.step(&mut store, &[Some(g)], 0.01);
        }
        assert!((store.get(id).data()[0] - 0.5).abs() < 1e-2);
    }
}
