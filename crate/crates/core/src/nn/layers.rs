//! Parameter-owning layers that register themselves in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{kaiming, xavier, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        (c_in, c_out, k): (usize, usize, usize),
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight =
            store.add(format!("{path}.weight"), ParamKind::Trainable, kaiming(&[c_out, c_in, k, k], c_in * k * k, rng));
        let bias = bias.then(|| store.add(format!("{path}.bias"), ParamKind::Trainable, Tensor::zeros(&[c_out])));
        Conv2d { weight, bias, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{path}.gamma"), ParamKind::Trainable, Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{path}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{path}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: store.add(
                format!("{path}.running_var"),
                ParamKind::Buffer,
                Tensor::full(&[channels], T::one()),
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(x, gamma, beta, (self.running_mean, self.running_var))
    }
}

/// 2× up-sampling by a 2×2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        UpConv {
            weight: store.add(format!("{path}.weight"), ParamKind::Trainable, kaiming(&[c_in, c_out, 2, 2], c_in, rng)),
            bias: store.add(format!("{path}.bias"), ParamKind::Trainable, Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2x2(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.add(format!("{path}.weight"), ParamKind::Trainable, xavier(&[d_in, d_out], d_in, d_out, rng)),
            bias: store.add(format!("{path}.bias"), ParamKind::Trainable, Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{path}.gamma"), ParamKind::Trainable, Tensor::full(&[d], T::one())),
            beta: store.add(format!("{path}.beta"), ParamKind::Trainable, Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}
