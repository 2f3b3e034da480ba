//! Reverse-mode automatic differentiation over a recorded tape of tensor ops.

use crate::error::{invalid, Result};
use crate::nn::kernels::{self, ConvGeom};
use crate::nn::params::{ParamId, ParamStore};
use crate::patchify::{self, Scale};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LN_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT2x2 {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    /// `[N, C, H, W] * [N, 1, H, W]`
    MulGate {
        x: Var,
        gate: Var,
    },
    /// `[B, N, D] + [N, D]`
    AddRows {
        x: Var,
        rows: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    PatchSplit {
        x: Var,
        s: Scale,
    },
    PatchStitch {
        x: Var,
        s: Scale,
    },
    ToTokens {
        x: Var,
        s: Scale,
    },
    FromTokens {
        x: Var,
        s: Scale,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<u8>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to an [`Graph::input`] leaf, if any flowed to it.
    /// Intermediate gradients are released during the sweep.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

/// A tape of operations borrowing a model's parameters.
///
/// In training mode batch normalization uses batch statistics and records
/// running-statistic updates that the owner applies with
/// [`Graph::take_buffer_updates`].
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    train: bool,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
    taps: Option<Vec<(String, Var)>>,
}

fn zeros_like<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::zeros(t.shape())
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, train: bool) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            train,
            buffer_updates: Vec::new(),
            taps: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Starts recording named intermediate feature maps.
    pub fn record_taps(&mut self) {
        self.taps = Some(Vec::new());
    }

    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        if let Some(taps) = self.taps.as_mut() {
            taps.push((name.into(), v));
        }
    }

    pub fn taps(&self) -> Vec<(String, Var)> {
        self.taps.clone().unwrap_or_default()
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, value)
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(invalid!("conv weight {ws:?} incompatible with input channels {c}"));
        }
        let k = ws[2];
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid!("conv input {h}x{wd} smaller than kernel {k}"));
        }
        let geom = ConvGeom { n, c, h, w: wd, o: ws[0], k, pad };
        let out =
            kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let value = Tensor::from_vec(&[n, geom.o, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(Op::Conv2d { x, w, b, geom }, value))
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != c || ws[2] != 2 || ws[3] != 2 {
            return Err(invalid!("transposed conv weight {ws:?} incompatible with {c} channels"));
        }
        let o = ws[1];
        let out = kernels::conv_transpose2x2_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            (n, c, h, wd),
            o,
        );
        let value = Tensor::from_vec(&[n, o, 2 * h, 2 * wd], out)?;
        Ok(self.push(Op::ConvT2x2 { x, w, b }, value))
    }

    /// Batch normalization over `[N, C, H, W]`. `running` holds the
    /// (mean, var) buffers.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: (ParamId, ParamId)) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        let p = h * w;
        let eps = T::cast(BN_EPS);
        let use_batch = self.train && n * p > 1;
        let (mean, var) = if use_batch {
            let (mean, var) = kernels::channel_stats(self.value(x).data(), n, c, p);
            let m = T::cast(BN_MOMENTUM);
            let unbias = T::cast((n * p) as f64 / (n * p - 1) as f64);
            let rm = self.params.get(running.0);
            let rv = self.params.get(running.1);
            let new_mean = Tensor::from_fn(&[c], |i| (T::one() - m) * rm.data()[i] + m * mean[i]);
            let new_var = Tensor::from_fn(&[c], |i| (T::one() - m) * rv.data()[i] + m * var[i] * unbias);
            self.buffer_updates.push((running.0, new_mean));
            self.buffer_updates.push((running.1, new_var));
            (mean, var)
        } else {
            (self.params.get(running.0).data().to_vec(), self.params.get(running.1).data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(
            self.value(x).data(),
            (n, c, p),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::from_vec(self.shape(x), y)?;
        Ok(self.push(Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: use_batch }, value))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        if self.value(gamma).len() != d {
            return Err(invalid!("layer norm width {} vs input {d}", self.value(gamma).len()));
        }
        let (y, xhat, inv_std) = kernels::layernorm_forward(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::cast(LN_EPS),
        );
        let value = Tensor::from_vec(self.shape(x), y)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(Op::Sigmoid(x), value)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(Op::Gelu(x), value)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(invalid!("max pool needs even spatial size, got {h}x{w}"));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), (n, c, h, w));
        let value = Tensor::from_vec(&[n, c, h / 2, w / 2], out)?;
        Ok(self.push(Op::MaxPool2 { x, argmax }, value))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out = kernels::upsample2_forward(self.value(x).data(), (n, c, h, w));
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out).expect("upsample shape");
        self.push(Op::Upsample2(x), value)
    }

    /// Concatenates `[N, C_i, H, W]` tensors along channels.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let mut channels = 0;
        for &v in xs {
            let (n2, c2, h2, w2) = self.value(v).dims4();
            if (n2, h2, w2) != (n, h, w) {
                return Err(invalid!("concat mismatch: [{n2}, _, {h2}, {w2}] vs [{n}, _, {h}, {w}]"));
            }
            channels += c2;
        }
        let p = h * w;
        let mut out = Vec::with_capacity(n * channels * p);
        for ni in 0..n {
            for &v in xs {
                let (_, c, _, _) = self.value(v).dims4();
                out.extend_from_slice(&self.value(v).data()[ni * c * p..(ni + 1) * c * p]);
            }
        }
        let value = Tensor::from_vec(&[n, channels, h, w], out)?;
        Ok(self.push(Op::Concat(xs.to_vec()), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid!("add shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        let (gn, gc, gh, gw) = self.value(gate).dims4();
        if (gn, gc, gh, gw) != (n, 1, h, w) {
            return Err(invalid!("gate shape {:?} does not match {:?}", self.shape(gate), self.shape(x)));
        }
        let p = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * p;
                for i in 0..p {
                    out[off + i] = xv[off + i] * gv[ni * p + i];
                }
            }
        }
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(Op::MulGate { x, gate }, value))
    }

    /// Adds a `[N, D]` table to every batch entry of `[B, N, D]`.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rs = self.shape(rows).to_vec();
        if xs.len() != 3 || rs.as_slice() != &xs[1..] {
            return Err(invalid!("cannot add table {rs:?} to sequence {xs:?}"));
        }
        let table = self.value(rows).data();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(table.len()) {
            for (v, &t) in chunk.iter_mut().zip(table) {
                *v += t;
            }
        }
        Ok(self.push(Op::AddRows { x, rows }, value))
    }

    /// `x @ w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().expect("rank >= 1");
        if ws.len() != 2 || ws[0] != din {
            return Err(invalid!("linear weight {ws:?} incompatible with input width {din}"));
        }
        let dout = ws[1];
        let rows = self.value(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        let bias = self.value(b).data();
        for r in out.chunks_mut(dout) {
            r.copy_from_slice(bias);
        }
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din,
            1,
            self.value(w).data(),
            dout,
            1,
            T::one(),
            &mut out,
            dout,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    /// Multi-head self-attention core on packed `[B, N, 3D]` projections.
    pub fn self_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(3) {
            return Err(invalid!("attention expects [B, N, 3D], got {s:?}"));
        }
        let (b, n, d) = (s[0], s[1], s[2] / 3);
        if heads == 0 || d % heads != 0 {
            return Err(invalid!("embedding width {d} not divisible by {heads} heads"));
        }
        let (out, probs) = kernels::attention_forward(self.value(qkv).data(), b, n, d, heads);
        let value = Tensor::from_vec(&[b, n, d], out)?;
        Ok(self.push(Op::Attention { qkv, heads, probs }, value))
    }

    /// Attention weights recorded by a [`Graph::self_attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `[B, C, H, W]` → `[B·s², C, H/s, W/s]`, patches row-major per image.
    pub fn patch_split(&mut self, x: Var, s: Scale) -> Result<Var> {
        let value = patchify::split_batch(self.value(x), s)?;
        Ok(self.push(Op::PatchSplit { x, s }, value))
    }

    pub fn patch_stitch(&mut self, x: Var, s: Scale) -> Result<Var> {
        let value = patchify::stitch_batch(self.value(x), s)?;
        Ok(self.push(Op::PatchStitch { x, s }, value))
    }

    /// `[B·s², C, h, w]` → `[B, s²·h·w, C]`.
    pub fn to_tokens(&mut self, x: Var, s: Scale) -> Result<Var> {
        let value = crate::bottleneck::patches_to_tokens(self.value(x), s)?;
        Ok(self.push(Op::ToTokens { x, s }, value))
    }

    /// Inverse of [`Graph::to_tokens`] for a recorded per-patch grid `(h, w)`.
    pub fn from_tokens(&mut self, x: Var, s: Scale, hw: (usize, usize)) -> Result<Var> {
        let value = crate::bottleneck::tokens_to_patches(self.value(x), s, hw)?;
        Ok(self.push(Op::FromTokens { x, s }, value))
    }

    /// Mean per-pixel cross-entropy of `[N, K, H, W]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4();
        let p = h * w;
        if labels.len() != n * p {
            return Err(invalid!("{} labels for logits {:?}", labels.len(), self.shape(logits)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(invalid!("label {bad} out of range for {k} classes"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for ni in 0..n {
            for i in 0..p {
                let mut max = T::neg_infinity();
                for c in 0..k {
                    max = max.max(lv[(ni * k + c) * p + i]);
                }
                let mut z = T::zero();
                for c in 0..k {
                    let e = (lv[(ni * k + c) * p + i] - max).exp();
                    probs[(ni * k + c) * p + i] = e;
                    z += e;
                }
                for c in 0..k {
                    probs[(ni * k + c) * p + i] /= z;
                }
                let y = labels[ni * p + i] as usize;
                total += z.ln() + max - lv[(ni * k + y) * p + i];
            }
        }
        let loss = total / T::cast((n * p) as f64);
        Ok(self.push(Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, Tensor::scalar(loss)))
    }

    /// `Σ x ⊙ weights`; a generic scalar objective for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(invalid!("weights {:?} vs input {:?}", weights.shape(), self.shape(x)));
        }
        let s: T = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Op::WeightedSum { x, weights }, Tensor::scalar(s)))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dy, &mut grads, &mut param_grads);
            if matches!(self.nodes[idx].op, Op::Input) {
                grads[idx] = Some(dy);
            }
        }
        Gradients { nodes: grads, params: param_grads }
    }

    fn backward_node(
        &self,
        idx: usize,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        param_grads: &mut [Option<Tensor<T>>],
    ) {
        let take = |grads: &mut [Option<Tensor<T>>], v: Var| -> Tensor<T> {
            grads[v.0].take().unwrap_or_else(|| zeros_like(self.value(v)))
        };
        let put = |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| {
            grads[v.0] = Some(g);
        };
        // Accumulates into the gradient slot of `v` via the closure.
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:expr) => {{
                let v = $v;
                let mut t = take(grads, v);
                {
                    let $g = t.data_mut();
                    $body;
                }
                put(grads, v, t);
            }};
        }
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Param(id) => {
                let g = param_grads[id.0].get_or_insert_with(|| zeros_like(dy));
                g.add_assign(dy);
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = take(grads, *x);
                let mut dw = take(grads, *w);
                let mut db = b.map(|b| take(grads, b));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy.data(),
                    geom,
                    Some(dx.data_mut()),
                    Some(dw.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                put(grads, *x, dx);
                put(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    put(grads, *b, db);
                }
            }
            Op::ConvT2x2 { x, w, b } => {
                let dims = self.value(*x).dims4();
                let o = self.shape(*w)[1];
                let mut dx = take(grads, *x);
                let mut dw = take(grads, *w);
                let mut db = take(grads, *b);
                kernels::conv_transpose2x2_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy.data(),
                    dims,
                    o,
                    Some(dx.data_mut()),
                    Some(dw.data_mut()),
                    Some(db.data_mut()),
                );
                put(grads, *x, dx);
                put(grads, *w, dw);
                put(grads, *b, db);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = take(grads, *x);
                let mut dg = take(grads, *gamma);
                let mut db = take(grads, *beta);
                kernels::batchnorm_backward(
                    dy.data(),
                    xhat,
                    (n, c, h * w),
                    inv_std,
                    self.value(*gamma).data(),
                    *batch_stats,
                    Some(dx.data_mut()),
                    Some(dg.data_mut()),
                    Some(db.data_mut()),
                );
                put(grads, *x, dx);
                put(grads, *gamma, dg);
                put(grads, *beta, db);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *self.shape(*x).last().unwrap();
                let mut dx = take(grads, *x);
                let mut dg = take(grads, *gamma);
                let mut db = take(grads, *beta);
                kernels::layernorm_backward(
                    dy.data(),
                    xhat,
                    inv_std,
                    d,
                    self.value(*gamma).data(),
                    Some(dx.data_mut()),
                    Some(dg.data_mut()),
                    Some(db.data_mut()),
                );
                put(grads, *x, dx);
                put(grads, *gamma, dg);
                put(grads, *beta, db);
            }
            Op::Relu(x) => {
                let y = self.nodes[idx].value.as_ref().unwrap().data();
                with_grad!(*x, |dx| {
                    for i in 0..dx.len() {
                        if y[i] > T::zero() {
                            dx[i] += dy.data()[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.as_ref().unwrap().data();
                with_grad!(*x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += dy.data()[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                with_grad!(*x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += dy.data()[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                with_grad!(*x, |dx| {
                    for (&src, &g) in argmax.iter().zip(dy.data()) {
                        dx[src as usize] += g;
                    }
                });
            }
            Op::Upsample2(x) => {
                let dims = self.value(*x).dims4();
                with_grad!(*x, |dx| kernels::upsample2_backward(dy.data(), dims, dx));
            }
            Op::Concat(xs) => {
                let (n, _, h, w) = dy.dims4();
                let p = h * w;
                let total: usize = dy.shape()[1];
                let mut c0 = 0;
                for &v in xs {
                    let c = self.value(v).dims4().1;
                    with_grad!(v, |dx| {
                        for ni in 0..n {
                            let src = &dy.data()[(ni * total + c0) * p..][..c * p];
                            for (d, &s) in dx[ni * c * p..][..c * p].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    c0 += c;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    with_grad!(v, |dx| accumulate(dx, dy.data()));
                }
            }
            Op::MulGate { x, gate } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let p = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gate).data();
                with_grad!(*x, |dx| {
                    for ni in 0..n {
                        for ch in 0..c {
                            let off = (ni * c + ch) * p;
                            for i in 0..p {
                                dx[off + i] += dy.data()[off + i] * gv[ni * p + i];
                            }
                        }
                    }
                });
                with_grad!(*gate, |dg| {
                    for ni in 0..n {
                        for ch in 0..c {
                            let off = (ni * c + ch) * p;
                            for i in 0..p {
                                dg[ni * p + i] += dy.data()[off + i] * xv[off + i];
                            }
                        }
                    }
                });
            }
            Op::AddRows { x, rows } => {
                with_grad!(*x, |dx| accumulate(dx, dy.data()));
                with_grad!(*rows, |dr| {
                    let width = dr.len();
                    for chunk in dy.data().chunks(width) {
                        accumulate(dr, chunk);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let din = self.shape(*w)[0];
                let dout = self.shape(*w)[1];
                let rows = self.value(*x).len() / din;
                with_grad!(*b, |db| {
                    for r in dy.data().chunks(dout) {
                        accumulate(db, r);
                    }
                });
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                // dW += x^T dY ; dx += dY W^T
                with_grad!(*w, |dw| T::gemm(
                    din,
                    rows,
                    dout,
                    T::one(),
                    xv,
                    1,
                    din,
                    dy.data(),
                    dout,
                    1,
                    T::one(),
                    dw,
                    dout,
                    1
                ));
                with_grad!(*x, |dx| T::gemm(
                    rows,
                    dout,
                    din,
                    T::one(),
                    dy.data(),
                    dout,
                    1,
                    wv,
                    1,
                    dout,
                    T::one(),
                    dx,
                    din,
                    1
                ));
            }
            Op::Attention { qkv, heads, probs } => {
                let s = self.shape(*qkv).to_vec();
                let qv = self.value(*qkv).data();
                with_grad!(*qkv, |dq| kernels::attention_backward(
                    qv,
                    probs,
                    dy.data(),
                    s[0],
                    s[1],
                    s[2] / 3,
                    *heads,
                    dq
                ));
            }
            Op::PatchSplit { x, s } => {
                let back = patchify::stitch_batch(dy, *s).expect("split gradient stitches");
                with_grad!(*x, |dx| accumulate(dx, back.data()));
            }
            Op::PatchStitch { x, s } => {
                let back = patchify::split_batch(dy, *s).expect("stitch gradient splits");
                with_grad!(*x, |dx| accumulate(dx, back.data()));
            }
            Op::ToTokens { x, s } => {
                let (_, _, h, w) = self.value(*x).dims4();
                let back = crate::bottleneck::tokens_to_patches(dy, *s, (h, w)).expect("token gradient");
                with_grad!(*x, |dx| accumulate(dx, back.data()));
            }
            Op::FromTokens { x, s } => {
                let back = crate::bottleneck::patches_to_tokens(dy, *s).expect("token gradient");
                with_grad!(*x, |dx| accumulate(dx, back.data()));
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let (n, k, h, w) = self.value(*logits).dims4();
                let p = h * w;
                let scale = dy.data()[0] / T::cast((n * p) as f64);
                with_grad!(*logits, |dl| {
                    for ni in 0..n {
                        for c in 0..k {
                            for i in 0..p {
                                let j = (ni * k + c) * p + i;
                                let target = if labels[ni * p + i] as usize == c { T::one() } else { T::zero() };
                                dl[j] += scale * (probs[j] - target);
                            }
                        }
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                let g = dy.data()[0];
                with_grad!(*x, |dx| {
                    for (d, &w) in dx.iter_mut().zip(weights.data()) {
                        *d += g * w;
                    }
                });
            }
        }
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
