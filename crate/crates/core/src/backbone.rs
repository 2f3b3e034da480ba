//! Per-patch encoder/decoder backbones.
//!
//! All three variants share the same encoder: `n_pool + 1` double-conv
//! stages (conv → batch norm → ReLU, twice) with 2×2 max pooling between
//! them and channel width doubling at each stage. They differ in how the
//! decoder fuses the skip features:
//!
//! * `Unet` concatenates each skip with the up-sampled decoder feature.
//! * `AttentionUnet` first multiplies the skip by an additive attention gate
//!   driven by the up-sampled decoder feature.
//! * `UnetPlusPlus` builds the nested grid of dense skip nodes `X[i][j]`
//!   and predicts from the top-right node only.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::layers::{BatchNorm2d, Conv2d, UpConv};
use crate::nn::{Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Unet,
    AttentionUnet,
    Unetpp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Unet, Variant::AttentionUnet, Variant::Unetpp];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Unet => "unet",
            Variant::AttentionUnet => "attention_unet",
            Variant::Unetpp => "unetpp",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "unet" => Ok(Variant::Unet),
            "attention_unet" | "attunet" | "att_unet" => Ok(Variant::AttentionUnet),
            "unetpp" | "unet++" | "unet_pp" | "nested_unet" => Ok(Variant::Unetpp),
            other => Err(invalid!("unknown backbone variant {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_pool: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { variant: Variant::Unet, in_channels: 1, base_channels: 16, n_pool: 4, num_classes: 2 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pool < 1 {
            return Err(invalid!("n_pool must be at least 1"));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(invalid!("channel counts must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(invalid!("num_classes must lie in 2..=256, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Channel width of every encoder stage; the last entry is the bottleneck.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.n_pool).map(|i| self.base_channels << i).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.n_pool
    }

    /// Smallest patch side the encoder accepts.
    pub fn min_patch(&self) -> usize {
        1 << self.n_pool
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ConvBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv1: Conv2d::new(store, &format!("{path}.conv1"), (c_in, c_out, 3), false, rng),
            bn1: BatchNorm2d::new(store, &format!("{path}.bn1"), c_out),
            conv2: Conv2d::new(store, &format!("{path}.conv2"), (c_out, c_out, 3), false, rng),
            bn2: BatchNorm2d::new(store, &format!("{path}.bn2"), c_out),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.bn2.forward(g, h)?;
        Ok(g.relu(h))
    }
}

/// Additive attention gate: `skip * sigmoid(ψ(relu(W_g g + W_x skip)))`.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    w_gate: Conv2d,
    bn_gate: BatchNorm2d,
    w_skip: Conv2d,
    bn_skip: BatchNorm2d,
    psi: Conv2d,
    bn_psi: BatchNorm2d,
}

impl AttentionGate {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        gate_channels: usize,
        skip_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let inter = (skip_channels / 2).max(1);
        AttentionGate {
            w_gate: Conv2d::new(store, &format!("{path}.w_gate"), (gate_channels, inter, 1), true, rng),
            bn_gate: BatchNorm2d::new(store, &format!("{path}.bn_gate"), inter),
            w_skip: Conv2d::new(store, &format!("{path}.w_skip"), (skip_channels, inter, 1), true, rng),
            bn_skip: BatchNorm2d::new(store, &format!("{path}.bn_skip"), inter),
            psi: Conv2d::new(store, &format!("{path}.psi"), (inter, 1, 1), true, rng),
            bn_psi: BatchNorm2d::new(store, &format!("{path}.bn_psi"), 1),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, gate: Var, skip: Var) -> Result<Var> {
        let a = self.w_gate.forward(g, gate)?;
        let a = self.bn_gate.forward(g, a)?;
        let b = self.w_skip.forward(g, skip)?;
        let b = self.bn_skip.forward(g, b)?;
        let s = g.add(a, b)?;
        let s = g.relu(s);
        let s = self.psi.forward(g, s)?;
        let s = self.bn_psi.forward(g, s)?;
        let alpha = g.sigmoid(s);
        g.mul_gate(skip, alpha)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<ConvBlock>,
    n_pool: usize,
}

/// Graph handles for one encoder pass.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

impl Encoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let widths = cfg.widths();
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let c_in = if i == 0 { cfg.in_channels } else { widths[i - 1] };
                ConvBlock::new(store, &format!("encoder.stage{i}"), c_in, c, rng)
            })
            .collect();
        Encoder { stages, n_pool: cfg.n_pool }
    }

    /// Encodes a `[N, C, H_p, W_p]` batch of patches.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<EncodedVars> {
        let (_, _, h, w) = g.value(x).dims4();
        let min = 1usize << self.n_pool;
        if h < min || w < min {
            return Err(invalid!("patch smaller than 2^n: {h}x{w} < {min}x{min}"));
        }
        if h % min != 0 || w % min != 0 {
            return Err(invalid!("patch {h}x{w} not divisible by 2^n = {min}"));
        }
        let mut skips = Vec::with_capacity(self.n_pool);
        let mut cur = x;
        for (i, stage) in self.stages.iter().enumerate() {
            cur = stage.forward(g, cur)?;
            if i < self.n_pool {
                g.tap(format!("encoder.stage{i}"), cur);
                skips.push(cur);
                cur = g.max_pool2(cur)?;
            }
        }
        g.tap("encoder.bottleneck", cur);
        Ok(EncodedVars { skips, bottleneck: cur })
    }
}

#[derive(Clone, Debug)]
enum DecoderKind {
    Plain {
        ups: Vec<UpConv>,
        gates: Option<Vec<AttentionGate>>,
        blocks: Vec<ConvBlock>,
    },
    /// `nodes[i][j - 1]` is `X[i][j]`.
    Nested {
        nodes: Vec<Vec<ConvBlock>>,
    },
}

#[derive(Clone, Debug)]
pub struct Decoder {
    kind: DecoderKind,
    head: Conv2d,
    n_pool: usize,
}

impl Decoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let widths = cfg.widths();
        let n = cfg.n_pool;
        let kind = match cfg.variant {
            Variant::Unet | Variant::AttentionUnet => {
                let ups = (0..n)
                    .map(|i| UpConv::new(store, &format!("decoder.up{i}"), widths[i + 1], widths[i], rng))
                    .collect();
                let gates = (cfg.variant == Variant::AttentionUnet).then(|| {
                    (0..n)
                        .map(|i| AttentionGate::new(store, &format!("decoder.gate{i}"), widths[i], widths[i], rng))
                        .collect()
                });
                let blocks = (0..n)
                    .map(|i| ConvBlock::new(store, &format!("decoder.block{i}"), 2 * widths[i], widths[i], rng))
                    .collect();
                DecoderKind::Plain { ups, gates, blocks }
            }
            Variant::Unetpp => {
                let nodes = (0..n)
                    .map(|i| {
                        (1..=n - i)
                            .map(|j| {
                                let c_in = j * widths[i] + widths[i + 1];
                                ConvBlock::new(store, &format!("decoder.x{i}_{j}"), c_in, widths[i], rng)
                            })
                            .collect()
                    })
                    .collect();
                DecoderKind::Nested { nodes }
            }
        };
        let head = Conv2d::new(store, "decoder.head", (widths[0], cfg.num_classes, 1), true, rng);
        Decoder { kind, head, n_pool: n }
    }

    /// Whether the decoder carries nested dense skip pathways.
    pub fn is_nested(&self) -> bool {
        matches!(self.kind, DecoderKind::Nested { .. })
    }

    /// Decodes one batch of patches from their (possibly transformed)
    /// bottleneck and encoder skips into per-patch logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, bottleneck: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != self.n_pool {
            return Err(invalid!("decoder expects {} skips, got {}", self.n_pool, skips.len()));
        }
        let bshape = g.value(bottleneck).dims4();
        for (i, &s) in skips.iter().enumerate() {
            let (n, _, h, w) = g.value(s).dims4();
            let f = 1 << (self.n_pool - i);
            if n != bshape.0 || h != bshape.2 * f || w != bshape.3 * f {
                return Err(invalid!(
                    "skip {i} shape {:?} inconsistent with bottleneck {:?}",
                    g.shape(s),
                    g.shape(bottleneck)
                ));
            }
        }
        let top = match &self.kind {
            DecoderKind::Plain { ups, gates, blocks } => {
                let mut x = bottleneck;
                for i in (0..self.n_pool).rev() {
                    let up = ups[i].forward(g, x)?;
                    let skip = match gates {
                        Some(gates) => gates[i].forward(g, up, skips[i])?,
                        None => skips[i],
                    };
                    let cat = g.concat(&[skip, up])?;
                    x = blocks[i].forward(g, cat)?;
                    g.tap(format!("decoder.block{i}"), x);
                }
                x
            }
            DecoderKind::Nested { nodes } => {
                let n = self.n_pool;
                // grid[i][j] = X[i][j]
                let mut grid: Vec<Vec<Var>> =
                    (0..=n).map(|i| if i < n { vec![skips[i]] } else { vec![bottleneck] }).collect();
                for j in 1..=n {
                    for i in 0..=n - j {
                        let up = g.upsample2(grid[i + 1][j - 1]);
                        let mut inputs = grid[i][..j].to_vec();
                        inputs.push(up);
                        let cat = g.concat(&inputs)?;
                        let x = nodes[i][j - 1].forward(g, cat)?;
                        if i == 0 || i + j == n {
                            g.tap(format!("decoder.x{i}_{j}"), x);
                        }
                        grid[i].push(x);
                    }
                }
                grid[0][n]
            }
        };
        let logits = self.head.forward(g, top)?;
        g.tap("decoder.logits", logits);
        Ok(logits)
    }
}

/// Encoder bottleneck `τ` and skips `f` of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub skips: Vec<Tensor<T>>,
    pub bottleneck: Tensor<T>,
}

/// Weight-bearing encoder/decoder pair; applicable to any patch size that is
/// a multiple of `2^n_pool`.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Backbone {
            config: config.clone(),
            encoder: Encoder::new(store, config, rng),
            decoder: Decoder::new(store, config, rng),
        })
    }

    /// Encodes `[C, H_p, W_p]` or `[N, C, H_p, W_p]` patches in inference mode.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, patch: &Tensor<T>) -> Result<EncoderOutput<T>> {
        let squeeze = patch.rank() == 3;
        let mut g = Graph::new(store, false);
        let (n, c, h, w) = patch.dims4();
        let x = g.input(patch.clone().reshape(&[n, c, h, w])?);
        let enc = self.encoder.forward(&mut g, x)?;
        let pick = |v: Var| -> Result<Tensor<T>> {
            let t = g.value(v).clone();
            if squeeze {
                let s = t.shape()[1..].to_vec();
                t.reshape(&s)
            } else {
                Ok(t)
            }
        };
        Ok(EncoderOutput {
            skips: enc.skips.iter().map(|&s| pick(s)).collect::<Result<_>>()?,
            bottleneck: pick(enc.bottleneck)?,
        })
    }

    /// Decodes in inference mode; shapes follow [`Backbone::encode`].
    pub fn decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        bottleneck: &Tensor<T>,
        skips: &[Tensor<T>],
    ) -> Result<Tensor<T>> {
        let squeeze = bottleneck.rank() == 3;
        let mut g = Graph::new(store, false);
        let as4 = |t: &Tensor<T>| {
            let (n, c, h, w) = t.dims4();
            t.clone().reshape(&[n, c, h, w])
        };
        let b = g.input(as4(bottleneck)?);
        let s: Vec<Var> = skips.iter().map(|t| Ok(g.input(as4(t)?))).collect::<Result<_>>()?;
        let out = self.decoder.forward(&mut g, b, &s)?;
        let t = g.value(out).clone();
        if squeeze {
            let s = t.shape()[1..].to_vec();
            t.reshape(&s)
        } else {
            Ok(t)
        }
    }

    /// Full backbone on a batch of images (no patching, no transformer).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let enc = self.encoder.forward(g, x)?;
        self.decoder.forward(g, enc.bottleneck, &enc.skips)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(variant: Variant, base: usize, n_pool: usize) -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let cfg = BackboneConfig { variant, in_channels: 1, base_channels: base, n_pool, num_classes: 2 };
        let bb = Backbone::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (store, bb)
    }

    #[test]
    fn attention_gates_add_parameters() {
        let (unet, _) = build(Variant::Unet, 4, 3);
        let (att, _) = build(Variant::AttentionUnet, 4, 3);
        let (pp, bb) = build(Variant::Unetpp, 4, 3);
        assert!(att.trainable_count() > unet.trainable_count());
        assert!(bb.decoder.is_nested());
        // nested nodes X[i][j] for i + j <= n, j >= 1
        let nested = pp.paths().iter().filter(|p| p.starts_with("decoder.x") && p.ends_with("conv1.weight")).count();
        assert_eq!(nested, 6);
    }

    #[test]
    fn encode_shapes_and_small_patch_error() {
        let (store, bb) = build(Variant::Unet, 2, 4);
        let patch = Tensor::from_fn(&[1, 64, 64], |i| (i % 7) as f64);
        let out = bb.encode(&store, &patch).unwrap();
        assert_eq!(out.bottleneck.shape(), &[32, 4, 4]);
        let sizes: Vec<usize> = out.skips.iter().map(|s| s.shape()[1]).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8]);

        let err = bb.encode(&store, &Tensor::zeros(&[1, 8, 8])).unwrap_err();
        assert!(err.to_string().contains("patch smaller than 2^n"), "{err}");
    }

    #[test]
    fn decode_restores_patch_size_for_every_variant() {
        for v in Variant::ALL {
            let (store, bb) = build(v, 2, 2);
            let patch = Tensor::from_fn(&[1, 16, 12], |i| ((i * 13) % 5) as f64 - 2.0);
            let enc = bb.encode(&store, &patch).unwrap();
            let logits = bb.decode(&store, &enc.bottleneck, &enc.skips).unwrap();
            assert_eq!(logits.shape(), &[2, 16, 12], "{v}");
        }
    }

    #[test]
    fn decode_rejects_inconsistent_skips() {
        let (store, bb) = build(Variant::Unet, 2, 2);
        let enc = bb.encode(&store, &Tensor::zeros(&[1, 16, 16])).unwrap();
        assert!(bb.decode(&store, &enc.bottleneck, &enc.skips[..1]).is_err());
        let mut skips = enc.skips.clone();
        skips[0] = Tensor::zeros(&[2, 8, 8]);
        assert!(bb.decode(&store, &enc.bottleneck, &skips).is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let (mut store, bb) = build(Variant::Unet, 2, 2);
        for id in store.ids().collect::<Vec<_>>() {
            if store.path(id).starts_with("decoder.head") {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let tau = Tensor::zeros(&[8, 4, 4]);
        let skips = vec![Tensor::zeros(&[2, 16, 16]), Tensor::zeros(&[4, 8, 8])];
        let out = bb.decode(&store, &tau, &skips).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_patches_match_one_at_a_time() {
        let (store, bb) = build(Variant::AttentionUnet, 2, 2);
        let batch = Tensor::from_fn(&[4, 1, 8, 8], |i| ((i * 7919) % 23) as f64 / 11.0);
        let together = bb.encode(&store, &batch).unwrap();
        for p in 0..4 {
            let alone = bb.encode(&store, &batch.index_axis0(p)).unwrap();
            let slab = together.bottleneck.index_axis0(p);
            for (a, b) in alone.bottleneck.data().iter().zip(slab.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_are_buffers() {
        let (store, _) = build(Variant::Unet, 2, 2);
        for id in store.ids() {
            let running = store.path(id).contains("running_");
            assert_eq!(store.kind(id) == ParamKind::Buffer, running);
        }
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!("unetpp".parse::<Variant>().unwrap(), Variant::Unetpp);
        assert_eq!("attention-unet".parse::<Variant>().unwrap(), Variant::AttentionUnet);
        assert!("resnet".parse::<Variant>().is_err());
    }
}
