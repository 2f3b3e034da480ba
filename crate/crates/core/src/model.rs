//! The full segmenter: patch split → shared encoder → cross-patch
//! transformer → shared decoder → stitch, run at one or several scales with
//! a single parameter set.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::bottleneck::{token_count, Transformer, TransformerConfig};
use crate::error::{invalid, Result};
use crate::evaluate;
use crate::nn::{Graph, ParamStore, Var};
use crate::patchify::Scale;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetmerConfig {
    pub backbone: BackboneConfig,
    pub transformer: TransformerConfig,
    pub scales: Vec<Scale>,
    pub input_size: (usize, usize),
    pub use_transformer: bool,
}

impl Default for UNetmerConfig {
    fn default() -> Self {
        UNetmerConfig {
            backbone: BackboneConfig::default(),
            transformer: TransformerConfig::default(),
            scales: vec![Scale::ONE, Scale::new(2).expect("2 is a valid scale")],
            input_size: (64, 64),
            use_transformer: true,
        }
    }
}

impl UNetmerConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.scales.is_empty() {
            return Err(invalid!("at least one scale is required"));
        }
        for (i, s) in self.scales.iter().enumerate() {
            if self.scales[..i].contains(s) {
                return Err(invalid!("scale {s} listed twice"));
            }
        }
        let s_max = self.max_scale().get();
        self.check_size(self.input_size, s_max)?;
        if self.use_transformer {
            self.transformer.validate(self.backbone.bottleneck_channels())?;
        }
        Ok(())
    }

    pub fn max_scale(&self) -> Scale {
        self.scales.iter().copied().max().unwrap_or(Scale::ONE)
    }

    /// Number of tokens the bottleneck sequence holds at every scale.
    pub fn num_tokens(&self) -> usize {
        token_count(self.input_size, self.backbone.n_pool)
    }

    fn check_size(&self, (h, w): (usize, usize), s: usize) -> Result<()> {
        let unit = s << self.backbone.n_pool;
        for (name, v) in [("height", h), ("width", w)] {
            if v == 0 || v % unit != 0 {
                return Err(invalid!("{name} {v} is not divisible by scale {s} x 2^{} = {unit}", self.backbone.n_pool));
            }
        }
        Ok(())
    }
}

/// Logits and label maps `B_{s}` for every requested scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleOutput<T> {
    pub maps: BTreeMap<Scale, Tensor<T>>,
    pub labels: BTreeMap<Scale, LabelMap>,
}

impl<T> MultiScaleOutput<T> {
    pub fn label(&self, s: Scale) -> Option<&LabelMap> {
        self.labels.get(&s)
    }
}

/// Per-pixel argmax of `[K, H, W]` logits; ties go to the lower class.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<LabelMap> {
    let [k, h, w] = *logits.shape() else {
        return Err(invalid!("expected [K, H, W] logits, got {:?}", logits.shape()));
    };
    let p = h * w;
    let d = logits.data();
    let labels = (0..p)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * p + i] > d[best * p + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(&[h, w], labels)
}

#[derive(Clone, Debug)]
pub struct UNetmer<T> {
    config: UNetmerConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    transformer: Option<Transformer>,
}

impl<T: Scalar> UNetmer<T> {
    /// Builds a freshly initialized model; weights depend only on `seed`.
    pub fn new(config: UNetmerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.backbone, &mut rng)?;
        let transformer = if config.use_transformer {
            Some(Transformer::new(
                &mut store,
                "transformer",
                &config.transformer,
                config.backbone.bottleneck_channels(),
                config.num_tokens(),
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(UNetmer { config, store, backbone, transformer })
    }

    pub fn config(&self) -> &UNetmerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn transformer(&self) -> Option<&Transformer> {
        self.transformer.as_ref()
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Records the pipeline for a `[B, C, H, W]` batch at scale `s` and
    /// returns `[B, K, H, W]` logits.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, x: Var, s: Scale) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4();
        if c != self.config.backbone.in_channels {
            return Err(invalid!("model expects {} input channels, got {c}", self.config.backbone.in_channels));
        }
        self.config.check_size((h, w), s.get())?;
        let patches = g.patch_split(x, s)?;
        let enc = self.backbone.encoder.forward(g, patches)?;
        let bottleneck = match &self.transformer {
            Some(t) => {
                if (h, w) != self.config.input_size {
                    return Err(invalid!(
                        "input {h}x{w} differs from the {}x{} the position table was built for",
                        self.config.input_size.0,
                        self.config.input_size.1
                    ));
                }
                let (_, _, bh, bw) = g.value(enc.bottleneck).dims4();
                let tokens = g.to_tokens(enc.bottleneck, s)?;
                let tokens = t.embed(g, tokens)?;
                let tokens = t.blocks_forward(g, tokens)?;
                g.tap("transformer.out", tokens);
                g.from_tokens(tokens, s, (bh, bw))?
            }
            None => enc.bottleneck,
        };
        let logits = self.backbone.decoder.forward(g, bottleneck, &enc.skips)?;
        g.patch_stitch(logits, s)
    }

    /// Inference-mode logits for `[C, H, W]` (→ `[K, H, W]`) or a batch
    /// `[B, C, H, W]` (→ `[B, K, H, W]`).
    pub fn forward_at_scale(&self, image: &Tensor<T>, s: Scale) -> Result<Tensor<T>> {
        if !matches!(image.rank(), 3 | 4) {
            return Err(invalid!("expected [C, H, W] or [B, C, H, W], got {:?}", image.shape()));
        }
        let squeeze = image.rank() == 3;
        let (n, c, h, w) = image.dims4();
        let mut g = Graph::new(&self.store, false);
        let x = g.input(image.clone().reshape(&[n, c, h, w])?);
        let y = self.forward_graph(&mut g, x, s)?;
        let out = g.value(y).clone();
        if squeeze {
            let shape = out.shape()[1..].to_vec();
            out.reshape(&shape)
        } else {
            Ok(out)
        }
    }

    /// Runs every configured scale on one `[C, H, W]` image.
    pub fn forward_multiscale(&self, image: &Tensor<T>) -> Result<MultiScaleOutput<T>> {
        self.forward_scales(image, &self.config.scales)
    }

    pub fn forward_scales(&self, image: &Tensor<T>, scales: &[Scale]) -> Result<MultiScaleOutput<T>> {
        let mut maps = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for &s in scales {
            let logits = self.forward_at_scale(image, s)?;
            labels.insert(s, argmax_labels(&logits)?);
            maps.insert(s, logits);
        }
        Ok(MultiScaleOutput { maps, labels })
    }

    /// Named intermediate feature maps of one `[C, H, W]` image at scale 1,
    /// ordered from the input side to the output side. Each entry is
    /// `[C_f, h_f, w_f]`.
    pub fn layer_features(&self, image: &Tensor<T>) -> Result<Vec<(String, Tensor<T>)>> {
        let (n, c, h, w) = image.dims4();
        if n != 1 {
            return Err(invalid!("layer features take a single image"));
        }
        let mut g = Graph::new(&self.store, false);
        g.record_taps();
        let x = g.input(image.clone().reshape(&[1, c, h, w])?);
        self.forward_graph(&mut g, x, Scale::ONE)?;
        let mut out = Vec::new();
        for (name, v) in g.taps() {
            let t = g.value(v);
            let t = if name == "transformer.out" {
                // [1, N, C] tokens back to the bottleneck grid
                let shape = g.value(v).shape();
                let (tn, tc) = (shape[1], shape[2]);
                let bh = h >> self.config.backbone.n_pool;
                let bw = w >> self.config.backbone.n_pool;
                debug_assert_eq!(tn, bh * bw);
                let d = t.data();
                Tensor::from_fn(&[tc, bh, bw], |i| d[(i % tn) * tc + i / tn])
            } else {
                let shape = t.shape()[1..].to_vec();
                t.clone().reshape(&shape)?
            };
            out.push((name, t));
        }
        Ok(out)
    }

    /// ProtoSeg ranking baseline: mean SA of the last two feature maps
    /// before the logits.
    pub fn protoseg_score(&self, image: &Tensor<T>, reference: &LabelMap) -> Result<Option<f64>> {
        let feats = self.layer_features(image)?;
        let deep: Vec<&Tensor<T>> =
            feats.iter().filter(|(name, _)| name != "decoder.logits").rev().take(2).map(|(_, t)| t).collect();
        evaluate::mean_sa(&deep, reference)
    }

    /// Replaces the parameter store, e.g. after loading a checkpoint; every
    /// path and shape must match.
    pub fn load_params(&mut self, store: ParamStore<T>) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(invalid!(
                "parameter count mismatch: expected {} arrays, got {}",
                self.store.len(),
                store.len()
            ));
        }
        for id in self.store.ids() {
            let path = self.store.path(id);
            if store.path(id) != path || store.get(id).shape() != self.store.get(id).shape() {
                return Err(invalid!(
                    "parameter {path} {:?} does not match {} {:?}",
                    self.store.get(id).shape(),
                    store.path(id),
                    store.get(id).shape()
                ));
            }
        }
        self.store = store;
        Ok(())
    }
}
