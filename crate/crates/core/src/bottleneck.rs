//! Cross-patch global context at the encoder bottleneck.
//!
//! The deepest feature map of every patch is flattened into tokens, the
//! tokens of all `s²` patches are concatenated into one sequence, a learned
//! position table is added, and a stack of pre-norm transformer blocks mixes
//! information across patches. For an `H × W` input and `n` pooling stages
//! the sequence length is `s² · (H / 2ⁿs) · (W / 2ⁿs) = H·W / 2²ⁿ`,
//! whatever the scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::params::{normal, ParamId, ParamKind, ParamStore};
use crate::nn::{Graph, Var};
use crate::patchify::Scale;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig { num_layers: 4, num_heads: 8, mlp_ratio: 4.0 }
    }
}

impl TransformerConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.num_layers < 1 {
            return Err(invalid!("transformer needs at least one layer"));
        }
        if self.num_heads == 0 || !embed_dim.is_multiple_of(self.num_heads) {
            return Err(invalid!("embedding width {embed_dim} is not divisible by {} heads", self.num_heads));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(invalid!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn hidden_dim(&self, embed_dim: usize) -> usize {
        ((embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// Token count `H·W / 2^(2n)`; identical for every scale that divides the grid.
pub fn token_count(input: (usize, usize), n_pool: usize) -> usize {
    (input.0 >> n_pool) * (input.1 >> n_pool)
}

/// How a token sequence maps back onto patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub scale: Scale,
    pub h: usize,
    pub w: usize,
}

impl PatchLayout {
    pub fn token_count(&self) -> usize {
        self.scale.patch_count() * self.h * self.w
    }
}

/// One image's tokens `[N_tok, C_b]` with their patch layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub layout: PatchLayout,
}

/// `[B·s², C, h, w]` → `[B, s²·h·w, C]`; patch row-major, then pixel row-major.
pub fn patches_to_tokens<T: Scalar>(x: &Tensor<T>, s: Scale) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4();
    let per = s.patch_count();
    if n % per != 0 {
        return Err(invalid!("{n} patches is not a multiple of {per}"));
    }
    let b = n / per;
    let p = h * w;
    let ntok = per * p;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for patch in 0..n {
        let (bi, pi) = (patch / per, patch % per);
        for ch in 0..c {
            let plane = &src[(patch * c + ch) * p..][..p];
            for (i, &v) in plane.iter().enumerate() {
                out[(bi * ntok + pi * p + i) * c + ch] = v;
            }
        }
    }
    Tensor::from_vec(&[b, ntok, c], out)
}

/// `[B, s²·h·w, C]` → `[B·s², C, h, w]`.
pub fn tokens_to_patches<T: Scalar>(x: &Tensor<T>, s: Scale, (h, w): (usize, usize)) -> Result<Tensor<T>> {
    let [b, ntok, c] = *x.shape() else {
        return Err(invalid!("expected [B, N, C] tokens, got {:?}", x.shape()));
    };
    let per = s.patch_count();
    let p = h * w;
    if ntok != per * p {
        return Err(invalid!("token count {ntok} does not match layout of {per} patches of {h}x{w} ({})", per * p));
    }
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for patch in 0..b * per {
        let (bi, pi) = (patch / per, patch % per);
        for ch in 0..c {
            let plane = &mut out[(patch * c + ch) * p..][..p];
            for (i, v) in plane.iter_mut().enumerate() {
                *v = src[(bi * ntok + pi * p + i) * c + ch];
            }
        }
    }
    Tensor::from_vec(&[b * per, c, h, w], out)
}

/// Concatenates the `s²` per-patch bottlenecks `[C_b, h, w]` of one image
/// into a token sequence, adding `position` (`[N_tok, C_b]`) when given.
pub fn tokenize<T: Scalar>(bottlenecks: &[Tensor<T>], position: Option<&Tensor<T>>) -> Result<TokenSequence<T>> {
    let scale = Scale::new((bottlenecks.len() as f64).sqrt().round() as usize)
        .ok()
        .filter(|s| s.patch_count() == bottlenecks.len())
        .ok_or_else(|| invalid!("{} bottlenecks do not form an s x s grid", bottlenecks.len()))?;
    let stacked = Tensor::stack(bottlenecks)?;
    let (_, c, h, w) = stacked.dims4();
    let tokens = patches_to_tokens(&stacked, scale)?;
    let ntok = tokens.shape()[1];
    let mut tokens = tokens.reshape(&[ntok, c])?;
    if let Some(pe) = position {
        if pe.shape() != tokens.shape() {
            return Err(invalid!("position table {:?} does not match tokens {:?}", pe.shape(), tokens.shape()));
        }
        tokens.add_assign(pe);
    }
    Ok(TokenSequence { tokens, layout: PatchLayout { scale, h, w } })
}

/// Exact inverse of the reshape in [`tokenize`]; any added position
/// embedding stays in the features.
pub fn detokenize<T: Scalar>(seq: &TokenSequence<T>) -> Result<Vec<Tensor<T>>> {
    let [ntok, c] = *seq.tokens.shape() else {
        return Err(invalid!("expected [N, C] tokens, got {:?}", seq.tokens.shape()));
    };
    let l = seq.layout;
    let batch = seq.tokens.clone().reshape(&[1, ntok, c])?;
    let patches = tokens_to_patches(&batch, l.scale, (l.h, l.w))?;
    Ok((0..l.scale.patch_count()).map(|i| patches.index_axis0(i)).collect())
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Stack of pre-norm transformer blocks plus the learned position table.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub embed_dim: usize,
    pub position: ParamId,
    blocks: Vec<Block>,
}

impl Transformer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        config: &TransformerConfig,
        embed_dim: usize,
        num_tokens: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(embed_dim)?;
        let hidden = config.hidden_dim(embed_dim);
        let position =
            store.add(format!("{path}.position"), ParamKind::Trainable, normal(&[num_tokens, embed_dim], 0.02, rng));
        let blocks = (0..config.num_layers)
            .map(|l| {
                let p = format!("{path}.block{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), embed_dim),
                    qkv: Linear::new(store, &format!("{p}.qkv"), embed_dim, 3 * embed_dim, rng),
                    proj: Linear::new(store, &format!("{p}.proj"), embed_dim, embed_dim, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), embed_dim),
                    fc1: Linear::new(store, &format!("{p}.fc1"), embed_dim, hidden, rng),
                    fc2: Linear::new(store, &format!("{p}.fc2"), hidden, embed_dim, rng),
                }
            })
            .collect();
        Ok(Transformer { config: config.clone(), embed_dim, position, blocks })
    }

    /// Output projections of both residual branches in every block.
    pub fn branch_output_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.proj.weight, b.proj.bias, b.fc2.weight, b.fc2.bias]).collect()
    }

    pub fn num_tokens<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.position).shape()[0]
    }

    /// Adds the position table to `[B, N, C]` tokens.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        let pe = g.param(self.position);
        g.add_rows(tokens, pe)
    }

    /// Runs every block on `[B, N, C]` tokens.
    pub fn blocks_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        let d = *g.shape(x).last().unwrap_or(&0);
        if d != self.embed_dim {
            return Err(invalid!("token width {d} does not match transformer width {}", self.embed_dim));
        }
        for block in &self.blocks {
            let h = block.ln1.forward(g, x)?;
            let qkv = block.qkv.forward(g, h)?;
            let att = g.self_attention(qkv, self.config.num_heads)?;
            let att = block.proj.forward(g, att)?;
            x = g.add(x, att)?;

            let h = block.ln2.forward(g, x)?;
            let h = block.fc1.forward(g, h)?;
            let h = g.gelu(h);
            let h = block.fc2.forward(g, h)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    /// Applies the blocks to one token sequence outside of training.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, seq: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        let [n, c] = *seq.tokens.shape() else {
            return Err(invalid!("expected [N, C] tokens, got {:?}", seq.tokens.shape()));
        };
        let mut g = Graph::new(store, false);
        let x = g.input(seq.tokens.clone().reshape(&[1, n, c])?);
        let y = self.blocks_forward(&mut g, x)?;
        Ok(TokenSequence { tokens: g.value(y).clone().reshape(&[n, c])?, layout: seq.layout })
    }
}
