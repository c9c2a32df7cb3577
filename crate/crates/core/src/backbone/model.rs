//! Graph builders for the segmenter: patch embedding, pre-norm transformer
//! layers, grid prompt tokens, two-way decoder blocks and the mask head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{BackboneConfig, LN_EPS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterStore, Tensor, Var};

/// Extension points used by adaptation strategies. The default methods
/// leave the model untouched.
pub trait Adaptation {
    /// Transforms the input image before patch embedding.
    fn prepare_image(&self, _g: &mut Graph, image: Var) -> Result<Var> {
        Ok(image)
    }

    /// Replaces encoder block `depth` (1-based). `None` runs the plain block.
    fn encoder_block(
        &self,
        _g: &mut Graph,
        _depth: usize,
        _x: Var,
        _layer: &LayerVars,
        _cfg: &BackboneConfig,
    ) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// The frozen model with nothing attached.
pub struct Unadapted;

impl Adaptation for Unadapted {}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn insert_linear(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, out: usize, inp: usize) -> Result<()> {
    store.insert(format!("{prefix}/weight"), normal(rng, &[out, inp], 1.0 / (inp as f64).sqrt()), true)?;
    store.insert(format!("{prefix}/bias"), Tensor::zeros(&[out]), true)
}

fn insert_norm(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}/gamma"), Tensor::full(&[d], 1.0), true)?;
    store.insert(format!("{prefix}/beta"), Tensor::zeros(&[d]), true)
}

fn insert_attention(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> Result<()> {
    for p in ["q", "k", "v", "out"] {
        insert_linear(store, rng, &format!("{prefix}/{p}"), d, d)?;
    }
    Ok(())
}

/// Seeded random initialization of every backbone tensor. All entries start
/// trainable (pretraining); see [`crate::training::pretrain_backbone`].
pub fn init_store(cfg: &BackboneConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    let d = cfg.embed_dim;
    let f = cfg.patch_features();
    s.insert("embed/proj", normal(&mut rng, &[d, f], 1.0 / (f as f64).sqrt()), true)?;
    s.insert("embed/pos", normal(&mut rng, &[cfg.tokens(), d], 0.02), true)?;
    for k in 1..=cfg.layers {
        let p = format!("encoder/{k}");
        insert_norm(&mut s, &format!("{p}/norm1"), d)?;
        insert_attention(&mut s, &mut rng, &format!("{p}/attn"), d)?;
        insert_norm(&mut s, &format!("{p}/norm2"), d)?;
        insert_linear(&mut s, &mut rng, &format!("{p}/mlp/fc1"), cfg.mlp_hidden, d)?;
        insert_linear(&mut s, &mut rng, &format!("{p}/mlp/fc2"), d, cfg.mlp_hidden)?;
    }
    s.insert("prompt/offset", normal(&mut rng, &[d], 0.02), true)?;
    for b in 1..=cfg.decoder_blocks {
        for dir in ["image_to_prompt", "prompt_to_image"] {
            let p = format!("decoder/{b}/{dir}");
            insert_norm(&mut s, &format!("{p}/norm_q"), d)?;
            insert_norm(&mut s, &format!("{p}/norm_kv"), d)?;
            insert_attention(&mut s, &mut rng, &format!("{p}/attn"), d)?;
        }
    }
    insert_norm(&mut s, "decoder/norm", d)?;
    insert_linear(&mut s, &mut rng, "decoder/head/fc1", cfg.mask_hidden, d)?;
    insert_linear(&mut s, &mut rng, "decoder/head/fc2", 1, cfg.mask_hidden)?;
    Ok(s)
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: AffineVars,
    pub k: AffineVars,
    pub v: AffineVars,
    pub out: AffineVars,
}

/// Graph handles for one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub norm1: NormVars,
    pub attn: AttentionVars,
    pub norm2: NormVars,
    pub fc1: AffineVars,
    pub fc2: AffineVars,
    pub heads: usize,
}

fn affine(g: &mut Graph, s: &ParameterStore, p: &str) -> Result<AffineVars> {
    Ok(AffineVars {
        weight: g.param(s, &format!("{p}/weight"))?,
        bias: g.param(s, &format!("{p}/bias"))?,
    })
}

fn norm(g: &mut Graph, s: &ParameterStore, p: &str) -> Result<NormVars> {
    Ok(NormVars {
        gamma: g.param(s, &format!("{p}/gamma"))?,
        beta: g.param(s, &format!("{p}/beta"))?,
    })
}

fn attention_vars(g: &mut Graph, s: &ParameterStore, p: &str) -> Result<AttentionVars> {
    Ok(AttentionVars {
        q: affine(g, s, &format!("{p}/q"))?,
        k: affine(g, s, &format!("{p}/k"))?,
        v: affine(g, s, &format!("{p}/v"))?,
        out: affine(g, s, &format!("{p}/out"))?,
    })
}

impl LayerVars {
    pub fn bind(g: &mut Graph, store: &ParameterStore, cfg: &BackboneConfig, depth: usize) -> Result<Self> {
        let p = format!("encoder/{depth}");
        Ok(LayerVars {
            norm1: norm(g, store, &format!("{p}/norm1"))?,
            attn: attention_vars(g, store, &format!("{p}/attn"))?,
            norm2: norm(g, store, &format!("{p}/norm2"))?,
            fc1: affine(g, store, &format!("{p}/mlp/fc1"))?,
            fc2: affine(g, store, &format!("{p}/mlp/fc2"))?,
            heads: cfg.heads,
        })
    }
}

pub fn apply_affine(g: &mut Graph, x: Var, a: AffineVars) -> Result<Var> {
    g.linear(x, a.weight, Some(a.bias))
}

pub fn apply_norm(g: &mut Graph, x: Var, n: NormVars) -> Result<Var> {
    g.layer_norm(x, n.gamma, n.beta, LN_EPS)
}

/// Multi-head attention of `queries` over `context`, including the output
/// projection.
pub fn multi_head(g: &mut Graph, queries: Var, context: Var, a: &AttentionVars, heads: usize) -> Result<Var> {
    let q = apply_affine(g, queries, a.q)?;
    let k = apply_affine(g, context, a.k)?;
    let v = apply_affine(g, context, a.v)?;
    let mixed = g.attention(q, k, v, heads)?;
    apply_affine(g, mixed, a.out)
}

/// `x + MSA(LN₁(x))`.
pub fn attention_sublayer(g: &mut Graph, x: Var, lv: &LayerVars) -> Result<Var> {
    let n = apply_norm(g, x, lv.norm1)?;
    let a = multi_head(g, n, n, &lv.attn, lv.heads)?;
    g.add(x, a)
}

/// `MLP(LN₂(x))` without the residual.
pub fn mlp_branch(g: &mut Graph, x: Var, lv: &LayerVars) -> Result<Var> {
    let n = apply_norm(g, x, lv.norm2)?;
    let h = apply_affine(g, n, lv.fc1)?;
    let h = g.gelu(h)?;
    apply_affine(g, h, lv.fc2)
}

/// Pre-norm transformer block: `x' = x + MSA(LN(x))`, `out = x' + MLP(LN(x'))`.
pub fn vit_layer(g: &mut Graph, x: Var, lv: &LayerVars) -> Result<Var> {
    let x1 = attention_sublayer(g, x, lv)?;
    let m = mlp_branch(g, x1, lv)?;
    g.add(x1, m)
}

/// Patch tokens plus positional table (`E₀`).
pub fn patch_embed(g: &mut Graph, cfg: &BackboneConfig, store: &ParameterStore, image: Var) -> Result<Var> {
    let expected = [cfg.channels, cfg.image_height, cfg.image_width];
    if g.shape(image) != expected {
        return Err(Error::shape(
            "patch_embed",
            format!("image {:?} does not match configured {expected:?}", g.shape(image)),
        ));
    }
    let tokens = g.patchify(image, cfg.patch_height, cfg.patch_width)?;
    let proj = g.param(store, "embed/proj")?;
    let pos = g.param(store, "embed/pos")?;
    let e = g.linear(tokens, proj, None)?;
    g.add(e, pos)
}

/// Runs all `N` encoder layers, letting `adaptation` replace any of them.
pub fn encode_image(
    g: &mut Graph,
    cfg: &BackboneConfig,
    store: &ParameterStore,
    e0: Var,
    adaptation: &dyn Adaptation,
) -> Result<Var> {
    let mut x = e0;
    for depth in 1..=cfg.layers {
        x = encoder_step(g, cfg, store, x, depth, adaptation)?;
    }
    Ok(x)
}

/// Layer `depth` alone (1-based), with the adaptation's replacement if any.
pub fn encoder_step(
    g: &mut Graph,
    cfg: &BackboneConfig,
    store: &ParameterStore,
    x: Var,
    depth: usize,
    adaptation: &dyn Adaptation,
) -> Result<Var> {
    let lv = LayerVars::bind(g, store, cfg, depth)?;
    match adaptation.encoder_block(g, depth, x, &lv, cfg)? {
        Some(out) => Ok(out),
        None => vit_layer(g, x, &lv),
    }
}

/// Fixed sinusoidal code of each patch centre: the first half of the
/// features encodes the row coordinate, the second half the column, each as
/// `(sin, cos)` pairs at frequencies `π·1, π·2, …`.
pub fn grid_sinusoid(cfg: &BackboneConfig) -> Tensor {
    let (rows, cols, d) = (cfg.grid_rows(), cfg.grid_cols(), cfg.embed_dim);
    let half = d / 2;
    let mut out = vec![0.0; rows * cols * d];
    for i in 0..rows {
        for j in 0..cols {
            let t = i * cols + j;
            let coords = [(i as f64 + 0.5) / rows as f64, (j as f64 + 0.5) / cols as f64];
            for (axis, c) in coords.iter().enumerate() {
                for f in 0..half / 2 {
                    let w = std::f64::consts::PI * (f + 1) as f64;
                    out[t * d + axis * half + 2 * f] = (c * w).sin();
                    out[t * d + axis * half + 2 * f + 1] = (c * w).cos();
                }
            }
        }
    }
    Tensor::new(&[rows * cols, d], out).expect("grid shape")
}

/// Default grid prompt embedding: one token per patch.
pub fn grid_prompt(g: &mut Graph, cfg: &BackboneConfig, store: &ParameterStore) -> Result<Var> {
    let base = g.constant(grid_sinusoid(cfg))?;
    let offset = g.param(store, "prompt/offset")?;
    g.add_row(base, offset)
}

#[derive(Clone, Copy, Debug)]
pub struct CrossVars {
    pub norm_q: NormVars,
    pub norm_kv: NormVars,
    pub attn: AttentionVars,
}

/// Graph handles for one two-way decoder block.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlockVars {
    pub image_to_prompt: CrossVars,
    pub prompt_to_image: CrossVars,
    pub heads: usize,
}

impl DecoderBlockVars {
    pub fn bind(g: &mut Graph, store: &ParameterStore, cfg: &BackboneConfig, block: usize) -> Result<Self> {
        let mut cross = |dir: &str| -> Result<CrossVars> {
            let p = format!("decoder/{block}/{dir}");
            Ok(CrossVars {
                norm_q: norm(g, store, &format!("{p}/norm_q"))?,
                norm_kv: norm(g, store, &format!("{p}/norm_kv"))?,
                attn: attention_vars(g, store, &format!("{p}/attn"))?,
            })
        };
        Ok(DecoderBlockVars {
            image_to_prompt: cross("image_to_prompt")?,
            prompt_to_image: cross("prompt_to_image")?,
            heads: cfg.heads,
        })
    }
}

fn cross_attend(g: &mut Graph, x: Var, context: Var, c: &CrossVars, heads: usize) -> Result<Var> {
    let q = apply_norm(g, x, c.norm_q)?;
    let kv = apply_norm(g, context, c.norm_kv)?;
    let a = multi_head(g, q, kv, &c.attn, heads)?;
    g.add(x, a)
}

/// One two-way block: image tokens attend to prompt tokens, then prompt
/// tokens attend to the updated image tokens. Pre-norm with residuals.
pub fn two_way_block(g: &mut Graph, image: Var, prompt: Var, bv: &DecoderBlockVars) -> Result<(Var, Var)> {
    let image = cross_attend(g, image, prompt, &bv.image_to_prompt, bv.heads)?;
    let prompt = cross_attend(g, prompt, image, &bv.prompt_to_image, bv.heads)?;
    Ok((image, prompt))
}

/// Per-patch mask logits from the fused image stream, before upsampling.
pub fn mask_head(g: &mut Graph, store: &ParameterStore, image: Var) -> Result<Var> {
    let n = norm(g, store, "decoder/norm")?;
    let fc1 = affine(g, store, "decoder/head/fc1")?;
    let fc2 = affine(g, store, "decoder/head/fc2")?;
    let x = apply_norm(g, image, n)?;
    let h = apply_affine(g, x, fc1)?;
    let h = g.gelu(h)?;
    apply_affine(g, h, fc2)
}

/// `D` two-way blocks, then the mask head, upsampled to `H × W` logits by
/// replicating each patch's logit over its footprint.
pub fn decode_mask(
    g: &mut Graph,
    cfg: &BackboneConfig,
    store: &ParameterStore,
    image: Var,
    prompt: Var,
) -> Result<Var> {
    let (mut img, mut prm) = (image, prompt);
    for b in 1..=cfg.decoder_blocks {
        let bv = DecoderBlockVars::bind(g, store, cfg, b)?;
        (img, prm) = two_way_block(g, img, prm, &bv)?;
    }
    let logits = mask_head(g, store, img)?;
    g.spread_patches(
        logits,
        (cfg.grid_rows(), cfg.grid_cols()),
        (cfg.patch_height, cfg.patch_width),
    )
}

/// Full pipeline to `H × W` logits.
pub fn logits(
    g: &mut Graph,
    cfg: &BackboneConfig,
    store: &ParameterStore,
    image: &Tensor,
    adaptation: &dyn Adaptation,
) -> Result<Var> {
    let img = g.constant(image.clone())?;
    let img = adaptation.prepare_image(g, img)?;
    let e0 = patch_embed(g, cfg, store, img)?;
    let en = encode_image(g, cfg, store, e0, adaptation)?;
    let prompt = grid_prompt(g, cfg, store)?;
    decode_mask(g, cfg, store, en, prompt)
}

/// Per-pixel foreground probabilities in `(0, 1)`.
pub fn forward(cfg: &BackboneConfig, store: &ParameterStore, image: &Tensor, adaptation: &dyn Adaptation) -> Result<Tensor> {
    let mut g = Graph::new();
    let l = logits(&mut g, cfg, store, image, adaptation)?;
    let p = g.sigmoid(l)?;
    Ok(g.value(p).clone())
}

/// Number of scalar parameters in `store`, optionally trainable only.
pub fn count_params(store: &ParameterStore, trainable_only: bool) -> usize {
    store.count(trainable_only)
}
