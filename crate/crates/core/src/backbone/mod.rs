//! The frozen segmenter: patch embedding, `N` transformer layers, a grid of
//! default prompt tokens, a two-way attention decoder and a per-patch mask
//! head.
//!
//! Everything is expressed as graph builders over a [`Graph`] so the same code
//! serves inference, training and gradient checks. [`Backbone`] wraps the
//! builders for graph-free evaluation on [`TokenGrid`]s.

mod archive;
mod config;
mod model;

pub use archive::Archive;
pub use config::{BackboneConfig, LN_EPS};
pub use model::{
    apply_affine, apply_norm, attention_sublayer, count_params, decode_mask, encode_image, encoder_step,
    forward, grid_prompt, grid_sinusoid, init_store, logits, mask_head, mlp_branch, multi_head, patch_embed,
    two_way_block, vit_layer, Adaptation, AffineVars, AttentionVars, CrossVars, DecoderBlockVars, LayerVars,
    NormVars, Unadapted,
};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterStore, Tensor};

/// Patch tokens `[(m·n), d]` together with the grid they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, rows: usize, cols: usize) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.shape()[0] != rows * cols {
            return Err(Error::shape(
                "token_grid",
                format!("{:?} for a {rows}×{cols} grid", tokens.shape()),
            ));
        }
        Ok(TokenGrid { tokens, rows, cols })
    }
}

/// Graph-free view of a configured backbone.
pub struct Backbone<'a> {
    pub cfg: &'a BackboneConfig,
    pub store: &'a ParameterStore,
}

impl<'a> Backbone<'a> {
    pub fn new(cfg: &'a BackboneConfig, store: &'a ParameterStore) -> Self {
        Backbone { cfg, store }
    }

    fn grid(&self, t: Tensor) -> Result<TokenGrid> {
        TokenGrid::new(t, self.cfg.grid_rows(), self.cfg.grid_cols())
    }

    pub fn patch_embed(&self, image: &Tensor) -> Result<TokenGrid> {
        let mut g = Graph::new();
        let img = g.constant(image.clone())?;
        let e = patch_embed(&mut g, self.cfg, self.store, img)?;
        self.grid(g.value(e).clone())
    }

    /// Encoder layer `depth` (1-based) without adaptation.
    pub fn vit_layer(&self, grid: &TokenGrid, depth: usize) -> Result<TokenGrid> {
        let mut g = Graph::new();
        let x = g.constant(grid.tokens.clone())?;
        let lv = LayerVars::bind(&mut g, self.store, self.cfg, depth)?;
        let out = vit_layer(&mut g, x, &lv)?;
        self.grid(g.value(out).clone())
    }

    pub fn encode_image(&self, image: &Tensor, adaptation: &dyn Adaptation) -> Result<TokenGrid> {
        let mut g = Graph::new();
        let img = g.constant(image.clone())?;
        let img = adaptation.prepare_image(&mut g, img)?;
        let e0 = patch_embed(&mut g, self.cfg, self.store, img)?;
        let en = encode_image(&mut g, self.cfg, self.store, e0, adaptation)?;
        self.grid(g.value(en).clone())
    }

    pub fn grid_prompt(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = grid_prompt(&mut g, self.cfg, self.store)?;
        Ok(g.value(p).clone())
    }

    /// Decoder block `block` (1-based) on explicit image and prompt tokens.
    pub fn two_way_block(&self, image: &TokenGrid, prompt: &Tensor, block: usize) -> Result<(TokenGrid, Tensor)> {
        let mut g = Graph::new();
        let i = g.constant(image.tokens.clone())?;
        let p = g.constant(prompt.clone())?;
        let bv = DecoderBlockVars::bind(&mut g, self.store, self.cfg, block)?;
        let (i, p) = two_way_block(&mut g, i, p, &bv)?;
        Ok((self.grid(g.value(i).clone())?, g.value(p).clone()))
    }

    /// `H × W` mask logits from encoded image tokens and the default prompt.
    pub fn decode_mask(&self, image: &TokenGrid) -> Result<Tensor> {
        let mut g = Graph::new();
        let i = g.constant(image.tokens.clone())?;
        let p = grid_prompt(&mut g, self.cfg, self.store)?;
        let l = decode_mask(&mut g, self.cfg, self.store, i, p)?;
        Ok(g.value(l).clone())
    }

    pub fn forward(&self, image: &Tensor, adaptation: &dyn Adaptation) -> Result<Tensor> {
        forward(self.cfg, self.store, image, adaptation)
    }
}
