//! Closed-form trainable-parameter counts for each strategy.

use super::strategy::{StrategyConfig, StrategyKind};
use crate::backbone::BackboneConfig;

/// Published trainable-parameter counts for the full-scale (ViT-h) model,
/// in the order fine-tuning, head, prefix, encoder. Reference values only;
/// the desk-scale model does not reproduce them.
pub const FULL_SCALE_REFERENCE: [(StrategyKind, usize); 4] = [
    (StrategyKind::Finetune, 4_058_340),
    (StrategyKind::Head, 410_019),
    (StrategyKind::Prefix, 2_621_440),
    (StrategyKind::Encoder, 52_531_200),
];

fn conv(c_out: usize, c_in: usize) -> usize {
    c_out * c_in * 9 + c_out
}

/// `conv₁ + conv₂ + deconv₁ + deconv₂` with 3×3 kernels and biases:
/// `c₁(9c₀+1) + c₂(9c₁+1) + c₁(9(c₂+c₁)+1) + c₀(9(c₁+c₀)+1)`.
pub fn head(c0: usize, c1: usize, c2: usize) -> usize {
    conv(c1, c0) + conv(c2, c1) + conv(c1, c2 + c1) + conv(c0, c1 + c0)
}

/// `t·d` per prompted layer.
pub fn prefix(layers: usize, tokens: usize, d: usize) -> usize {
    layers * tokens * d
}

/// `2·(d·s + s + s·d + d)` per prompted layer.
pub fn encoder(layers: usize, d: usize, s: usize) -> usize {
    layers * 2 * (d * s + s + s * d + d)
}

/// Expected trainable count for `kind` under `opts`.
pub fn expected(kind: StrategyKind, cfg: &BackboneConfig, opts: &StrategyConfig) -> usize {
    let depths = opts.depths_or_default(cfg).len();
    match kind {
        StrategyKind::None => 0,
        StrategyKind::Head => head(cfg.channels, opts.head_channels.0, opts.head_channels.1),
        StrategyKind::Prefix => prefix(depths, opts.prefix_tokens, cfg.embed_dim),
        StrategyKind::Encoder => encoder(depths, cfg.embed_dim, opts.adapter_dim_for(cfg)),
        StrategyKind::Finetune => cfg.param_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_count_by_enumeration() {
        // conv₁ 16·1·9+16, conv₂ 32·16·9+32, deconv₁ 16·48·9+16, deconv₂ 1·17·9+1
        let enumerated = (16 * 9 + 16) + (32 * 16 * 9 + 32) + (16 * 48 * 9 + 16) + (17 * 9 + 1);
        assert_eq!(enumerated, 11_882);
        assert_eq!(head(1, 16, 32), enumerated);
    }

    #[test]
    fn full_scale_ordering() {
        let get = |k| FULL_SCALE_REFERENCE.iter().find(|(kk, _)| *kk == k).unwrap().1;
        assert!(get(StrategyKind::Head) < get(StrategyKind::Prefix));
        assert!(get(StrategyKind::Prefix) < get(StrategyKind::Finetune));
        assert!(get(StrategyKind::Finetune) < get(StrategyKind::Encoder));
    }
}
