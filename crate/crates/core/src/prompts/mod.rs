//! Adaptation strategies attached to the frozen backbone.
//!
//! * **head** – a two-level U-Net that rewrites the input image.
//! * **prefix** – learnable tokens prepended to the token sequence of selected
//!   encoder layers and dropped from their output.
//! * **encoder** – paired bottleneck adapters inside selected encoder layers.
//! * **finetune** – no extra tensors; the whole backbone becomes trainable.
//!
//! Strategy tensors live in their own [`ParameterStore`] under a `strategy/`
//! prefix, so the backbone store is never written during prompt training.

mod strategy;

pub use strategy::{
    adapter, attach, encoder_block, head_forward, head_forward_graph, parse_depths, prefix_layer, trainable_params_of,
    AdapterVars, Strategy, StrategyConfig, StrategyKind,
};

pub mod counts;
