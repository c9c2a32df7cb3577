use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{
    apply_affine, attention_sublayer, mlp_branch, vit_layer, Adaptation, AffineVars, Archive, BackboneConfig,
    LayerVars,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    None,
    Head,
    Prefix,
    Encoder,
    Finetune,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::None,
        StrategyKind::Head,
        StrategyKind::Prefix,
        StrategyKind::Encoder,
        StrategyKind::Finetune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Head => "head",
            StrategyKind::Prefix => "prefix",
            StrategyKind::Encoder => "encoder",
            StrategyKind::Finetune => "finetune",
        }
    }

    pub fn uses_depths(self) -> bool {
        matches!(self, StrategyKind::Prefix | StrategyKind::Encoder)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Strategy hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyConfig {
    /// Encoder layers (1-based) that receive prefix tokens or adapters.
    /// `None` selects the last layer.
    pub depths: Option<BTreeSet<usize>>,
    /// Prefix tokens per prompted layer (`t`).
    pub prefix_tokens: usize,
    /// Adapter bottleneck width (`s`); `None` selects `d / 4`.
    pub adapter_dim: Option<usize>,
    /// Scale on the second adapter path.
    pub alpha: f64,
    /// U-Net widths `(c₁, c₂)`.
    pub head_channels: (usize, usize),
    /// Standard deviation of the prefix-token initialization.
    pub prefix_init_std: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            depths: None,
            prefix_tokens: 8,
            adapter_dim: None,
            alpha: 0.5,
            head_channels: (16, 32),
            prefix_init_std: 0.01,
        }
    }
}

impl StrategyConfig {
    pub fn depths_or_default(&self, cfg: &BackboneConfig) -> BTreeSet<usize> {
        self.depths.clone().unwrap_or_else(|| BTreeSet::from([cfg.layers]))
    }

    pub fn adapter_dim_for(&self, cfg: &BackboneConfig) -> usize {
        self.adapter_dim.unwrap_or((cfg.embed_dim / 4).max(1))
    }
}

/// An attached strategy: its kind, its own tensors and where it hooks in.
#[derive(Clone, Debug, PartialEq)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub params: ParameterStore,
    pub depths: BTreeSet<usize>,
    pub alpha: f64,
    pub prefix_tokens: usize,
    pub adapter_dim: usize,
    pub head_channels: (usize, usize),
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn insert_conv(s: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize) -> Result<()> {
    let std = (2.0 / (c_in * 9) as f64).sqrt();
    s.insert(format!("{name}/weight"), normal(rng, &[c_out, c_in, 3, 3], std), true)?;
    s.insert(format!("{name}/bias"), Tensor::zeros(&[c_out]), true)
}

/// Creates the strategy's tensors and sets trainable flags on `backbone`:
/// everything frozen, except for `finetune` where everything is trainable.
pub fn attach(
    kind: StrategyKind,
    cfg: &BackboneConfig,
    opts: &StrategyConfig,
    backbone: &mut ParameterStore,
    seed: u64,
) -> Result<Strategy> {
    cfg.validate()?;
    let depths = if kind.uses_depths() {
        let d = opts.depths_or_default(cfg);
        if d.is_empty() {
            return Err(Error::Config(format!("{kind} prompt needs a nonempty depth set")));
        }
        if let Some(bad) = d.iter().find(|&&k| k < 1 || k > cfg.layers) {
            return Err(Error::Config(format!(
                "prompt depth {bad} outside 1..={}",
                cfg.layers
            )));
        }
        d
    } else {
        BTreeSet::new()
    };
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", opts.alpha)));
    }
    let adapter_dim = opts.adapter_dim_for(cfg);
    if kind == StrategyKind::Encoder && (adapter_dim == 0 || adapter_dim >= cfg.embed_dim) {
        return Err(Error::Config(format!(
            "adapter width {adapter_dim} must be in 1..{}",
            cfg.embed_dim
        )));
    }
    if kind == StrategyKind::Head && (cfg.image_height % 4 != 0 || cfg.image_width % 4 != 0) {
        return Err(Error::Config(format!(
            "head prompt needs image sides divisible by 4, got {}×{}",
            cfg.image_height, cfg.image_width
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterStore::new();
    let d = cfg.embed_dim;
    match kind {
        StrategyKind::None | StrategyKind::Finetune => {}
        StrategyKind::Head => {
            let c0 = cfg.channels;
            let (c1, c2) = opts.head_channels;
            insert_conv(&mut params, &mut rng, "strategy/head/conv1", c1, c0)?;
            insert_conv(&mut params, &mut rng, "strategy/head/conv2", c2, c1)?;
            insert_conv(&mut params, &mut rng, "strategy/head/deconv1", c1, c2 + c1)?;
            // The last layer starts as a pass-through of the skip-connected
            // input image plus a small contribution from the decoder path.
            let mut k = normal(&mut rng, &[c0, c1 + c0, 3, 3], 0.01);
            for o in 0..c0 {
                for i in 0..c0 {
                    for t in 0..9 {
                        k.data_mut()[((o * (c1 + c0) + c1 + i) * 9) + t] = 0.0;
                    }
                }
                k.data_mut()[((o * (c1 + c0) + c1 + o) * 9) + 4] = 1.0;
            }
            params.insert("strategy/head/deconv2/weight", k, true)?;
            params.insert("strategy/head/deconv2/bias", Tensor::zeros(&[c0]), true)?;
        }
        StrategyKind::Prefix => {
            for &k in &depths {
                let t = normal(&mut rng, &[opts.prefix_tokens, d], opts.prefix_init_std);
                params.insert(format!("strategy/prefix/{k}/tokens"), t, true)?;
            }
        }
        StrategyKind::Encoder => {
            let s = adapter_dim;
            for &k in &depths {
                for which in ["adapter", "adapter_out"] {
                    let p = format!("strategy/encoder/{k}/{which}");
                    params.insert(format!("{p}/down/weight"), normal(&mut rng, &[s, d], 1.0 / (d as f64).sqrt()), true)?;
                    params.insert(format!("{p}/down/bias"), Tensor::zeros(&[s]), true)?;
                    params.insert(format!("{p}/up/weight"), Tensor::zeros(&[d, s]), true)?;
                    params.insert(format!("{p}/up/bias"), Tensor::zeros(&[d]), true)?;
                }
            }
        }
    }
    backbone.set_all_trainable(kind == StrategyKind::Finetune);
    Ok(Strategy {
        kind,
        params,
        depths,
        alpha: opts.alpha,
        prefix_tokens: opts.prefix_tokens,
        adapter_dim,
        head_channels: opts.head_channels,
    })
}

/// Trainable scalars contributed by the strategy (the whole backbone for
/// fine-tuning).
pub fn trainable_params_of(strategy: &Strategy, backbone: &ParameterStore) -> usize {
    match strategy.kind {
        StrategyKind::None => 0,
        StrategyKind::Finetune => backbone.count(true),
        _ => strategy.params.count(true),
    }
}

fn conv_layer(g: &mut Graph, s: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(s, &format!("{name}/weight"))?;
    let b = g.param(s, &format!("{name}/bias"))?;
    let y = g.conv2d(x, w, b)?;
    g.relu(y)
}

/// Two-level U-Net on a `C×H×W` image, as graph operations.
pub fn head_forward_graph(g: &mut Graph, params: &ParameterStore, image: Var) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(Error::Config(format!("head prompt needs C×H×W with H, W divisible by 4, got {s:?}")));
    }
    let c1 = conv_layer(g, params, "strategy/head/conv1", image)?;
    let f1 = g.maxpool2(c1)?;
    let c2 = conv_layer(g, params, "strategy/head/conv2", f1)?;
    let f2 = g.maxpool2(c2)?;
    let u2 = g.upsample2(f2)?;
    let cat1 = g.concat(u2, f1)?;
    let f3 = conv_layer(g, params, "strategy/head/deconv1", cat1)?;
    let u3 = g.upsample2(f3)?;
    let cat2 = g.concat(u3, image)?;
    conv_layer(g, params, "strategy/head/deconv2", cat2)
}

/// The head prompt's rewritten image.
pub fn head_forward(image: &Tensor, params: &ParameterStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(image.clone())?;
    let y = head_forward_graph(&mut g, params, x)?;
    Ok(g.value(y).clone())
}

/// Runs `layer` on `[prefix; x]` and drops the leading prefix rows.
pub fn prefix_layer(g: &mut Graph, x: Var, prefix: Option<Var>, layer: &LayerVars) -> Result<Var> {
    let Some(p) = prefix else {
        return vit_layer(g, x, layer);
    };
    let t = g.shape(p)[0];
    let joined = g.concat(p, x)?;
    let out = vit_layer(g, joined, layer)?;
    g.slice_rows(out, t)
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub down: AffineVars,
    pub up: AffineVars,
}

impl AdapterVars {
    pub fn bind(g: &mut Graph, s: &ParameterStore, prefix: &str) -> Result<Self> {
        let aff = |g: &mut Graph, p: &str| -> Result<AffineVars> {
            Ok(AffineVars {
                weight: g.param(s, &format!("{prefix}/{p}/weight"))?,
                bias: g.param(s, &format!("{prefix}/{p}/bias"))?,
            })
        };
        Ok(AdapterVars {
            down: aff(g, "down")?,
            up: aff(g, "up")?,
        })
    }
}

/// `x + up(ReLU(down(x)))`.
pub fn adapter(g: &mut Graph, x: Var, a: &AdapterVars) -> Result<Var> {
    let h = apply_affine(g, x, a.down)?;
    let h = g.relu(h)?;
    let u = apply_affine(g, h, a.up)?;
    g.add(x, u)
}

/// Encoder layer with adapters: `E′ = Adapter(x + MSA(LN(x)))`,
/// `out = MLP(LN(E′)) + α·Adapter′(E′)`.
pub fn encoder_block(
    g: &mut Graph,
    x: Var,
    layer: &LayerVars,
    first: &AdapterVars,
    second: &AdapterVars,
    alpha: f64,
) -> Result<Var> {
    let attn = attention_sublayer(g, x, layer)?;
    let e = adapter(g, attn, first)?;
    let m = mlp_branch(g, e, layer)?;
    let a = adapter(g, e, second)?;
    let a = g.scale(a, alpha)?;
    g.add(m, a)
}

impl Adaptation for Strategy {
    fn prepare_image(&self, g: &mut Graph, image: Var) -> Result<Var> {
        match self.kind {
            StrategyKind::Head => head_forward_graph(g, &self.params, image),
            _ => Ok(image),
        }
    }

    fn encoder_block(
        &self,
        g: &mut Graph,
        depth: usize,
        x: Var,
        layer: &LayerVars,
        _cfg: &BackboneConfig,
    ) -> Result<Option<Var>> {
        if !self.depths.contains(&depth) {
            return Ok(None);
        }
        match self.kind {
            StrategyKind::Prefix if self.prefix_tokens > 0 => {
                let p = g.param(&self.params, &format!("strategy/prefix/{depth}/tokens"))?;
                prefix_layer(g, x, Some(p), layer).map(Some)
            }
            StrategyKind::Encoder => {
                let first = AdapterVars::bind(g, &self.params, &format!("strategy/encoder/{depth}/adapter"))?;
                let second = AdapterVars::bind(g, &self.params, &format!("strategy/encoder/{depth}/adapter_out"))?;
                encoder_block(g, x, layer, &first, &second, self.alpha).map(Some)
            }
            _ => Ok(None),
        }
    }
}

fn join_depths(d: &BTreeSet<usize>) -> String {
    d.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_depths(s: &str) -> Result<BTreeSet<usize>> {
    if s.trim().is_empty() || s.trim() == "-" {
        return Ok(BTreeSet::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad depth `{p}`")))
        })
        .collect()
}

impl Strategy {
    fn meta(&self) -> IndexMap<String, String> {
        let mut m = IndexMap::new();
        m.insert("strategy.kind".into(), self.kind.to_string());
        let depths = if self.depths.is_empty() { "-".to_string() } else { join_depths(&self.depths) };
        m.insert("strategy.depths".into(), depths);
        m.insert("strategy.alpha".into(), format!("{:?}", self.alpha));
        m.insert("strategy.prefix_tokens".into(), self.prefix_tokens.to_string());
        m.insert("strategy.adapter_dim".into(), self.adapter_dim.to_string());
        m.insert(
            "strategy.head_channels".into(),
            format!("{},{}", self.head_channels.0, self.head_channels.1),
        );
        m
    }

    /// Archive holding the strategy tensors, plus the whole backbone for
    /// fine-tuning.
    pub fn to_archive(&self, cfg: &BackboneConfig, backbone: &ParameterStore) -> Result<Archive> {
        let mut store = self.params.clone();
        if self.kind == StrategyKind::Finetune {
            for (name, e) in backbone.iter() {
                store.insert(name, e.value.clone(), e.trainable)?;
            }
        }
        let mut a = Archive::new(store);
        a.meta.extend(cfg.to_meta());
        a.meta.extend(self.meta());
        Ok(a)
    }

    /// Inverse of [`Strategy::to_archive`]. For fine-tuning, the returned
    /// store replaces the backbone tensors.
    pub fn from_archive(a: &Archive) -> Result<(Strategy, Option<ParameterStore>)> {
        let get = |k: &str| {
            a.meta
                .get(k)
                .ok_or_else(|| Error::Config(format!("archive lacks `{k}`")))
        };
        let kind: StrategyKind = get("strategy.kind")?.parse()?;
        let depths = parse_depths(get("strategy.depths")?)?;
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("bad `{k}`")))
        };
        let alpha: f64 = get("strategy.alpha")?
            .parse()
            .map_err(|_| Error::Config("bad `strategy.alpha`".into()))?;
        let hc = get("strategy.head_channels")?;
        let (c1, c2) = hc
            .split_once(',')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| Error::Config(format!("bad head channels `{hc}`")))?;
        let mut params = ParameterStore::new();
        let mut backbone = ParameterStore::new();
        for (name, e) in a.store.iter() {
            let target = if name.starts_with("strategy/") { &mut params } else { &mut backbone };
            target.insert(name, e.value.clone(), e.trainable)?;
        }
        let strategy = Strategy {
            kind,
            params,
            depths,
            alpha,
            prefix_tokens: num("strategy.prefix_tokens")?,
            adapter_dim: num("strategy.adapter_dim")?,
            head_channels: (c1, c2),
        };
        let backbone = (kind == StrategyKind::Finetune).then_some(backbone);
        Ok((strategy, backbone))
    }
}
