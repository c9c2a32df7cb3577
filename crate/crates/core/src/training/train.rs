use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, OptimizerState};
use super::dice::dice_loss_graph;
use crate::backbone::{decode_mask, encoder_step, grid_prompt, logits, patch_embed, Archive, BackboneConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{grad, Graph, GradientReport, ParameterStore, Tensor, Var};
use crate::prompts::{attach, Strategy, StrategyConfig, StrategyKind};

/// Learning rate used for the full-scale pretrained model.
pub const REFERENCE_LR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Multiplier applied to the learning rate on a plateau.
    pub plateau_factor: f64,
    /// Epochs without improvement before the learning rate decays.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub smooth: f64,
}

impl TrainConfig {
    /// Prompt training at toy scale.
    pub fn prompt() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            plateau_factor: 0.5,
            patience: 10,
            batch_size: 4,
            seed: 0,
            smooth: 1.0,
        }
    }

    /// Pretraining and fine-tuning at toy scale.
    pub fn full() -> Self {
        TrainConfig {
            lr: 1e-4,
            ..Self::prompt()
        }
    }

    pub fn reference() -> Self {
        TrainConfig {
            lr: REFERENCE_LR,
            ..Self::prompt()
        }
    }

    pub fn for_kind(kind: StrategyKind) -> Self {
        match kind {
            StrategyKind::Finetune => Self::full(),
            _ => Self::prompt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.smooth > 0.0) {
            return bad("Dice smoothing must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("plateau factor must be in (0, 1]");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam needs β₁, β₂ in [0, 1) and ε > 0");
        }
        Ok(())
    }

    pub fn echo(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", format!("{:?}", self.lr)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps", format!("{:?}", self.eps)),
            ("epochs", self.epochs.to_string()),
            ("plateau_factor", format!("{:?}", self.plateau_factor)),
            ("patience", self.patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("smooth", format!("{:?}", self.smooth)),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Parameters at the end of the epoch with the lowest mean loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub loss: f64,
    pub strategy: Strategy,
    /// Present when the backbone was trainable.
    pub backbone: Option<ParameterStore>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn to_archive(&self, cfg: &BackboneConfig, backbone: &ParameterStore) -> Result<Archive> {
        let bb = self.backbone.as_ref().unwrap_or(backbone);
        let mut a = self.strategy.to_archive(cfg, bb)?;
        a.meta.insert("train.epoch".into(), self.epoch.to_string());
        a.meta.insert("train.loss".into(), format!("{:?}", self.loss));
        for (k, v) in self.config.echo() {
            a.meta.insert(format!("train.{k}"), v);
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        loss_log_csv(&self.log)
    }
}

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,mean_loss,lr\n");
    for e in log {
        let _ = writeln!(s, "{},{:?},{:?}", e.epoch, e.mean_loss, e.lr);
    }
    s
}

pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    fs::write(path, loss_log_csv(log)).map_err(|e| Error::io(path, e))
}

/// Encoder output just before the first adapted layer, for strategies that
/// leave the earlier layers and the input untouched.
struct FrozenPrefix {
    start: usize,
    tokens: Vec<Tensor>,
}

fn frozen_prefix(cfg: &BackboneConfig, backbone: &ParameterStore, strategy: &Strategy, data: &[Sample]) -> Result<Option<FrozenPrefix>> {
    let start = match strategy.depths.first() {
        Some(&k) if strategy.kind.uses_depths() && backbone.count(true) == 0 && k > 1 => k,
        _ => return Ok(None),
    };
    let tokens = data
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let img = g.constant(s.image.clone())?;
            let mut x = patch_embed(&mut g, cfg, backbone, img)?;
            for depth in 1..start {
                x = encoder_step(&mut g, cfg, backbone, x, depth, strategy)?;
            }
            Ok(g.value(x).clone())
        })
        .collect::<Result<_>>()?;
    Ok(Some(FrozenPrefix { start, tokens }))
}

fn sample_logits(
    g: &mut Graph,
    cfg: &BackboneConfig,
    backbone: &ParameterStore,
    strategy: &Strategy,
    sample: &Sample,
    cached: Option<(usize, &Tensor)>,
) -> Result<Var> {
    let Some((start, tokens)) = cached else {
        return logits(g, cfg, backbone, &sample.image, strategy);
    };
    let mut x = g.constant(tokens.clone())?;
    for depth in start..=cfg.layers {
        x = encoder_step(g, cfg, backbone, x, depth, strategy)?;
    }
    let prompt = grid_prompt(g, cfg, backbone)?;
    decode_mask(g, cfg, backbone, x, prompt)
}

/// Soft-Dice loss of one sample under the current parameters.
pub fn sample_loss(
    g: &mut Graph,
    cfg: &BackboneConfig,
    backbone: &ParameterStore,
    strategy: &Strategy,
    sample: &Sample,
    smooth: f64,
) -> Result<Var> {
    let l = logits(g, cfg, backbone, &sample.image, strategy)?;
    let p = g.sigmoid(l)?;
    dice_loss_graph(g, p, &sample.mask, smooth)
}

fn at_sample(e: Error, epoch: usize, index: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, sample {index}")),
        other => other,
    }
}

/// Minimizes the mean soft-Dice loss over `data` with Adam, decaying the
/// learning rate on plateaus. The logged loss of an epoch is the mean of the
/// per-sample losses computed during its gradient passes. On return both
/// stores hold the parameters of the best epoch.
pub fn train(
    cfg: &BackboneConfig,
    backbone: &mut ParameterStore,
    strategy: &mut Strategy,
    data: &[Sample],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let anything_trainable = backbone.count(true) + strategy.params.count(true) > 0;
    let cache = frozen_prefix(cfg, backbone, strategy, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = OptimizerState::new(tc.beta1, tc.beta2, tc.eps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = tc.lr;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut plateau_best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; data.len()];
        for batch in order.chunks(tc.batch_size) {
            let mut reports: Vec<GradientReport> = Vec::with_capacity(batch.len());
            for &i in batch {
                let cached = cache.as_ref().map(|c| (c.start, &c.tokens[i]));
                let r = grad(&[&*backbone, &strategy.params], |g| {
                    let l = sample_logits(g, cfg, backbone, strategy, &data[i], cached)?;
                    let p = g.sigmoid(l)?;
                    dice_loss_graph(g, p, &data[i].mask, tc.smooth)
                })
                .map_err(|e| at_sample(e, epoch, i))?;
                if !r.loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss at epoch {epoch}, sample {i}")));
                }
                losses[i] = r.loss;
                reports.push(r);
            }
            if !anything_trainable {
                continue;
            }
            let scale = 1.0 / batch.len() as f64;
            let mut total: IndexMap<String, Tensor> = IndexMap::new();
            for r in &reports {
                for (name, gr) in &r.grads {
                    match total.get_mut(name) {
                        Some(t) => t.add_assign(gr),
                        None => {
                            total.insert(name.clone(), gr.clone());
                        }
                    }
                }
            }
            for t in total.values_mut() {
                *t = t.map(|v| v * scale);
            }
            let mean = GradientReport {
                loss: reports.iter().map(|r| r.loss).sum::<f64>() * scale,
                grads: total,
            };
            adam_step(&mut opt, &mut [&mut *backbone, &mut strategy.params], &mean, lr)?;
        }
        let mean_loss = losses.iter().sum::<f64>() / data.len() as f64;
        log.push(EpochLog { epoch, mean_loss, lr });
        if best.as_ref().map_or(true, |b| mean_loss < b.loss) {
            best = Some(Checkpoint {
                epoch,
                loss: mean_loss,
                strategy: strategy.clone(),
                backbone: (backbone.count(true) > 0).then(|| backbone.clone()),
                config: tc.clone(),
            });
        }
        if mean_loss < plateau_best {
            plateau_best = mean_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience.max(1) {
                lr *= tc.plateau_factor;
                stale = 0;
            }
        }
    }
    let checkpoint = best.expect("at least one epoch");
    strategy.params.assign_from(&checkpoint.strategy.params)?;
    if let Some(bb) = &checkpoint.backbone {
        backbone.assign_from(bb)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// Trains every backbone tensor on `data`, then freezes them all.
pub fn pretrain_backbone(
    cfg: &BackboneConfig,
    backbone: &mut ParameterStore,
    data: &[Sample],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut strategy = attach(StrategyKind::Finetune, cfg, &StrategyConfig::default(), backbone, tc.seed)?;
    let out = train(cfg, backbone, &mut strategy, data, tc);
    backbone.set_all_trainable(false);
    out
}

/// Outcome of comparing a store against a snapshot.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeReport {
    /// Tensors frozen in the snapshot whose bytes changed.
    pub violations: Vec<String>,
    /// Tensors trainable in the snapshot whose bytes changed.
    pub changed_trainable: Vec<String>,
    /// Snapshot tensors absent from the store.
    pub missing: Vec<String>,
}

impl FreezeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.missing.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let mut names = self.violations;
        names.extend(self.missing.into_iter().map(|n| format!("{n} (missing)")));
        Err(Error::Frozen(names.join(", ")))
    }
}

/// Bitwise comparison of every tensor against `snapshot`.
pub fn freeze_verify(store: &ParameterStore, snapshot: &ParameterStore) -> FreezeReport {
    let mut report = FreezeReport::default();
    for (name, e) in snapshot.iter() {
        match store.get(name) {
            Err(_) => report.missing.push(name.to_string()),
            Ok(now) if !now.bit_eq(&e.value) => {
                if e.trainable {
                    report.changed_trainable.push(name.to_string());
                } else {
                    report.violations.push(name.to_string());
                }
            }
            Ok(_) => {}
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_store;
    use crate::data::{generate, SyntheticConfig};

    fn setup(kind: StrategyKind) -> (BackboneConfig, ParameterStore, Strategy, Vec<Sample>) {
        let cfg = BackboneConfig::micro();
        let mut bb = init_store(&cfg, 1).unwrap();
        bb.set_all_trainable(false);
        let opts = StrategyConfig {
            head_channels: (4, 8),
            ..StrategyConfig::default()
        };
        let st = attach(kind, &cfg, &opts, &mut bb, 2).unwrap();
        let data = generate(&SyntheticConfig::target(32, 32, 3), 3).unwrap();
        (cfg, bb, st, data)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 2,
            ..TrainConfig::prompt()
        }
    }

    #[test]
    fn same_seed_same_log() {
        let run = || {
            let (cfg, mut bb, mut st, data) = setup(StrategyKind::Prefix);
            train(&cfg, &mut bb, &mut st, &data, &quick()).unwrap().log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn none_gives_constant_log() {
        let (cfg, mut bb, mut st, data) = setup(StrategyKind::None);
        let out = train(&cfg, &mut bb, &mut st, &data, &quick()).unwrap();
        assert!(out.log.windows(2).all(|w| w[0].mean_loss == w[1].mean_loss));
    }

    #[test]
    fn checkpoint_is_log_minimum_and_lr_nonincreasing() {
        let (cfg, mut bb, mut st, data) = setup(StrategyKind::Encoder);
        let tc = TrainConfig {
            epochs: 8,
            patience: 1,
            ..quick()
        };
        let out = train(&cfg, &mut bb, &mut st, &data, &tc).unwrap();
        let min = out.log.iter().map(|e| e.mean_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.checkpoint.loss, min);
        assert!(out.log.windows(2).all(|w| w[1].lr <= w[0].lr));
        assert_eq!(st.params, out.checkpoint.strategy.params);
    }

    #[test]
    fn prompt_training_keeps_backbone_frozen() {
        for kind in [StrategyKind::Head, StrategyKind::Prefix, StrategyKind::Encoder] {
            let (cfg, mut bb, mut st, data) = setup(kind);
            let snap = bb.clone();
            train(&cfg, &mut bb, &mut st, &data, &quick()).unwrap();
            assert!(freeze_verify(&bb, &snap).passed(), "{kind}");
        }
    }

    #[test]
    fn cached_prefix_matches_full_graph() {
        let (cfg, bb, st, data) = {
            let cfg = BackboneConfig::micro();
            let mut bb = init_store(&cfg, 1).unwrap();
            let opts = StrategyConfig {
                depths: Some([2].into()),
                ..StrategyConfig::default()
            };
            let st = attach(StrategyKind::Prefix, &cfg, &opts, &mut bb, 2).unwrap();
            (cfg, bb, st, generate(&SyntheticConfig::target(32, 32, 3), 2).unwrap())
        };
        let cache = frozen_prefix(&cfg, &bb, &st, &data).unwrap().unwrap();
        for (i, s) in data.iter().enumerate() {
            let mut g1 = Graph::new();
            let a = logits(&mut g1, &cfg, &bb, &s.image, &st).unwrap();
            let mut g2 = Graph::new();
            let b = sample_logits(&mut g2, &cfg, &bb, &st, s, Some((cache.start, &cache.tokens[i]))).unwrap();
            assert!(g1.value(a).bit_eq(g2.value(b)));
        }
    }

    #[test]
    fn finetune_reports_changes_and_pretrain_freezes() {
        let (cfg, mut bb, _, data) = setup(StrategyKind::None);
        let snap = bb.clone();
        let mut st = attach(StrategyKind::Finetune, &cfg, &StrategyConfig::default(), &mut bb, 0).unwrap();
        let snap_trainable = bb.clone();
        train(&cfg, &mut bb, &mut st, &data, &quick()).unwrap();
        let r = freeze_verify(&bb, &snap_trainable);
        assert!(r.passed() && !r.changed_trainable.is_empty());
        assert!(!freeze_verify(&bb, &snap).passed());

        let mut fresh = init_store(&cfg, 4).unwrap();
        pretrain_backbone(&cfg, &mut fresh, &data, &quick()).unwrap();
        assert_eq!(fresh.count(true), 0);
    }

    #[test]
    fn corrupted_frozen_tensor_is_named() {
        let (_, mut bb, _, _) = setup(StrategyKind::None);
        let snap = bb.clone();
        let v = &mut bb.get_mut("decoder/norm/gamma").unwrap().data_mut()[0];
        *v = f64::from_bits(v.to_bits() ^ 1);
        let r = freeze_verify(&bb, &snap);
        assert_eq!(r.violations, vec!["decoder/norm/gamma".to_string()]);
        assert!(r.into_result().unwrap_err().to_string().contains("decoder/norm/gamma"));
    }

    #[test]
    fn invalid_configs_rejected() {
        let (cfg, mut bb, mut st, data) = setup(StrategyKind::Prefix);
        for tc in [
            TrainConfig { lr: 0.0, ..quick() },
            TrainConfig { epochs: 0, ..quick() },
            TrainConfig { smooth: 0.0, ..quick() },
        ] {
            assert!(train(&cfg, &mut bb, &mut st, &data, &tc).is_err());
        }
        assert!(train(&cfg, &mut bb, &mut st, &[], &quick()).is_err());
    }
}
