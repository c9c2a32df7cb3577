use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::{Domain, SyntheticConfig};
use crate::error::{Error, Result};
use crate::prompts::{parse_depths, StrategyConfig, StrategyKind};
use crate::training::TrainConfig;

/// Training-set sizes of the full-scale protocol.
pub const REFERENCE_SIZES: [usize; 9] = [250, 200, 150, 100, 50, 30, 20, 10, 5];
/// Desk-scale default sizes.
pub const TOY_SIZES: [usize; 5] = [50, 30, 20, 10, 5];

/// Everything a command needs. Filled from defaults, then a `key=value`
/// file, then command-line flags, all through [`ExperimentSpec::set`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub backbone: BackboneConfig,
    pub strategy: StrategyKind,
    pub strategies: Vec<StrategyKind>,
    pub prompt: StrategyConfig,
    pub train_size: usize,
    pub train_sizes: Vec<usize>,
    pub test_size: usize,
    pub val_size: usize,
    pub rounds: usize,
    /// Reuse one seed and training subset in every stability round.
    pub fixed_subset: bool,
    pub seed: u64,
    pub count: usize,
    pub domain: Domain,
    /// Generator settings applied over the domain defaults, as `gen.<key>`.
    pub generator: Vec<(String, String)>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub strategy_checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out: PathBuf,
    pub lr: Option<f64>,
    /// `0` skips training.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub plateau_factor: f64,
    pub smooth: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let tc = TrainConfig::prompt();
        ExperimentSpec {
            backbone: BackboneConfig::toy(),
            strategy: StrategyKind::Prefix,
            strategies: vec![StrategyKind::Head, StrategyKind::Prefix, StrategyKind::Encoder, StrategyKind::Finetune],
            prompt: StrategyConfig::default(),
            train_size: 10,
            train_sizes: TOY_SIZES.to_vec(),
            test_size: 50,
            val_size: 20,
            rounds: 10,
            fixed_subset: false,
            seed: 0,
            count: 200,
            domain: Domain::Target,
            generator: Vec::new(),
            data: None,
            checkpoint: None,
            strategy_checkpoint: None,
            predictions: None,
            out: PathBuf::from("out"),
            lr: None,
            epochs: tc.epochs,
            pretrain_epochs: 40,
            batch_size: tc.batch_size,
            patience: tc.patience,
            plateau_factor: tc.plateau_factor,
            smooth: tc.smooth,
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.eps,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
}

impl ExperimentSpec {
    /// Applies one setting. Keys use the long flag names, with `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        if let Some(field) = key.strip_prefix("backbone.") {
            return self.backbone.set(field, num(&key, v)?);
        }
        if let Some(field) = key.strip_prefix("gen.") {
            let mut probe = SyntheticConfig::source(8, 8, 0);
            probe.set(field, v)?;
            self.generator.push((field.to_string(), v.to_string()));
            return Ok(());
        }
        match key.as_str() {
            "preset" => {
                self.backbone = match v {
                    "toy" => BackboneConfig::toy(),
                    "wide" => BackboneConfig::wide(),
                    "micro" => BackboneConfig::micro(),
                    _ => return Err(Error::Config(format!("unknown preset `{v}`"))),
                }
            }
            "strategy" => self.strategy = v.parse()?,
            "strategies" => {
                self.strategies = v
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?
            }
            "depths" => {
                self.prompt.depths = match v {
                    "" | "default" => None,
                    "all" => Some((1..=self.backbone.layers).collect()),
                    _ => Some(parse_depths(v)?),
                }
            }
            "prefix_tokens" => self.prompt.prefix_tokens = num(&key, v)?,
            "adapter_dim" => self.prompt.adapter_dim = Some(num(&key, v)?),
            "alpha" => self.prompt.alpha = num(&key, v)?,
            "head_channels" => match list::<usize>(&key, v)?[..] {
                [a, b] => self.prompt.head_channels = (a, b),
                _ => return Err(Error::Config(format!("head_channels needs two values, got `{v}`"))),
            },
            "train_size" => self.train_size = num(&key, v)?,
            "train_sizes" => {
                self.train_sizes = match v {
                    "reference" => REFERENCE_SIZES.to_vec(),
                    "toy" => TOY_SIZES.to_vec(),
                    _ => list(&key, v)?,
                }
            }
            "test_size" => self.test_size = num(&key, v)?,
            "val_size" => self.val_size = num(&key, v)?,
            "rounds" => self.rounds = num(&key, v)?,
            "fixed_subset" => self.fixed_subset = num(&key, v)?,
            "seed" => self.seed = num(&key, v)?,
            "count" => self.count = num(&key, v)?,
            "domain" => self.domain = v.parse()?,
            "data" => self.data = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "strategy_checkpoint" => self.strategy_checkpoint = Some(PathBuf::from(v)),
            "predictions" => self.predictions = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "lr" => {
                self.lr = match v {
                    "reference" => Some(crate::training::REFERENCE_LR),
                    _ => Some(num(&key, v)?),
                }
            }
            "epochs" => self.epochs = num(&key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = num(&key, v)?,
            "batch_size" => self.batch_size = num(&key, v)?,
            "patience" => self.patience = num(&key, v)?,
            "plateau_factor" => self.plateau_factor = num(&key, v)?,
            "smooth" => self.smooth = num(&key, v)?,
            "beta1" => self.beta1 = num(&key, v)?,
            "beta2" => self.beta2 = num(&key, v)?,
            "eps" => self.eps = num(&key, v)?,
            _ => return Err(Error::Config(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    /// Reads `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {} is not key=value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Training settings for `kind`; the per-kind learning rate unless `lr`
    /// is set.
    pub fn train_config(&self, kind: StrategyKind, seed: u64) -> TrainConfig {
        let base = TrainConfig::for_kind(kind);
        TrainConfig {
            lr: self.lr.unwrap_or(base.lr),
            epochs: self.epochs.max(1),
            batch_size: self.batch_size,
            patience: self.patience,
            plateau_factor: self.plateau_factor,
            smooth: self.smooth,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr.unwrap_or(TrainConfig::full().lr),
            epochs: self.pretrain_epochs,
            ..self.train_config(StrategyKind::Finetune, self.seed)
        }
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("missing required setting `{what}`")))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.train_sizes.iter().any(|&s| s == 0) || self.train_size == 0 {
            return Err(Error::Config("training sizes must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.test_size == 0 {
            return Err(Error::Config("test size must be positive".into()));
        }
        Ok(())
    }

    /// Generator settings for the configured domain and image size.
    pub fn synthetic_config(&self) -> Result<SyntheticConfig> {
        let mut c = SyntheticConfig::for_domain(self.domain, self.backbone.image_height, self.backbone.image_width, self.seed);
        for (k, v) in &self.generator {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// The depth set as given, or the default.
    pub fn depths(&self) -> BTreeSet<usize> {
        self.prompt.depths_or_default(&self.backbone)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut s = ExperimentSpec::default();
        s.apply_text("# comment\nstrategy = encoder\ndepths=3,4\ntrain-sizes=reference\nlr=reference\n\nalpha=1.0 # tail\n", Path::new("c"))
            .unwrap();
        assert_eq!(s.strategy, StrategyKind::Encoder);
        assert_eq!(s.prompt.depths, Some([3, 4].into()));
        assert_eq!(s.train_sizes, REFERENCE_SIZES.to_vec());
        assert_eq!(s.lr, Some(1e-5));
        s.set("alpha", "0.25").unwrap();
        assert_eq!(s.prompt.alpha, 0.25);
    }

    #[test]
    fn bad_settings() {
        let mut s = ExperimentSpec::default();
        assert!(s.set("nope", "1").is_err());
        assert!(s.set("rounds", "x").is_err());
        assert!(s.set("head_channels", "4").is_err());
        assert!(s.apply_text("rounds 3", Path::new("c")).is_err());
        s.set("backbone.layers", "2").unwrap();
        assert_eq!(s.backbone.layers, 2);
    }

    #[test]
    fn per_kind_rates() {
        let s = ExperimentSpec::default();
        assert_eq!(s.train_config(StrategyKind::Head, 0).lr, 1e-3);
        assert_eq!(s.train_config(StrategyKind::Finetune, 0).lr, 1e-4);
        assert_eq!(s.pretrain_config().lr, 1e-4);
    }
}
