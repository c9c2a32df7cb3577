use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use super::results::{mean, rows_csv, stems_hash, variance, ResultRow};
use super::spec::ExperimentSpec;
use crate::backbone::{forward, init_store, Archive, BackboneConfig};
use crate::data::{generate, load_mask, read_samples, save_mask, split, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Tensor};
use crate::prompts::counts::FULL_SCALE_REFERENCE;
use crate::prompts::{attach, trainable_params_of, Strategy, StrategyConfig, StrategyKind};
use crate::training::{
    binarize, freeze_verify, hard_dice, pretrain_backbone, train, write_loss_log, EpochLog, THRESHOLD,
};

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn existing<'a>(spec: &ExperimentSpec, p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let path = spec.require(p, what)?;
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "not found")));
    }
    Ok(path)
}

/// `-` for no depths, else the depths joined by `+`.
pub fn depth_label(d: &BTreeSet<usize>) -> String {
    if d.is_empty() {
        return "-".into();
    }
    d.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

/// Frozen backbone and its configuration from a checkpoint.
pub fn load_backbone(path: &Path) -> Result<(BackboneConfig, ParameterStore)> {
    let a = Archive::load(path)?;
    let cfg = BackboneConfig::from_meta(&a.meta)?;
    let mut store = a.store;
    store.set_all_trainable(false);
    Ok((cfg, store))
}

/// Hard Dice of each prediction at the evaluation threshold.
pub fn hard_dice_all(preds: &[Tensor], test: &[Sample]) -> Result<Vec<f64>> {
    preds.iter().zip(test).map(|(p, s)| hard_dice(p, &s.mask, THRESHOLD)).collect()
}

pub fn predict(cfg: &BackboneConfig, backbone: &ParameterStore, strategy: &Strategy, data: &[Sample]) -> Result<Vec<Tensor>> {
    data.iter().map(|s| forward(cfg, backbone, &s.image, strategy)).collect()
}

/// Writes `<stem>.pgm` masks binarized at the evaluation threshold.
pub fn write_predictions(dir: &Path, stems: &[String], preds: &[Tensor]) -> Result<()> {
    mkdir(dir)?;
    for (stem, p) in stems.iter().zip(preds) {
        let b = binarize(p, THRESHOLD);
        let t = Tensor::new(p.shape(), b.into_iter().map(|v| f64::from(u8::from(v))).collect())?;
        save_mask(&dir.join(format!("{stem}.pgm")), &t)?;
    }
    Ok(())
}

/// One adaptation run.
pub struct Cell {
    pub row: ResultRow,
    pub strategy: Strategy,
    pub backbone: ParameterStore,
    pub log: Vec<EpochLog>,
    pub predictions: Vec<Tensor>,
}

/// Attaches `kind`, trains on `train_set` unless training is disabled,
/// checks the frozen tensors and evaluates on `test`.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    spec: &ExperimentSpec,
    cfg: &BackboneConfig,
    backbone: &ParameterStore,
    kind: StrategyKind,
    prompt: &StrategyConfig,
    train_set: &[Sample],
    test: &Split,
    round: usize,
    seed: u64,
) -> Result<Cell> {
    let start = Instant::now();
    let mut bb = backbone.clone();
    let mut strategy = attach(kind, cfg, prompt, &mut bb, seed)?;
    let snapshot = bb.clone();
    let log = if kind == StrategyKind::None || spec.epochs == 0 {
        Vec::new()
    } else {
        train(cfg, &mut bb, &mut strategy, train_set, &spec.train_config(kind, seed))?.log
    };
    freeze_verify(&bb, &snapshot).into_result()?;
    let predictions = predict(cfg, &bb, &strategy, &test.samples)?;
    let dice = hard_dice_all(&predictions, &test.samples)?;
    let params = trainable_params_of(&strategy, &bb);
    let row = ResultRow::new(
        kind.as_str(),
        depth_label(&strategy.depths),
        train_set.len(),
        round,
        seed,
        &test.hash,
        dice,
        params,
        start.elapsed().as_secs_f64(),
    );
    info!(
        "{kind} depths {} size {} round {round}: mean Dice {:.4} ({} trainable)",
        row.depths, row.train_size, row.mean, row.trainable_params
    );
    Ok(Cell { row, strategy, backbone: bb, log, predictions })
}

/// Held-out samples with their stems and the hash logged in every row.
pub struct Split {
    pub stems: Vec<String>,
    pub samples: Vec<Sample>,
    pub hash: String,
}

/// A target dataset cut into a fixed test set and a training pool.
pub struct Workspace {
    pub cfg: BackboneConfig,
    pub backbone: ParameterStore,
    pub pool: DatasetManifest,
    pub test: Split,
    samples: HashMap<String, Sample>,
}

impl Workspace {
    pub fn open(spec: &ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let (cfg, backbone) = load_backbone(existing(spec, &spec.checkpoint, "checkpoint")?)?;
        let dir = existing(spec, &spec.data, "data")?;
        let manifest = DatasetManifest::load(dir)?;
        if spec.test_size >= manifest.len() {
            return Err(Error::Config(format!(
                "test size {} leaves no training pool among {} samples",
                spec.test_size,
                manifest.len()
            )));
        }
        let (pool, test) = split(&manifest, manifest.len() - spec.test_size, spec.seed)?;
        let all = read_samples(dir, &manifest)?;
        let samples: HashMap<String, Sample> = manifest.stems.iter().cloned().zip(all).collect();
        let test = Split {
            hash: stems_hash(&test.stems),
            samples: test.stems.iter().map(|s| samples[s].clone()).collect(),
            stems: test.stems,
        };
        Ok(Workspace { cfg, backbone, pool, test, samples })
    }

    /// A seeded draw of `size` training samples. Draws with one seed are
    /// nested: smaller sizes are prefixes of larger ones.
    pub fn draw(&self, size: usize, seed: u64) -> Result<Vec<Sample>> {
        if size > self.pool.len() {
            return Err(Error::Config(format!(
                "train size {size} exceeds the pool of {} samples",
                self.pool.len()
            )));
        }
        let stems = if size == self.pool.len() {
            self.pool.stems.clone()
        } else {
            split(&self.pool, size, seed)?.0.stems
        };
        Ok(stems.iter().map(|s| self.samples[s].clone()).collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn cell(&self, spec: &ExperimentSpec, kind: StrategyKind, prompt: &StrategyConfig, size: usize, round: usize, seed: u64) -> Result<Cell> {
        let train_set = self.draw(size, seed)?;
        run_cell(spec, &self.cfg, &self.backbone, kind, prompt, &train_set, &self.test, round, seed)
    }
}

fn save_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write(path, &rows_csv(rows))
}

/// Writes a dataset of `count` generated samples under `out`.
pub fn cmd_generate(spec: &ExperimentSpec) -> Result<DatasetManifest> {
    let cfg = spec.synthetic_config()?;
    let samples = generate(&cfg, spec.count)?;
    let manifest = DatasetManifest::new(spec.domain, cfg, spec.count);
    crate::data::write_dataset(&spec.out, &manifest, &samples)?;
    info!("wrote {} {} samples to {}", spec.count, spec.domain, spec.out.display());
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub train_size: usize,
    pub val_dice: Option<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Pretrains a backbone on the source dataset in `data`, holding out
/// `val_size` samples, and writes `backbone.ckpt`, `pretrain_loss.csv`
/// and `pretrain_summary.txt` under `out`.
pub fn cmd_pretrain(spec: &ExperimentSpec) -> Result<PretrainSummary> {
    spec.validate()?;
    let dir = existing(spec, &spec.data, "data")?;
    let manifest = DatasetManifest::load(dir)?;
    let (train_m, val_m) = if spec.val_size == 0 {
        (manifest.clone(), manifest.with_stems(Vec::new()))
    } else {
        if spec.val_size >= manifest.len() {
            return Err(Error::Config(format!(
                "validation size {} leaves no training data among {} samples",
                spec.val_size,
                manifest.len()
            )));
        }
        split(&manifest, manifest.len() - spec.val_size, spec.seed)?
    };
    let cfg = &spec.backbone;
    let train_set = read_samples(dir, &train_m)?;
    let val = read_samples(dir, &val_m)?;
    let mut bb = init_store(cfg, spec.seed)?;
    let out = pretrain_backbone(cfg, &mut bb, &train_set, &spec.pretrain_config())?;
    let val_dice = if val.is_empty() {
        None
    } else {
        let none = attach(StrategyKind::None, cfg, &spec.prompt, &mut bb, 0)?;
        Some(mean(&hard_dice_all(&predict(cfg, &bb, &none, &val)?, &val)?))
    };
    mkdir(&spec.out)?;
    let ckpt = spec.out.join("backbone.ckpt");
    let mut archive = Archive::new(bb);
    archive.meta.extend(cfg.to_meta());
    archive.meta.insert("train.epoch".into(), out.checkpoint.epoch.to_string());
    archive.meta.insert("train.loss".into(), format!("{:?}", out.checkpoint.loss));
    archive.save(&ckpt)?;
    write_loss_log(&spec.out.join("pretrain_loss.csv"), &out.log)?;
    let mut summary = format!(
        "train_size {}\nbest_epoch {}\nbest_loss {:?}\n",
        train_set.len(),
        out.checkpoint.epoch,
        out.checkpoint.loss
    );
    if let Some(v) = val_dice {
        let _ = writeln!(summary, "val_size {}\nval_dice {v:?}", val.len());
        info!("source validation mean Dice {v:.4} on {} images", val.len());
    }
    write(&spec.out.join("pretrain_summary.txt"), &summary)?;
    Ok(PretrainSummary {
        checkpoint: ckpt,
        train_size: train_set.len(),
        val_dice,
        best_epoch: out.checkpoint.epoch,
        best_loss: out.checkpoint.loss,
    })
}

/// Trains `spec.strategy` on `train_size` pool samples and evaluates it on
/// the held-out set. Writes `strategy.ckpt`, `loss.csv`, `results.csv` and
/// predicted masks under `out`.
pub fn cmd_adapt(spec: &ExperimentSpec) -> Result<ResultRow> {
    let ws = Workspace::open(spec)?;
    let cell = ws.cell(spec, spec.strategy, &spec.prompt, spec.train_size, 0, spec.seed)?;
    mkdir(&spec.out)?;
    cell.strategy.to_archive(&ws.cfg, &cell.backbone)?.save(&spec.out.join("strategy.ckpt"))?;
    write_loss_log(&spec.out.join("loss.csv"), &cell.log)?;
    write_predictions(&spec.out.join("masks"), &ws.test.stems, &cell.predictions)?;
    save_rows(&spec.out.join("results.csv"), std::slice::from_ref(&cell.row))?;
    Ok(cell.row)
}

/// Per-image hard Dice on every sample in `data`, from either saved
/// predictions or a model. Written to `out/eval.csv`.
pub fn cmd_eval(spec: &ExperimentSpec) -> Result<Vec<(String, f64)>> {
    let dir = existing(spec, &spec.data, "data")?;
    let manifest = DatasetManifest::load(dir)?;
    let samples = read_samples(dir, &manifest)?;
    let preds: Vec<Tensor> = if let Some(pdir) = &spec.predictions {
        manifest.stems.iter().map(|s| load_mask(&pdir.join(format!("{s}.pgm")))).collect::<Result<_>>()?
    } else {
        let (cfg, mut bb) = load_backbone(existing(spec, &spec.checkpoint, "checkpoint")?)?;
        let strategy = match &spec.strategy_checkpoint {
            Some(p) => {
                let (st, replaced) = Strategy::from_archive(&Archive::load(p)?)?;
                if let Some(r) = replaced {
                    bb.assign_from(&r)?;
                }
                st
            }
            None => attach(StrategyKind::None, &cfg, &spec.prompt, &mut bb, 0)?,
        };
        predict(&cfg, &bb, &strategy, &samples)?
    };
    let dice = hard_dice_all(&preds, &samples)?;
    let mut csv = String::from("# cryoprompt-eval v1\nstem,dice\n");
    for (s, d) in manifest.stems.iter().zip(&dice) {
        let _ = writeln!(csv, "{s},{d:?}");
    }
    let _ = writeln!(csv, "mean,{:?}\nvariance,{:?}", mean(&dice), variance(&dice));
    write(&spec.out.join("eval.csv"), &csv)?;
    Ok(manifest.stems.into_iter().zip(dice).collect())
}

/// One row per (size, strategy) against a shared test set; smaller
/// training sets are subsets of larger ones.
pub fn cmd_sweep(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    let ws = Workspace::open(spec)?;
    let mut rows = Vec::new();
    for &size in &spec.train_sizes {
        for &kind in &spec.strategies {
            rows.push(ws.cell(spec, kind, &spec.prompt, size, 0, spec.seed)?.row);
        }
    }
    save_rows(&spec.out.join("sweep.csv"), &rows)?;
    Ok(rows)
}

/// Top sets `{1..k}`, bottom sets `{k..N}` and all blocks, without repeats.
pub fn depth_sets(layers: usize) -> Vec<BTreeSet<usize>> {
    let mut sets: Vec<BTreeSet<usize>> = Vec::new();
    let candidates = (1..=layers)
        .map(|k| (1..=k).collect())
        .chain((1..=layers).rev().map(|k| (k..=layers).collect()));
    for s in candidates {
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    sets
}

pub fn cmd_ablate_depth(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    if !spec.strategy.uses_depths() {
        return Err(Error::Config(format!("depth ablation needs prefix or encoder, not {}", spec.strategy)));
    }
    let ws = Workspace::open(spec)?;
    let mut rows = Vec::new();
    for depths in depth_sets(ws.cfg.layers) {
        let prompt = StrategyConfig { depths: Some(depths), ..spec.prompt.clone() };
        rows.push(ws.cell(spec, spec.strategy, &prompt, spec.train_size, 0, spec.seed)?.row);
    }
    save_rows(&spec.out.join("ablate_depth.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub strategy: StrategyKind,
    /// Variance across rounds of each test sample's Dice.
    pub per_sample_variance: Vec<f64>,
    pub mean_variance: f64,
}

/// Repeats adaptation for `rounds` rounds, each on a fresh training draw
/// unless `fixed_subset` is set.
pub fn cmd_stability(spec: &ExperimentSpec) -> Result<(Vec<ResultRow>, Vec<StabilityReport>)> {
    let ws = Workspace::open(spec)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &kind in &spec.strategies {
        let start = rows.len();
        for round in 0..spec.rounds {
            let seed = if spec.fixed_subset { spec.seed } else { spec.seed.wrapping_add(round as u64) };
            rows.push(ws.cell(spec, kind, &spec.prompt, spec.train_size, round, seed)?.row);
        }
        let per_sample_variance: Vec<f64> = (0..ws.test.stems.len())
            .map(|i| variance(&rows[start..].iter().map(|r| r.per_image[i]).collect::<Vec<_>>()))
            .collect();
        let mean_variance = mean(&per_sample_variance);
        info!("{kind}: mean per-sample variance over {} rounds {mean_variance:.5}", spec.rounds);
        reports.push(StabilityReport { strategy: kind, per_sample_variance, mean_variance });
    }
    save_rows(&spec.out.join("stability.csv"), &rows)?;
    let mut csv = String::from("# cryoprompt-stability v1\nstrategy,rounds,mean_variance,per_sample_variance\n");
    for r in &reports {
        let per: Vec<String> = r.per_sample_variance.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(csv, "{},{},{:?},{}", r.strategy, spec.rounds, r.mean_variance, per.join(";"));
    }
    write(&spec.out.join("stability_variance.csv"), &csv)?;
    Ok((rows, reports))
}

/// All strategies on one split, plus a table with the full-scale
/// reference parameter counts.
pub fn cmd_compare(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    let ws = Workspace::open(spec)?;
    let rows = spec
        .strategies
        .iter()
        .map(|&kind| Ok(ws.cell(spec, kind, &spec.prompt, spec.train_size, 0, spec.seed)?.row))
        .collect::<Result<Vec<_>>>()?;
    save_rows(&spec.out.join("compare.csv"), &rows)?;
    write(&spec.out.join("compare.txt"), &compare_table(&rows))?;
    Ok(rows)
}

pub fn compare_table(rows: &[ResultRow]) -> String {
    let mut t = format!(
        "{:<10} {:>9} {:>10} {:>12} {:>16} {:>9}\n",
        "strategy", "mean", "variance", "toy params", "full-scale ref", "seconds"
    );
    for r in rows {
        let reference = FULL_SCALE_REFERENCE
            .iter()
            .find(|(k, _)| k.as_str() == r.strategy)
            .map_or("-".to_string(), |(_, n)| n.to_string());
        let _ = writeln!(
            t,
            "{:<10} {:>9.4} {:>10.5} {:>12} {:>16} {:>9.2}",
            r.strategy, r.mean, r.variance, r.trainable_params, reference, r.wall_seconds
        );
    }
    t
}
