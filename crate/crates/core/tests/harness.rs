use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use cryoprompt::backbone::BackboneConfig;
use cryoprompt::data::{load_mask, mask_path, save_mask, DatasetManifest};
use cryoprompt::harness::*;
use cryoprompt::numerics::Tensor;
use cryoprompt::prompts::{counts, StrategyConfig, StrategyKind};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_cryoprompt");

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn target(&self) -> PathBuf {
        self.root.join("target")
    }
    fn ckpt(&self) -> PathBuf {
        self.root.join("bb/backbone.ckpt")
    }
}

fn base_spec() -> ExperimentSpec {
    let mut s = ExperimentSpec::default();
    for (k, v) in [
        ("preset", "micro"),
        ("gen.r_min", "3"),
        ("gen.r_max", "5"),
        ("test_size", "6"),
        ("epochs", "3"),
        ("pretrain_epochs", "3"),
        ("val_size", "4"),
    ] {
        s.set(k, v).unwrap();
    }
    s
}

/// A micro backbone pretrained briefly on source data and a small target set.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let mut s = base_spec();
        s.set("domain", "source").unwrap();
        s.set("count", "16").unwrap();
        s.set("out", root.join("source").to_str().unwrap()).unwrap();
        cmd_generate(&s).unwrap();
        s.set("domain", "target").unwrap();
        s.set("count", "24").unwrap();
        s.set("seed", "3").unwrap();
        s.set("out", root.join("target").to_str().unwrap()).unwrap();
        cmd_generate(&s).unwrap();
        let mut p = base_spec();
        p.set("data", root.join("source").to_str().unwrap()).unwrap();
        p.set("out", root.join("bb").to_str().unwrap()).unwrap();
        cmd_pretrain(&p).unwrap();
        Fixture { _dir: dir, root }
    })
}

fn target_spec(out: &Path) -> ExperimentSpec {
    let f = fixture();
    let mut s = base_spec();
    s.data = Some(f.target());
    s.checkpoint = Some(f.ckpt());
    s.out = out.to_path_buf();
    s
}

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).env("RUST_LOG", "error").output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    for sub in ["", "images", "masks", "coords"] {
        let d = dir.join(sub);
        let Ok(rd) = fs::read_dir(&d) else { continue };
        for e in rd {
            let p = e.unwrap().path();
            if p.is_file() {
                v.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    v.sort();
    v
}

#[test]
fn generate_cli_writes_pairs_and_repeats_exactly() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let (code, err) = run(&["generate", "--domain", "source", "--count", "40", "--seed", "7", "--out", d.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    let m = DatasetManifest::load(&a).unwrap();
    assert_eq!(m.len(), 40);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 40);
    assert_eq!(fs::read_dir(a.join("masks")).unwrap().count(), 40);
    assert_eq!(files(&a), files(&b));

    let empty = tmp.path().join("empty");
    assert_eq!(run(&["generate", "--count", "0", "--out", empty.to_str().unwrap()]).0, 0);
    assert!(DatasetManifest::load(&empty).unwrap().is_empty());
}

#[test]
fn pretrain_checkpoint_is_frozen_logged_and_deterministic() {
    let f = fixture();
    let (cfg, store) = load_backbone(&f.ckpt()).unwrap();
    assert_eq!(cfg, BackboneConfig::micro());
    assert_eq!(store.count(true), 0);
    let summary = fs::read_to_string(f.root.join("bb/pretrain_summary.txt")).unwrap();
    assert!(summary.contains("val_dice "));
    assert!(f.root.join("bb/pretrain_loss.csv").is_file());

    let tmp = TempDir::new().unwrap();
    let mut p = base_spec();
    p.data = Some(f.root.join("source"));
    p.out = tmp.path().to_path_buf();
    cmd_pretrain(&p).unwrap();
    assert_eq!(fs::read(tmp.path().join("backbone.ckpt")).unwrap(), fs::read(f.ckpt()).unwrap());
}

#[test]
fn adapt_none_reports_zero_shot_and_identity_encoder_matches_it() {
    let tmp = TempDir::new().unwrap();
    let mut s = target_spec(tmp.path());
    s.strategy = StrategyKind::None;
    let none = cmd_adapt(&s).unwrap();
    assert_eq!(none.trainable_params, 0);

    // Zero-shot Dice over the same held-out stems via eval.
    let ws = Workspace::open(&s).unwrap();
    let manifest = DatasetManifest::load(&fixture().target()).unwrap().with_stems(ws.test.stems.clone());
    let sub = tmp.path().join("test_only");
    fs::create_dir_all(&sub).unwrap();
    for dir in ["images", "masks"] {
        fs::create_dir_all(sub.join(dir)).unwrap();
        for stem in &manifest.stems {
            let name = format!("{dir}/{stem}.pgm");
            fs::copy(fixture().target().join(&name), sub.join(&name)).unwrap();
        }
    }
    manifest.save(&sub).unwrap();
    let mut e = target_spec(&tmp.path().join("eval"));
    e.data = Some(sub);
    let scores: Vec<f64> = cmd_eval(&e).unwrap().into_iter().map(|(_, d)| d).collect();
    assert_eq!(scores, none.per_image);

    s.strategy = StrategyKind::Encoder;
    s.prompt.alpha = 1.0;
    s.epochs = 0;
    s.out = tmp.path().join("enc");
    let enc = cmd_adapt(&s).unwrap();
    assert_eq!(enc.per_image, none.per_image);
}

#[test]
fn adapt_writes_artifacts_and_keeps_backbone_frozen() {
    for kind in ["head", "prefix", "encoder"] {
        let tmp = TempDir::new().unwrap();
        let f = fixture();
        let (code, err) = run(&[
            "adapt", "--strategy", kind, "--data", f.target().to_str().unwrap(),
            "--checkpoint", f.ckpt().to_str().unwrap(), "--out", tmp.path().to_str().unwrap(),
            "--test-size", "6", "--epochs", "2",
        ]);
        assert_eq!(code, 0, "{kind}: {err}");
        for name in ["strategy.ckpt", "loss.csv", "results.csv"] {
            assert!(tmp.path().join(name).is_file(), "{kind}: {name}");
        }
        assert_eq!(fs::read_dir(tmp.path().join("masks")).unwrap().count(), 6);
        let rows = parse_rows(&fs::read_to_string(tmp.path().join("results.csv")).unwrap()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].strategy, kind);
    }
}

#[test]
fn eval_ground_truth_and_empty_predictions() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let mut s = target_spec(tmp.path());
    s.predictions = Some(f.target().join("masks"));
    let scores = cmd_eval(&s).unwrap();
    assert!(scores.iter().all(|(_, d)| *d == 1.0));
    let csv = fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    assert!(csv.contains("\nmean,1.0\nvariance,0.0\n"));

    let blank = tmp.path().join("blank");
    fs::create_dir_all(&blank).unwrap();
    let m = DatasetManifest::load(&f.target()).unwrap();
    for stem in &m.stems {
        save_mask(&blank.join(format!("{stem}.pgm")), &Tensor::zeros(&[32, 32])).unwrap();
    }
    s.predictions = Some(blank);
    for (stem, d) in cmd_eval(&s).unwrap() {
        let gt = load_mask(&mask_path(&f.target(), &stem)).unwrap();
        let expected = if gt.sum() > 0.0 { 0.0 } else { 1.0 };
        assert_eq!(d, expected, "{stem}");
    }
}

#[test]
fn eval_matches_brute_force_pixel_sets() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let s = target_spec(tmp.path());
    let (cfg, store) = load_backbone(&f.ckpt()).unwrap();
    let scores = cmd_eval(&s).unwrap();
    for (stem, d) in scores {
        let img = cryoprompt::data::load_image(&f.target().join(format!("images/{stem}.pgm"))).unwrap();
        let p = cryoprompt::backbone::forward(&cfg, &store, &img, &cryoprompt::backbone::Unadapted).unwrap();
        let gt = load_mask(&mask_path(&f.target(), &stem)).unwrap();
        let a: Vec<bool> = p.data().iter().map(|&v| v >= 0.5).collect();
        let b: Vec<bool> = gt.data().iter().map(|&v| v == 1.0).collect();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let (na, nb) = (a.iter().filter(|x| **x).count(), b.iter().filter(|x| **x).count());
        let brute = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        assert_eq!(d, brute);
    }
}

#[test]
fn eval_reports_missing_masks_by_stem() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let copy = tmp.path().join("copy");
    for sub in ["images", "masks"] {
        fs::create_dir_all(copy.join(sub)).unwrap();
        for e in fs::read_dir(f.target().join(sub)).unwrap() {
            let p = e.unwrap().path();
            fs::copy(&p, copy.join(sub).join(p.file_name().unwrap())).unwrap();
        }
    }
    fs::copy(f.target().join("manifest.txt"), copy.join("manifest.txt")).unwrap();
    fs::remove_file(copy.join("masks/target_00004.pgm")).unwrap();
    fs::remove_file(copy.join("masks/target_00009.pgm")).unwrap();
    let mut s = target_spec(tmp.path());
    s.data = Some(copy);
    let err = cmd_eval(&s).unwrap_err().to_string();
    assert!(err.contains("target_00004") && err.contains("target_00009"), "{err}");
}

#[test]
fn exit_codes() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run(&["--help"]).0, 0);
    assert_eq!(run(&["adapt", "--bogus"]).0, 4);
    assert_eq!(run(&["adapt", "--strategy", "sideways", "--out", out]).0, 4);
    assert_eq!(run(&["adapt", "--data", "/nonexistent/x", "--checkpoint", f.ckpt().to_str().unwrap(), "--out", out]).0, 3);
    assert_eq!(
        run(&["ablate-depth", "--strategy", "head", "--data", f.target().to_str().unwrap(), "--checkpoint",
            f.ckpt().to_str().unwrap(), "--out", out]).0,
        4
    );
    assert_eq!(cryoprompt::Error::Frozen("x".into()).exit_code(), 2);
}

#[test]
fn config_file_then_flags() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.conf");
    fs::write(
        &cfg,
        format!(
            "# adapt settings\nstrategy = prefix\nepochs = 0\ntest_size = 5\ndata = {}\ncheckpoint = {}\nout = {}\n",
            f.target().display(),
            f.ckpt().display(),
            tmp.path().join("from_file").display()
        ),
    )
    .unwrap();
    let out = tmp.path().join("from_flag");
    let (code, err) = run(&["adapt", "--config", cfg.to_str().unwrap(), "--strategy", "none", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let rows = parse_rows(&fs::read_to_string(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows[0].strategy, "none");
    assert_eq!(rows[0].per_image.len(), 5);
    assert!(!tmp.path().join("from_file").exists());
}

#[test]
fn sweep_shape_and_shared_test_set() {
    let tmp = TempDir::new().unwrap();
    let mut s = target_spec(tmp.path());
    s.set("strategies", "head,prefix").unwrap();
    s.set("train_sizes", "6,3").unwrap();
    s.epochs = 2;
    let rows = cmd_sweep(&s).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.test_hash == rows[0].test_hash && r.per_image.len() == 6));
    assert_eq!(rows.iter().map(|r| r.train_size).collect::<Vec<_>>(), [6, 6, 3, 3]);
    let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(parse_rows(&csv).unwrap(), rows.iter().map(|r| ResultRow { wall_seconds: (r.wall_seconds * 1000.0).round() / 1000.0, ..r.clone() }).collect::<Vec<_>>());
}

#[test]
fn depth_ablation_rows() {
    for kind in [StrategyKind::Prefix, StrategyKind::Encoder] {
        let tmp = TempDir::new().unwrap();
        let mut s = target_spec(tmp.path());
        s.strategy = kind;
        s.epochs = 1;
        let rows = cmd_ablate_depth(&s).unwrap();
        let cfg = BackboneConfig::micro();
        let labels: Vec<&str> = rows.iter().map(|r| r.depths.as_str()).collect();
        assert_eq!(labels, ["1", "1+2", "2"]);
        for (r, depths) in rows.iter().zip(depth_sets(cfg.layers)) {
            let opts = StrategyConfig { depths: Some(depths), ..Default::default() };
            assert_eq!(r.trainable_params, counts::expected(kind, &cfg, &opts));
        }
        let all = rows.iter().find(|r| r.depths == "1+2").unwrap();
        assert!(rows.iter().all(|r| r.trainable_params <= all.trainable_params));
    }
}

#[test]
fn stability_shapes_and_fixed_subset_control() {
    let tmp = TempDir::new().unwrap();
    let mut s = target_spec(tmp.path());
    s.set("strategies", "prefix").unwrap();
    s.rounds = 3;
    s.epochs = 2;
    let (rows, reports) = cmd_stability(&s).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(reports[0].per_sample_variance.len(), 6);
    assert!(tmp.path().join("stability_variance.csv").is_file());

    s.fixed_subset = true;
    let (_, fixed) = cmd_stability(&s).unwrap();
    assert!(fixed[0].per_sample_variance.iter().all(|&v| v == 0.0));
    assert_eq!(fixed[0].mean_variance, 0.0);
}

#[test]
fn compare_four_strategies_on_one_split() {
    let tmp = TempDir::new().unwrap();
    let mut s = target_spec(tmp.path());
    s.epochs = 1;
    let rows = cmd_compare(&s).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(names, ["head", "prefix", "encoder", "finetune"]);
    assert!(rows.iter().all(|r| r.test_hash == rows[0].test_hash));
    let table = fs::read_to_string(tmp.path().join("compare.txt")).unwrap();
    for n in ["410019", "2621440", "4058340", "52531200"] {
        assert!(table.contains(n));
    }
    assert_eq!(rows[3].trainable_params, BackboneConfig::micro().param_count());
}
