//! Dataset directories and their manifests.
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/images/<stem>.pgm
//! <dir>/masks/<stem>.pgm
//! <dir>/coords/<stem>.csv      header `x,y,diameter`
//! ```
//!
//! The manifest is plain text:
//!
//! ```text
//! cryoprompt-manifest 1
//! domain target
//! seed 7
//! config height 64
//! config width 64
//! ...
//! samples
//! target_00000,target
//! target_00001,target
//! ```
//!
//! Stems end in the sample's index within the generator stream, so any
//! listed sample can be regenerated from the config echo alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pgm::{load_image, load_mask, save_image, save_mask};
use super::synth::{generate_one, Domain, Particle, Sample, SyntheticConfig};
use crate::error::{Error, Result};

const MAGIC: &str = "cryoprompt-manifest 1";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub stems: Vec<String>,
    pub domain: Domain,
    pub config: SyntheticConfig,
}

pub fn stem_for(domain: Domain, index: u64) -> String {
    format!("{domain}_{index:05}")
}

/// Generator index encoded in a stem.
pub fn stem_index(stem: &str) -> Result<u64> {
    stem.rsplit('_')
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("stem `{stem}` carries no sample index")))
}

impl DatasetManifest {
    pub fn new(domain: Domain, config: SyntheticConfig, count: usize) -> Self {
        DatasetManifest {
            stems: (0..count as u64).map(|i| stem_for(domain, i)).collect(),
            domain,
            config,
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn with_stems(&self, stems: Vec<String>) -> Self {
        DatasetManifest {
            stems,
            domain: self.domain,
            config: self.config.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\ndomain {}\nseed {}\n", self.domain, self.seed());
        for (k, v) in self.config.echo() {
            let _ = writeln!(s, "config {k} {v}");
        }
        s.push_str("samples\n");
        for stem in &self.stems {
            let _ = writeln!(s, "{stem},{}", self.domain);
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing manifest magic line".into()));
        }
        let mut domain = None;
        let mut seed = None;
        let mut echo = Vec::new();
        for line in lines.by_ref() {
            if line == "samples" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("domain"), Some(d), None) => domain = Some(d.parse::<Domain>()?),
                (Some("seed"), Some(s), None) => {
                    seed = Some(s.parse::<u64>().map_err(|_| bad(format!("bad seed `{s}`")))?)
                }
                (Some("config"), Some(k), Some(v)) => echo.push((k.to_string(), v.to_string())),
                _ => return Err(bad(format!("unexpected line `{line}`"))),
            }
        }
        let domain = domain.ok_or_else(|| bad("no domain line".into()))?;
        let seed = seed.ok_or_else(|| bad("no seed line".into()))?;
        let mut config = SyntheticConfig::for_domain(domain, 1, 1, seed);
        for (k, v) in &echo {
            config.set(k, v)?;
        }
        if config.seed != seed {
            return Err(bad(format!("seed line {seed} disagrees with config seed {}", config.seed)));
        }
        let mut stems = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let (stem, d) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("sample line `{line}` is not `stem,domain`")))?;
            if d.parse::<Domain>()? != domain {
                return Err(bad(format!("sample `{stem}` tagged {d}, manifest is {domain}")));
            }
            stems.push(stem.to_string());
        }
        Ok(DatasetManifest { stems, domain, config })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.txt");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }

    /// Regenerates the listed samples from the config echo.
    pub fn regenerate(&self) -> Result<Vec<Sample>> {
        self.stems
            .iter()
            .map(|s| generate_one(&self.config, stem_index(s)?))
            .collect()
    }
}

/// Seeded shuffle; the first `train_size` stems go to the training half.
pub fn split(manifest: &DatasetManifest, train_size: usize, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if train_size >= manifest.len() {
        return Err(Error::Config(format!(
            "train size {train_size} must be below the {} available samples",
            manifest.len()
        )));
    }
    let mut stems = manifest.stems.clone();
    stems.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = stems.split_off(train_size);
    Ok((manifest.with_stems(stems), manifest.with_stems(test)))
}

pub fn image_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join("images").join(format!("{stem}.pgm"))
}

pub fn mask_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join("masks").join(format!("{stem}.pgm"))
}

pub fn coords_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join("coords").join(format!("{stem}.csv"))
}

pub fn coords_csv(coords: &[Particle]) -> String {
    let mut s = String::from("x,y,diameter\n");
    for p in coords {
        let _ = writeln!(s, "{:?},{:?},{:?}", p.x, p.y, p.diameter);
    }
    s
}

pub fn parse_coords(text: &str, path: &Path) -> Result<Vec<Particle>> {
    let mut lines = text.lines();
    if lines.next() != Some("x,y,diameter") {
        return Err(Error::format(path, "expected header `x,y,diameter`"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, format!("bad coordinate row `{l}`")))?;
            match v[..] {
                [x, y, diameter] => Ok(Particle { x, y, diameter }),
                _ => Err(Error::format(path, format!("row `{l}` needs three fields"))),
            }
        })
        .collect()
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes images, masks, coordinates and the manifest under `dir`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, samples: &[Sample]) -> Result<()> {
    if samples.len() != manifest.len() {
        return Err(Error::Config(format!(
            "{} samples for {} manifest stems",
            samples.len(),
            manifest.len()
        )));
    }
    for sub in ["images", "masks", "coords"] {
        mkdir(&dir.join(sub))?;
    }
    for (stem, s) in manifest.stems.iter().zip(samples) {
        save_image(&image_path(dir, stem), &s.image)?;
        save_mask(&mask_path(dir, stem), &s.mask)?;
        if let Some(c) = &s.coords {
            let p = coords_path(dir, stem);
            fs::write(&p, coords_csv(c)).map_err(|e| Error::io(p, e))?;
        }
    }
    manifest.save(dir)
}

/// Loads the listed samples. Missing masks are reported together.
pub fn read_samples(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    let missing: Vec<&str> = manifest
        .stems
        .iter()
        .filter(|s| !mask_path(dir, s).is_file())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("masks missing for stems: {}", missing.join(", "))));
    }
    manifest
        .stems
        .iter()
        .map(|stem| {
            let cp = coords_path(dir, stem);
            let coords = if cp.is_file() {
                let text = fs::read_to_string(&cp).map_err(|e| Error::io(&cp, e))?;
                Some(parse_coords(&text, &cp)?)
            } else {
                None
            };
            Ok(Sample {
                image: load_image(&image_path(dir, stem))?,
                mask: load_mask(&mask_path(dir, stem))?,
                coords,
            })
        })
        .collect()
}
