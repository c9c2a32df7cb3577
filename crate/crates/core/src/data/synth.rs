use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Config(format!("unknown domain `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    /// Particles brighter than the background.
    Bright,
    /// Particles darker than the background.
    Dark,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Bright => "bright",
            Polarity::Dark => "dark",
        }
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bright" => Ok(Polarity::Bright),
            "dark" => Ok(Polarity::Dark),
            _ => Err(Error::Config(format!("unknown polarity `{s}`"))),
        }
    }
}

/// Generator settings for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Poisson mean of the particle count.
    pub mean_count: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub foreground: f64,
    pub background: f64,
    pub noise: f64,
    /// Peak amplitude of the smooth background field.
    pub artifact: f64,
    pub polarity: Polarity,
    /// Allow particles to overlap.
    pub overlap: bool,
    /// Placement attempts per particle before it is skipped.
    pub retries: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    /// High-contrast domain used for pretraining.
    pub fn source(height: usize, width: usize, seed: u64) -> Self {
        SyntheticConfig {
            height,
            width,
            mean_count: 3.0,
            r_min: 8.0,
            r_max: 13.0,
            foreground: 0.8,
            background: 0.2,
            noise: 0.05,
            artifact: 0.0,
            polarity: Polarity::Bright,
            overlap: false,
            retries: 50,
            seed,
        }
    }

    /// Low-contrast, dark-particle domain with a smooth artifact field.
    pub fn target(height: usize, width: usize, seed: u64) -> Self {
        SyntheticConfig {
            foreground: 0.45,
            background: 0.5,
            noise: 0.1,
            artifact: 0.1,
            polarity: Polarity::Dark,
            ..Self::source(height, width, seed)
        }
    }

    pub fn for_domain(domain: Domain, height: usize, width: usize, seed: u64) -> Self {
        match domain {
            Domain::Source => Self::source(height, width, seed),
            Domain::Target => Self::target(height, width, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        let limit = self.height.min(self.width) as f64 / 2.0;
        if !(self.r_min > 0.0 && self.r_min <= self.r_max && self.r_max < limit) {
            return bad(format!(
                "radius range [{}, {}] must satisfy 0 < r_min ≤ r_max < {limit}",
                self.r_min, self.r_max
            ));
        }
        for (name, v) in [("foreground", self.foreground), ("background", self.background)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} intensity {v} outside [0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.artifact >= 0.0 && self.mean_count >= 0.0) {
            return bad("noise, artifact amplitude and mean count must be nonnegative".into());
        }
        let consistent = match self.polarity {
            Polarity::Bright => self.foreground >= self.background,
            Polarity::Dark => self.foreground <= self.background,
        };
        if !consistent {
            return bad(format!(
                "{} polarity contradicts foreground {} vs background {}",
                self.polarity.as_str(),
                self.foreground,
                self.background
            ));
        }
        Ok(())
    }

    pub fn echo(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("mean_count", format!("{:?}", self.mean_count)),
            ("r_min", format!("{:?}", self.r_min)),
            ("r_max", format!("{:?}", self.r_max)),
            ("foreground", format!("{:?}", self.foreground)),
            ("background", format!("{:?}", self.background)),
            ("noise", format!("{:?}", self.noise)),
            ("artifact", format!("{:?}", self.artifact)),
            ("polarity", self.polarity.as_str().to_string()),
            ("overlap", self.overlap.to_string()),
            ("retries", self.retries.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "height" => self.height = p(key, value)?,
            "width" => self.width = p(key, value)?,
            "mean_count" => self.mean_count = p(key, value)?,
            "r_min" => self.r_min = p(key, value)?,
            "r_max" => self.r_max = p(key, value)?,
            "foreground" => self.foreground = p(key, value)?,
            "background" => self.background = p(key, value)?,
            "noise" => self.noise = p(key, value)?,
            "artifact" => self.artifact = p(key, value)?,
            "polarity" => self.polarity = value.parse()?,
            "overlap" => self.overlap = p(key, value)?,
            "retries" => self.retries = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown generator key `{key}`"))),
        }
        Ok(())
    }
}

/// A picked particle: centre column `x`, centre row `y`, disk diameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    pub x: f64,
    pub y: f64,
    pub diameter: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1 × H × W`, values in `[0, 1]`.
    pub image: Tensor,
    /// `H × W`, values in `{0, 1}`.
    pub mask: Tensor,
    pub coords: Option<Vec<Particle>>,
}

/// Union of filled disks: pixel `(i, j)` is set iff
/// `(i − y)² + (j − x)² ≤ (diameter / 2)²`. Disks are clipped at the border.
pub fn rasterize(coords: &[Particle], height: usize, width: usize) -> Result<Tensor> {
    let mut mask = Tensor::zeros(&[height, width]);
    for (idx, p) in coords.iter().enumerate() {
        if !(p.diameter > 0.0) {
            return Err(Error::Config(format!(
                "particle {idx} has nonpositive diameter {}",
                p.diameter
            )));
        }
        let r = p.diameter / 2.0;
        let r2 = r * r;
        let i0 = (p.y - r).floor().max(0.0) as usize;
        let j0 = (p.x - r).floor().max(0.0) as usize;
        let i1 = ((p.y + r).ceil().max(-1.0) + 1.0).min(height as f64) as usize;
        let j1 = ((p.x + r).ceil().max(-1.0) + 1.0).min(width as f64) as usize;
        let data = mask.data_mut();
        for i in i0..i1 {
            let di = i as f64 - p.y;
            for j in j0..j1 {
                let dj = j as f64 - p.x;
                if di * di + dj * dj <= r2 {
                    data[i * width + j] = 1.0;
                }
            }
        }
    }
    Ok(mask)
}

fn place(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, index: u64) -> Vec<Particle> {
    let count = if cfg.mean_count > 0.0 {
        Poisson::new(cfg.mean_count).expect("positive mean").sample(rng) as usize
    } else {
        0
    };
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut placed: Vec<Particle> = Vec::with_capacity(count);
    let mut skipped = 0;
    for _ in 0..count {
        let mut ok = None;
        for _ in 0..cfg.retries.max(1) {
            let r = rng.gen_range(cfg.r_min..=cfg.r_max);
            let x = rng.gen_range(r..=(w - 1.0 - r).max(r));
            let y = rng.gen_range(r..=(h - 1.0 - r).max(r));
            let clear = cfg.overlap
                || placed.iter().all(|q| {
                    let gap = r + q.diameter / 2.0 + 1.0;
                    (x - q.x).powi(2) + (y - q.y).powi(2) > gap * gap
                });
            if clear {
                ok = Some(Particle { x, y, diameter: 2.0 * r });
                break;
            }
        }
        match ok {
            Some(p) => placed.push(p),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("sample {index}: skipped {skipped} of {count} particles after {} placement attempts each", cfg.retries);
    }
    placed
}

fn artifact_field(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const WAVES: usize = 3;
    let mut field = vec![0.0; cfg.height * cfg.width];
    if cfg.artifact == 0.0 {
        return field;
    }
    for _ in 0..WAVES {
        let fy = rng.gen_range(0.5..2.0);
        let fx = rng.gen_range(0.5..2.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        for i in 0..cfg.height {
            for j in 0..cfg.width {
                let t = 2.0 * PI * (fy * i as f64 / cfg.height as f64 + fx * j as f64 / cfg.width as f64) + phase;
                field[i * cfg.width + j] += cfg.artifact * t.sin() / WAVES as f64;
            }
        }
    }
    field
}

/// Sample `index` of the stream defined by `cfg.seed`.
pub fn generate_one(cfg: &SyntheticConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let coords = place(cfg, &mut rng, index);
    let mask = rasterize(&coords, cfg.height, cfg.width)?;
    let field = artifact_field(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut pixels = Vec::with_capacity(cfg.height * cfg.width);
    for (k, &m) in mask.data().iter().enumerate() {
        let base = if m > 0.0 { cfg.foreground } else { cfg.background };
        let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        pixels.push((base + field[k] + n).clamp(0.0, 1.0));
    }
    Ok(Sample {
        image: Tensor::new(&[1, cfg.height, cfg.width], pixels)?,
        mask,
        coords: Some(coords),
    })
}

/// The first `count` samples of the stream.
pub fn generate(cfg: &SyntheticConfig, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| generate_one(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(coords: &[Particle], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let hit = coords.iter().any(|p| {
                    let (di, dj) = (i as f64 - p.y, j as f64 - p.x);
                    di * di + dj * dj <= (p.diameter / 2.0).powi(2)
                });
                out[i * w + j] = f64::from(u8::from(hit));
            }
        }
        out
    }

    #[test]
    fn empty_list_gives_empty_mask() {
        assert_eq!(rasterize(&[], 5, 7).unwrap().sum(), 0.0);
    }

    #[test]
    fn diameter_two_disk_has_five_pixels() {
        let p = Particle { x: 4.0, y: 4.0, diameter: 2.0 };
        assert_eq!(rasterize(&[p], 9, 9).unwrap().sum(), 5.0);
    }

    #[test]
    fn union_is_idempotent() {
        let p = Particle { x: 3.3, y: 5.1, diameter: 4.5 };
        assert_eq!(rasterize(&[p, p], 10, 10).unwrap(), rasterize(&[p], 10, 10).unwrap());
    }

    #[test]
    fn nonpositive_diameter_names_its_index() {
        let ps = [Particle { x: 1.0, y: 1.0, diameter: 2.0 }, Particle { x: 1.0, y: 1.0, diameter: 0.0 }];
        let err = rasterize(&ps, 4, 4).unwrap_err().to_string();
        assert!(err.contains("particle 1"), "{err}");
    }

    #[test]
    fn zero_rate_gives_blank_sample() {
        let mut cfg = SyntheticConfig::target(32, 32, 5);
        cfg.mean_count = 0.0;
        let s = generate_one(&cfg, 0).unwrap();
        assert_eq!(s.mask.sum(), 0.0);
        assert!(s.coords.unwrap().is_empty());
    }

    #[test]
    fn noiseless_image_is_two_level() {
        let mut cfg = SyntheticConfig::source(48, 48, 11);
        cfg.noise = 0.0;
        for s in generate(&cfg, 4).unwrap() {
            for (&v, &m) in s.image.data().iter().zip(s.mask.data()) {
                assert!(v == 0.8 || v == 0.2);
                assert_eq!(m, f64::from(u8::from(v > 0.5)));
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SyntheticConfig::target(32, 32, 3);
        let a = generate(&cfg, 3).unwrap();
        let b = generate(&cfg, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.image.bit_eq(&y.image));
            assert!(x.mask.bit_eq(&y.mask));
        }
        assert_eq!(generate_one(&cfg, 2).unwrap(), a[2]);
    }

    #[test]
    fn mask_matches_coordinates_and_images_are_clamped() {
        let cfg = SyntheticConfig::target(40, 40, 9);
        for s in generate(&cfg, 5).unwrap() {
            let coords = s.coords.as_ref().unwrap();
            assert_eq!(s.mask.data(), &brute(coords, 40, 40)[..]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn non_overlapping_area_is_sum_of_disks() {
        let cfg = SyntheticConfig::source(64, 64, 4);
        for s in generate(&cfg, 5).unwrap() {
            let per: f64 = s
                .coords
                .unwrap()
                .iter()
                .map(|p| rasterize(&[*p], 64, 64).unwrap().sum())
                .sum();
            assert_eq!(s.mask.sum(), per);
        }
    }

    #[test]
    fn validation() {
        let mut cfg = SyntheticConfig::target(32, 32, 0);
        assert!(cfg.validate().is_ok());
        cfg.polarity = Polarity::Bright;
        assert!(cfg.validate().is_err());
        let mut cfg = SyntheticConfig::source(32, 32, 0);
        cfg.r_max = 16.0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn rasterize_matches_brute_force(
            ps in proptest::collection::vec((-3.0f64..20.0, -3.0f64..20.0, 0.1f64..9.0), 0..6)
        ) {
            let coords: Vec<Particle> = ps.iter().map(|&(x, y, d)| Particle { x, y, diameter: d }).collect();
            let m = rasterize(&coords, 17, 13).unwrap();
            prop_assert_eq!(m.data(), &brute(&coords, 17, 13)[..]);
        }
    }
}
