//! Result rows and their CSV form.
//!
//! ```text
//! # cryoprompt-results v1
//! strategy,depths,train_size,round,seed,test_hash,mean_dice,var_dice,trainable_params,wall_seconds,per_image_dice
//! head,-,10,0,0,5f0e...,0.41,0.02,3366,12.500,0.4;0.3;...
//! ```
//!
//! Reals use the shortest representation that round-trips. `wall_seconds`
//! is the only column that may differ between identical runs.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const RESULTS_VERSION: &str = "# cryoprompt-results v1";
pub const RESULTS_HEADER: &str =
    "strategy,depths,train_size,round,seed,test_hash,mean_dice,var_dice,trainable_params,wall_seconds,per_image_dice";
const WALL_COLUMN: usize = 9;

/// Arithmetic mean, summed in list order.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance. Deviations are taken about a mean shifted by the
/// first element, so a constant list gives exactly zero.
pub fn variance(xs: &[f64]) -> f64 {
    let Some(&x0) = xs.first() else {
        return 0.0;
    };
    let shift = mean(&xs.iter().map(|x| x - x0).collect::<Vec<_>>());
    xs.iter().map(|x| (x - x0 - shift).powi(2)).sum::<f64>() / xs.len() as f64
}

/// FNV-1a over the stems, each terminated by a newline.
pub fn stems_hash<S: AsRef<str>>(stems: &[S]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in stems {
        for b in s.as_ref().bytes().chain(std::iter::once(b'\n')) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub strategy: String,
    /// Depth-set descriptor, `-` when the strategy has none.
    pub depths: String,
    pub train_size: usize,
    pub round: usize,
    pub seed: u64,
    pub test_hash: String,
    pub per_image: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub trainable_params: usize,
    pub wall_seconds: f64,
}

impl ResultRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        strategy: impl Into<String>,
        depths: impl Into<String>,
        train_size: usize,
        round: usize,
        seed: u64,
        test_hash: impl Into<String>,
        per_image: Vec<f64>,
        trainable_params: usize,
        wall_seconds: f64,
    ) -> Self {
        ResultRow {
            strategy: strategy.into(),
            depths: depths.into(),
            train_size,
            round,
            seed,
            test_hash: test_hash.into(),
            mean: mean(&per_image),
            variance: variance(&per_image),
            per_image,
            trainable_params,
            wall_seconds,
        }
    }

    pub fn csv_line(&self) -> String {
        let per: Vec<String> = self.per_image.iter().map(|v| format!("{v:?}")).collect();
        format!(
            "{},{},{},{},{},{},{:?},{:?},{},{:.3},{}",
            self.strategy,
            self.depths,
            self.train_size,
            self.round,
            self.seed,
            self.test_hash,
            self.mean,
            self.variance,
            self.trainable_params,
            self.wall_seconds,
            per.join(";")
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Config(format!("result row needs 11 fields: `{line}`")));
        }
        let n = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Config(format!("bad number `{}` in result row", f[i])))
        };
        let per_image = f[10]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("bad Dice `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(ResultRow {
            strategy: f[0].into(),
            depths: f[1].into(),
            train_size: n(2)? as usize,
            round: n(3)? as usize,
            seed: f[4].parse().map_err(|_| Error::Config(format!("bad seed `{}`", f[4])))?,
            test_hash: f[5].into(),
            mean: n(6)?,
            variance: n(7)?,
            trainable_params: n(8)? as usize,
            wall_seconds: n(9)?,
            per_image,
        })
    }
}

pub fn rows_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULTS_VERSION}\n{RESULTS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

pub fn parse_rows(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_VERSION) || lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::Config("not a cryoprompt results file".into()));
    }
    lines.filter(|l| !l.is_empty()).map(ResultRow::parse_line).collect()
}

/// The CSV with the wall-time column blanked, for determinism checks.
pub fn without_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            if l.starts_with('#') || l == RESULTS_HEADER {
                return l.to_string();
            }
            let mut f: Vec<&str> = l.split(',').collect();
            if f.len() > WALL_COLUMN {
                f[WALL_COLUMN] = "";
            }
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
