//! Experiment configuration: sectioned `key = value` text.
//!
//! ```text
//! [experiment]
//! seed = 7
//! [model]
//! decomposition = holistic   # none | svd | tucker | holistic
//! scale = learned            # analytic | learned
//! [train]
//! epochs = 5
//! lr_drops = 3:0.1, 4:0.1
//! [data]
//! format = synthetic         # synthetic | idx | csv
//! ```
//!
//! `#` and `;` start comments. Unknown sections or keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::binarize::ScaleMode;
use crate::error::{Error, Result};
use crate::latent::Decomposition;
use crate::train::{Network, Optimizer, Schedule};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generated glyphs; `seed` is independent of the experiment seed.
    Synthetic { train: usize, test: usize, seed: u64 },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub classes: usize,
    pub decomposition: Decomposition,
    pub scale: ScaleMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub lr_drops: Vec<(usize, f64)>,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    pub data: DataSource,
    pub output_dir: PathBuf,
    pub ablate_seeds: Vec<u64>,
    pub bench: BenchSettings,
}

/// Kernel benchmark sizes: `rows x inner` times `inner x cols`, per inner dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub inner: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            inner: vec![256, 1024, 4096],
            rows: 64,
            cols: 64,
            repeats: 5,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 10,
            decomposition: Decomposition::None,
            scale: ScaleMode::AnalyticPerFilter,
            epochs: 5,
            batch_size: 32,
            optimizer: Optimizer::adam(),
            lr: 1e-3,
            lr_drops: vec![(4, 0.1)],
            weight_decay: 1e-7,
            bn_momentum: 0.1,
            data: DataSource::Synthetic {
                train: 2000,
                test: 1000,
                seed: 1234,
            },
            output_dir: PathBuf::from("runs/default"),
            ablate_seeds: vec![1, 2, 3],
            bench: BenchSettings::default(),
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, format!("invalid value {v:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_num(line, key, x.trim())).collect()
}

fn parse_drops(line: usize, v: &str) -> Result<Vec<(usize, f64)>> {
    if v.trim().is_empty() || v.trim() == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let (e, m) = item
                .split_once(':')
                .ok_or_else(|| bad(line, format!("lr drop {item:?} is not epoch:multiplier")))?;
            Ok((parse_num(line, "lr_drops", e.trim())?, parse_num(line, "lr_drops", m.trim())?))
        })
        .collect()
}

#[derive(Default)]
struct DataKeys {
    format: Option<String>,
    train_size: Option<usize>,
    test_size: Option<usize>,
    data_seed: Option<u64>,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses config text. `seed` is mandatory unless `seed_override` supplies it.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self> {
        Self::parse_inner(text, seed_override, true)
    }

    /// As [`Self::parse`], but a missing seed defaults to 0. For commands that
    /// do not train.
    pub fn parse_without_seed(text: &str) -> Result<Self> {
        Self::parse_inner(text, None, false)
    }

    fn parse_inner(text: &str, seed_override: Option<u64>, require_seed: bool) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seed = None;
        let mut section = String::new();
        let mut svd_rank: Option<usize> = None;
        let mut decomposition = "none".to_string();
        let mut data = DataKeys::default();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                section = name
                    .strip_suffix(']')
                    .ok_or_else(|| bad(n, "unterminated section header"))?
                    .trim()
                    .to_string();
                if !["experiment", "model", "train", "data", "output", "ablate", "bench"].contains(&section.as_str()) {
                    return Err(bad(n, format!("unknown section [{section}]")));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(n, format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match (section.as_str(), k) {
                ("experiment", "seed") => seed = Some(parse_num(n, k, v)?),
                ("model", "arch") => {
                    if v != "reference" {
                        return Err(bad(n, format!("unknown arch {v:?} (only \"reference\")")));
                    }
                }
                ("model", "classes") => cfg.classes = parse_num(n, k, v)?,
                ("model", "decomposition") => decomposition = v.to_string(),
                ("model", "svd_rank") => {
                    svd_rank = if v == "full" { None } else { Some(parse_num(n, k, v)?) }
                }
                ("model", "scale") => {
                    cfg.scale = match v {
                        "analytic" => ScaleMode::AnalyticPerFilter,
                        "learned" => ScaleMode::LearnedPerFilter,
                        _ => return Err(bad(n, format!("unknown scale mode {v:?}"))),
                    }
                }
                ("train", "epochs") => cfg.epochs = parse_num(n, k, v)?,
                ("train", "batch_size") => cfg.batch_size = parse_num(n, k, v)?,
                ("train", "optimizer") => {
                    cfg.optimizer = match v {
                        "adam" => Optimizer::adam(),
                        "rmsprop" => Optimizer::rmsprop(),
                        _ => return Err(bad(n, format!("unknown optimizer {v:?}"))),
                    }
                }
                ("train", "lr") => cfg.lr = parse_num(n, k, v)?,
                ("train", "lr_drops") => cfg.lr_drops = parse_drops(n, v)?,
                ("train", "weight_decay") => cfg.weight_decay = parse_num(n, k, v)?,
                ("train", "bn_momentum") => cfg.bn_momentum = parse_num(n, k, v)?,
                ("data", "format") => data.format = Some(v.to_string()),
                ("data", "train_size") => data.train_size = Some(parse_num(n, k, v)?),
                ("data", "test_size") => data.test_size = Some(parse_num(n, k, v)?),
                ("data", "seed") => data.data_seed = Some(parse_num(n, k, v)?),
                ("data", "train_images") => data.train_images = Some(v.into()),
                ("data", "train_labels") => data.train_labels = Some(v.into()),
                ("data", "test_images") => data.test_images = Some(v.into()),
                ("data", "test_labels") => data.test_labels = Some(v.into()),
                ("data", "train") => data.train = Some(v.into()),
                ("data", "test") => data.test = Some(v.into()),
                ("output", "dir") => cfg.output_dir = v.into(),
                ("ablate", "seeds") => cfg.ablate_seeds = parse_list(n, k, v)?,
                ("bench", "inner") => cfg.bench.inner = parse_list(n, k, v)?,
                ("bench", "rows") => cfg.bench.rows = parse_num(n, k, v)?,
                ("bench", "cols") => cfg.bench.cols = parse_num(n, k, v)?,
                ("bench", "repeats") => cfg.bench.repeats = parse_num(n, k, v)?,
                ("", _) => return Err(bad(n, format!("key {k:?} outside any section"))),
                (s, _) => return Err(bad(n, format!("unknown key {k:?} in [{s}]"))),
            }
        }
        cfg.seed = match seed_override.or(seed) {
            Some(s) => s,
            None if !require_seed => 0,
            None => return Err(Error::Config("[experiment] seed is required (or pass --seed)".into())),
        };
        cfg.decomposition = match decomposition.as_str() {
            "none" => Decomposition::None,
            "svd" => Decomposition::Svd { rank: svd_rank },
            "tucker" => Decomposition::Tucker,
            "holistic" => Decomposition::Holistic,
            v => return Err(Error::Config(format!("unknown decomposition {v:?}"))),
        };
        cfg.data = Self::data_source(data)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, seed_override)
    }

    fn data_source(d: DataKeys) -> Result<DataSource> {
        let need = |v: Option<PathBuf>, k: &str| v.ok_or_else(|| Error::Config(format!("[data] {k} is required")));
        let defaults = match ExperimentConfig::default().data {
            DataSource::Synthetic { train, test, seed } => (train, test, seed),
            _ => unreachable!("default data source is synthetic"),
        };
        Ok(match d.format.as_deref().unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic {
                train: d.train_size.unwrap_or(defaults.0),
                test: d.test_size.unwrap_or(defaults.1),
                seed: d.data_seed.unwrap_or(defaults.2),
            },
            "idx" => DataSource::Idx {
                train_images: need(d.train_images, "train_images")?,
                train_labels: need(d.train_labels, "train_labels")?,
                test_images: need(d.test_images, "test_images")?,
                test_labels: need(d.test_labels, "test_labels")?,
            },
            "csv" => DataSource::Csv {
                train: need(d.train, "train")?,
                test: need(d.test, "test")?,
            },
            f => return Err(Error::Config(format!("unknown data format {f:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.classes < 2 {
            return fail(format!("classes must be at least 2, got {}", self.classes));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail(format!("bn_momentum must lie in [0, 1], got {}", self.bn_momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Decomposition::Svd { rank: Some(0) } = self.decomposition {
            return fail("svd_rank must be positive".into());
        }
        if self.ablate_seeds.is_empty() {
            return fail("[ablate] seeds must not be empty".into());
        }
        let b = &self.bench;
        if b.inner.is_empty() || b.inner.contains(&0) || b.rows == 0 || b.cols == 0 || b.repeats == 0 {
            return fail(format!("benchmark sizes must be positive, got {b:?}"));
        }
        Schedule::new(self.lr, self.lr_drops.clone()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.lr, self.lr_drops.clone()).expect("validated on parse")
    }

    pub fn network(&self) -> Result<Network> {
        Network::reference(self.decomposition, self.scale, self.classes)
    }

    /// Every setting that shapes the training trajectory, in a fixed order.
    /// `epochs`, the output directory and the `[ablate]`/`[bench]` sections are
    /// left out so that a run can be extended or relocated and still resume.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let scale = match self.scale {
            ScaleMode::AnalyticPerFilter => "analytic",
            ScaleMode::LearnedPerFilter => "learned",
        };
        let decomposition = match self.decomposition {
            Decomposition::None => "none",
            Decomposition::Svd { .. } => "svd",
            Decomposition::Tucker => "tucker",
            Decomposition::Holistic => "holistic",
        };
        let _ = writeln!(s, "[experiment]\nseed = {}", self.seed);
        let _ = writeln!(s, "[model]\narch = reference\nclasses = {}", self.classes);
        let _ = writeln!(s, "decomposition = {decomposition}");
        if let Decomposition::Svd { rank } = self.decomposition {
            match rank {
                Some(r) => writeln!(s, "svd_rank = {r}"),
                None => writeln!(s, "svd_rank = full"),
            }
            .expect("writing to a String");
        }
        let _ = writeln!(s, "scale = {scale}");
        let drops: Vec<String> = self.lr_drops.iter().map(|(e, m)| format!("{e}:{m:?}")).collect();
        let drops = if drops.is_empty() { "none".to_string() } else { drops.join(", ") };
        let _ = writeln!(
            s,
            "[train]\nbatch_size = {}\noptimizer = {}\nlr = {:?}\nlr_drops = {drops}\nweight_decay = {:?}\nbn_momentum = {:?}",
            self.batch_size,
            self.optimizer.name(),
            self.lr,
            self.weight_decay,
            self.bn_momentum
        );
        let _ = writeln!(s, "[data]");
        match &self.data {
            DataSource::Synthetic { train, test, seed } => {
                let _ = writeln!(s, "format = synthetic\ntrain_size = {train}\ntest_size = {test}\nseed = {seed}");
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let _ = writeln!(
                    s,
                    "format = idx\ntrain_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}",
                    train_images.display(),
                    train_labels.display(),
                    test_images.display(),
                    test_labels.display()
                );
            }
            DataSource::Csv { train, test } => {
                let _ = writeln!(s, "format = csv\ntrain = {}\ntest = {}", train.display(), test.display());
            }
        }
        s
    }

    /// Full config text, every section included.
    pub fn to_text(&self) -> String {
        let mut s = self.canonical_text();
        s = s.replacen("[train]\n", &format!("[train]\nepochs = {}\n", self.epochs), 1);
        let _ = writeln!(s, "[output]\ndir = {}", self.output_dir.display());
        let seeds: Vec<String> = self.ablate_seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "[ablate]\nseeds = {}", seeds.join(", "));
        let inner: Vec<String> = self.bench.inner.iter().map(usize::to_string).collect();
        let _ = writeln!(
            s,
            "[bench]\ninner = {}\nrows = {}\ncols = {}\nrepeats = {}",
            inner.join(", "),
            self.bench.rows,
            self.bench.cols,
            self.bench.repeats
        );
        s
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
