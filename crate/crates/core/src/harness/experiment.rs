//! Training runs, resume, and the ablation grid.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::ExperimentConfig;
use super::data::{Dataset, Splits};
use super::metrics::{read_metrics, MetricRecord, MetricsWriter};
use crate::binarize::ScaleMode;
use crate::error::{Error, Result};
use crate::latent::Decomposition;
use crate::train::{evaluate, train_step, Batch, Network, ParamSet, TrainConfig, TrainState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.ini";
pub const EVAL_BATCH: usize = 250;

pub fn checkpoint_name(completed_epochs: usize) -> String {
    format!("epoch-{completed_epochs:03}.bnck")
}

/// Example order of `epoch`: a shuffle seeded by the run seed, on a stream
/// selected by the epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn train_config(cfg: &ExperimentConfig, steps_per_epoch: u64) -> TrainConfig {
    TrainConfig {
        optimizer: cfg.optimizer,
        schedule: cfg.schedule(),
        steps_per_epoch,
        weight_decay: cfg.weight_decay,
        bn_momentum: cfg.bn_momentum,
    }
}

pub fn steps_per_epoch(cfg: &ExperimentConfig, train: &Dataset) -> Result<u64> {
    match train.len() / cfg.batch_size {
        0 => Err(Error::Config(format!(
            "training split of {} examples is smaller than one batch of {}",
            train.len(),
            cfg.batch_size
        ))),
        s => Ok(s as u64),
    }
}

pub fn initial_state(cfg: &ExperimentConfig, net: &Network, steps_per_epoch: u64) -> Result<TrainState> {
    TrainState::init(net, cfg.seed, cfg.schedule().lr_at_step(0, steps_per_epoch))
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Latest checkpoint written, if any epoch completed in this call.
    pub checkpoint: Option<PathBuf>,
}

/// Trains until `cfg.epochs` epochs are complete, writing metrics, the config
/// and one checkpoint per epoch into `out`. With `resume`, continues from the
/// checkpoint's step; metrics already in `out` past that step are discarded.
pub fn run_training(
    cfg: &ExperimentConfig,
    splits: &Splits,
    out: &Path,
    resume: Option<Checkpoint>,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_text()).map_err(|e| Error::io(&config_path, e))?;
    let net = cfg.network()?;
    let spe = steps_per_epoch(cfg, &splits.train)?;
    let tc = train_config(cfg, spe);
    let metrics_path = out.join(METRICS_FILE);
    let (mut state, kept) = match resume {
        Some(ck) => {
            if ck.config.hash() != cfg.hash() {
                return Err(Error::Config(
                    "checkpoint was written by a different configuration (only epochs and output dir may change)".into(),
                ));
            }
            let kept = if metrics_path.exists() {
                let step = ck.state.step;
                read_metrics(&metrics_path)?.into_iter().filter(|r| r.step <= step).collect()
            } else {
                Vec::new()
            };
            (ck.state, kept)
        }
        None => (initial_state(cfg, &net, spe)?, Vec::new()),
    };
    let mut metrics = MetricsWriter::create(&metrics_path, &kept)?;
    let bs = cfg.batch_size;
    let mut checkpoint = None;
    let start_epoch = (state.step / spe) as usize;
    for epoch in start_epoch..cfg.epochs {
        let order = epoch_order(splits.train.len(), cfg.seed, epoch);
        let first = (state.step % spe) as usize;
        for b in first..spe as usize {
            let chunk = splits.train.gather(&order[b * bs..(b + 1) * bs]);
            let batch = Batch {
                images: chunk.images,
                labels: chunk.labels,
            };
            let report = match train_step(&net, &mut state, &tc, &batch) {
                Ok(r) => r,
                Err(e) => {
                    metrics.flush()?;
                    return Err(e);
                }
            };
            metrics.push(&MetricRecord {
                step: state.step,
                epoch,
                split: "train".into(),
                loss: report.loss,
                accuracy: report.accuracy,
                lr: report.lr,
            })?;
        }
        let (loss, accuracy) = evaluate(&net, &state.params, &splits.test.images, &splits.test.labels, EVAL_BATCH)?;
        metrics.push(&MetricRecord {
            step: state.step,
            epoch,
            split: "test".into(),
            loss,
            accuracy,
            lr: state.lr,
        })?;
        metrics.flush()?;
        let path = out.join(checkpoint_name(epoch + 1));
        save_checkpoint(&path, cfg, &state)?;
        checkpoint = Some(path);
    }
    metrics.flush()?;
    let (test_loss, test_accuracy) =
        evaluate(&net, &state.params, &splits.test.images, &splits.test.labels, EVAL_BATCH)?;
    Ok(RunOutcome {
        state,
        test_loss,
        test_accuracy,
        checkpoint,
    })
}

/// Held-out loss and accuracy of `params`.
pub fn evaluate_params(cfg: &ExperimentConfig, params: &ParamSet, test: &Dataset) -> Result<(f64, f64)> {
    evaluate(&cfg.network()?, params, &test.images, &test.labels, EVAL_BATCH)
}

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationCell {
    pub decomposition: Decomposition,
    pub scale: ScaleMode,
}

impl AblationCell {
    pub fn name(&self) -> String {
        let scale = match self.scale {
            ScaleMode::AnalyticPerFilter => "analytic",
            ScaleMode::LearnedPerFilter => "learned",
        };
        format!("{}-{scale}", self.decomposition.name())
    }

    pub fn uses_tucker(&self) -> bool {
        matches!(self.decomposition, Decomposition::Tucker | Decomposition::Holistic)
    }

    pub fn holistic(&self) -> bool {
        self.decomposition == Decomposition::Holistic
    }
}

/// Tucker on/off x holistic on/off x analytic/learned scaling, without the
/// holistic-without-Tucker combinations.
pub fn ablation_grid() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for decomposition in [Decomposition::None, Decomposition::Tucker, Decomposition::Holistic] {
        for scale in [ScaleMode::AnalyticPerFilter, ScaleMode::LearnedPerFilter] {
            cells.push(AblationCell { decomposition, scale });
        }
    }
    cells
}

pub fn cell_config(base: &ExperimentConfig, cell: AblationCell, seed: u64, out: &Path) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.decomposition = cell.decomposition;
    cfg.scale = cell.scale;
    cfg.seed = seed;
    cfg.output_dir = out.join(cell.name()).join(format!("seed-{seed}"));
    cfg
}

/// Runs every cell for every seed under `out/<cell>/seed-<n>/`, then summarizes
/// from the files written.
pub fn run_ablation(
    base: &ExperimentConfig,
    splits: &Splits,
    cells: &[AblationCell],
    seeds: &[u64],
    out: &Path,
    mut progress: impl FnMut(&ExperimentConfig, &RunOutcome),
) -> Result<Vec<SummaryRow>> {
    for &cell in cells {
        for &seed in seeds {
            let cfg = cell_config(base, cell, seed, out);
            let outcome = run_training(&cfg, splits, &cfg.output_dir, None)?;
            progress(&cfg, &outcome);
        }
    }
    let rows = summarize(out)?;
    write_summary_csv(&out.join("summary.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub decomposition: Decomposition,
    pub scale: ScaleMode,
    /// Final held-out accuracy of each run, ordered by seed.
    pub accuracies: Vec<(u64, f64)>,
    pub median_accuracy: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn cell_rank(d: Decomposition, s: ScaleMode) -> (usize, usize) {
    let d = match d {
        Decomposition::None => 0,
        Decomposition::Svd { .. } => 1,
        Decomposition::Tucker => 2,
        Decomposition::Holistic => 3,
    };
    (d, usize::from(s == ScaleMode::LearnedPerFilter))
}

/// Rebuilds the ablation table from `<dir>/*/*/{config.ini, metrics.jsonl}`:
/// the last held-out record of each run, grouped by decomposition and scale.
pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut runs: Vec<(Decomposition, ScaleMode, u64, f64)> = Vec::new();
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    for cell in read_dir(dir)? {
        for run in read_dir(&cell)? {
            let (cfg_path, metrics_path) = (run.join(CONFIG_FILE), run.join(METRICS_FILE));
            if !cfg_path.exists() || !metrics_path.exists() {
                continue;
            }
            let cfg = ExperimentConfig::load(&cfg_path, None)?;
            let last = read_metrics(&metrics_path)?.into_iter().rev().find(|r| r.split == "test");
            if let Some(r) = last {
                runs.push((cfg.decomposition, cfg.scale, cfg.seed, r.accuracy));
            }
        }
    }
    runs.sort_by(|a, b| cell_rank(a.0, a.1).cmp(&cell_rank(b.0, b.1)).then(a.2.cmp(&b.2)));
    let mut rows: Vec<SummaryRow> = Vec::new();
    for (d, s, seed, acc) in runs {
        match rows.last_mut() {
            Some(r) if r.decomposition == d && r.scale == s => r.accuracies.push((seed, acc)),
            _ => rows.push(SummaryRow {
                decomposition: d,
                scale: s,
                accuracies: vec![(seed, acc)],
                median_accuracy: 0.0,
            }),
        }
    }
    for r in &mut rows {
        r.median_accuracy = median(&r.accuracies.iter().map(|a| a.1).collect::<Vec<_>>());
    }
    Ok(rows)
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn row_flags(r: &SummaryRow) -> (&'static str, &'static str, &'static str) {
    let decomposed = match r.decomposition {
        Decomposition::None => "none",
        Decomposition::Svd { .. } => "svd",
        Decomposition::Tucker | Decomposition::Holistic => "tucker",
    };
    let holistic = yes_no(r.decomposition == Decomposition::Holistic);
    let learned = yes_no(r.scale == ScaleMode::LearnedPerFilter);
    (decomposed, holistic, learned)
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "| {:<13} | {:<8} | {:<12} | {:>4} | {:>15} |\n|{}|{}|{}|{}|{}|\n",
        "Decomposition",
        "Holistic",
        "Learn. alpha",
        "runs",
        "median acc. (%)",
        "-".repeat(15),
        "-".repeat(10),
        "-".repeat(14),
        "-".repeat(6),
        "-".repeat(17)
    );
    for r in rows {
        let (d, h, l) = row_flags(r);
        s += &format!(
            "| {d:<13} | {h:<8} | {l:<12} | {:>4} | {:>15.2} |\n",
            r.accuracies.len(),
            100.0 * r.median_accuracy
        );
    }
    s
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let werr = |e: csv::Error| Error::Config(e.to_string());
    w.write_record(["decomposition", "holistic", "learned_alpha", "runs", "median_accuracy", "accuracies"])
        .map_err(werr)?;
    for r in rows {
        let (d, h, l) = row_flags(r);
        let accs: Vec<String> = r.accuracies.iter().map(|(s, a)| format!("{s}:{a}")).collect();
        w.write_record([
            d,
            h,
            l,
            &r.accuracies.len().to_string(),
            &r.median_accuracy.to_string(),
            &accs.join(" "),
        ])
        .map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
