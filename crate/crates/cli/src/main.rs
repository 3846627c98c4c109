//! `bnn`: train, evaluate, export and benchmark binary CNNs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bnn_core::bitkernel::{benchmark_kernel, export_model, FrozenBinaryModel};
use bnn_core::harness::checkpoint::load_checkpoint;
use bnn_core::harness::config::{hex, ExperimentConfig};
use bnn_core::harness::data::{self, load_csv, load_idx, read_idx_images, Normalization, RawSet};
use bnn_core::harness::experiment::{self, ablation_grid, evaluate_params, run_ablation, run_training};
use bnn_core::harness::metrics::{histograms, write_histogram_csv};
use bnn_core::harness::{load_splits, summary_table};
use bnn_core::train::argmax_rows;
use bnn_core::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bnn", version, about = "Binary CNNs with latent weight factorizations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing metrics and one checkpoint per epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[experiment] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Held-out loss and accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the dataset from this config instead of the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the frozen inference model (and its input normalization).
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a frozen model on an IDX or CSV image file.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// IDX images, or CSV rows of label then pixels.
        #[arg(long)]
        input: PathBuf,
        /// IDX labels for an IDX input, to report accuracy.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Defaults to `normalization.json` next to the model.
        #[arg(long)]
        norm: Option<PathBuf>,
    },
    /// CSV histograms of scaling factors and pre-binarization weights.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// XNOR/popcount GEMM against a naive float GEMM.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the decomposition x holistic x scaling grid and tabulate it.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Runs every grid cell with only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only rebuild the table from an existing output directory.
        #[arg(long)]
        summarize_only: bool,
    },
    /// Write the synthetic glyph set as IDX files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config, seed)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
    let splits = load_splits(&cfg)?;
    eprintln!(
        "training {} / {} on {} examples, {} epochs (config {})",
        cfg.decomposition.name(),
        cfg.scale.name(),
        splits.train.len(),
        cfg.epochs,
        &hex(&cfg.hash())[..12]
    );
    let outcome = run_training(&cfg, &splits, &cfg.output_dir, resume)?;
    println!("test_loss {:.6}", outcome.test_loss);
    println!("test_accuracy {:.4}", outcome.test_accuracy);
    if let Some(ck) = outcome.checkpoint {
        println!("checkpoint {}", ck.display());
    }
    Ok(())
}

fn eval(checkpoint: &Path, config: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(path) = config {
        cfg.data = ExperimentConfig::parse_without_seed(
            &std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?,
        )?
        .data;
    }
    let splits = load_splits(&cfg)?;
    let (loss, acc) = evaluate_params(&cfg, &ck.state.params, &splits.test)?;
    println!("step {}", ck.state.step);
    println!("test_loss {loss:.6}");
    println!("test_accuracy {acc:.4}");
    Ok(())
}

fn export(checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let net = ck.config.network()?;
    let model = export_model(&net, &ck.state.params)?;
    create_dir(out)?;
    let model_path = out.join("model.bncv");
    model.save(&model_path)?;
    let (train, _) = data::load_raw(&ck.config.data)?;
    Normalization::fit(&train)?.save(&out.join("normalization.json"))?;
    println!("model {} ({} bytes)", model_path.display(), model.to_bytes().len());
    Ok(())
}

fn infer(model: &Path, input: &Path, labels: Option<PathBuf>, norm: Option<PathBuf>) -> Result<()> {
    let frozen = FrozenBinaryModel::load(model)?;
    let norm_path = norm.unwrap_or_else(|| model.with_file_name("normalization.json"));
    let normalization = Normalization::load(&norm_path)?;
    let is_csv = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (raw, has_labels) = if is_csv {
        (load_csv(input)?, true)
    } else if let Some(l) = &labels {
        (load_idx(input, l)?, true)
    } else {
        let (n, rows, cols, pixels) = read_idx_images(input)?;
        (
            RawSet {
                rows,
                cols,
                pixels,
                labels: vec![0; n],
            },
            false,
        )
    };
    let batch = normalization.apply(&raw);
    let logits = frozen.forward(&batch.images)?;
    let predicted = argmax_rows(&logits);
    println!("index,predicted{}", if has_labels { ",label" } else { "" });
    let mut hits = 0;
    for (i, p) in predicted.iter().enumerate() {
        if has_labels {
            println!("{i},{p},{}", batch.labels[i]);
            hits += usize::from(*p == batch.labels[i]);
        } else {
            println!("{i},{p}");
        }
    }
    if has_labels {
        eprintln!("accuracy {:.4} over {} images", hits as f64 / predicted.len() as f64, predicted.len());
    }
    Ok(())
}

fn hist(checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let net = ck.config.network()?;
    let (alpha, weights) = histograms(&net, &ck.state.params)?;
    create_dir(out)?;
    write_histogram_csv(&out.join("alpha_hist.csv"), &alpha)?;
    write_histogram_csv(&out.join("weight_hist.csv"), &weights)?;
    println!("{} alpha rows, {} weight rows in {}", alpha.len(), weights.len(), out.display());
    Ok(())
}

fn bench(config: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = match config {
        Some(p) => ExperimentConfig::parse_without_seed(
            &std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?,
        )?,
        None => ExperimentConfig::default(),
    };
    let b = &cfg.bench;
    let report = benchmark_kernel(&b.inner, b.rows, b.cols, b.repeats, seed.unwrap_or(cfg.seed))?;
    print!("{}", report.table());
    if report.rows.iter().any(|r| !r.agree) {
        return Err(Error::Contract("xnor and float GEMM results differ".into()));
    }
    Ok(())
}

fn ablate(config: &Path, seed: Option<u64>, out: Option<PathBuf>, summarize_only: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config, seed)?;
    if let Some(s) = seed {
        cfg.ablate_seeds = vec![s];
    }
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let rows = if summarize_only {
        experiment::summarize(&out)?
    } else {
        let splits = load_splits(&cfg)?;
        let seeds = cfg.ablate_seeds.clone();
        run_ablation(&cfg, &splits, &ablation_grid(), &seeds, &out, |c, o| {
            eprintln!(
                "{} seed {}: test accuracy {:.4}",
                experiment::AblationCell {
                    decomposition: c.decomposition,
                    scale: c.scale
                }
                .name(),
                c.seed,
                o.test_accuracy
            );
        })?
    };
    print!("{}", summary_table(&rows));
    Ok(())
}

fn synth(out: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    create_dir(out)?;
    for (name, n, s) in [("train", train, seed), ("test", test, seed.wrapping_add(1))] {
        let raw = data::synthesize(n, s);
        data::write_idx_images(&out.join(format!("{name}-images.idx")), raw.rows, raw.cols, &raw.pixels)?;
        data::write_idx_labels(&out.join(format!("{name}-labels.idx")), &raw.labels)?;
    }
    println!("wrote {train} training and {test} test images to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => train(&config, seed, out, resume),
        Command::Eval { checkpoint, config } => eval(&checkpoint, config),
        Command::Export { checkpoint, out } => export(&checkpoint, &out),
        Command::Infer {
            model,
            input,
            labels,
            norm,
        } => infer(&model, &input, labels, norm),
        Command::Hist { checkpoint, out } => hist(&checkpoint, &out),
        Command::Bench { config, seed } => bench(config, seed),
        Command::Ablate {
            config,
            seed,
            out,
            summarize_only,
        } => ablate(&config, seed, out, summarize_only),
        Command::Synth { out, train, test, seed } => synth(&out, train, test, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
