//! Command-line driver. Exit codes: 0 success, 1 validation failure (bad
//! flags, bad config, malformed inputs), 2 runtime failure (I/O, non-finite
//! loss, failed gradient audit).

use buildmamba::config::TrainConfig;
use buildmamba::gradcheck;
use buildmamba::layers::Ctx;
use buildmamba::losses::LossConfig;
use buildmamba::metrics::{MetricsConfig, CSV_HEADER};
use buildmamba::model::{Model, ModelConfig};
use buildmamba::params::ParamStore;
use buildmamba::render::{render_panels, write_pgm_mask, write_ppm};
use buildmamba::ssm::{bench_csv, bench_scan};
use buildmamba::synthdata::{load_sample, read_index, write_dataset, SceneConfig, SceneSample, Split};
use buildmamba::tensor::write_bmt;
use buildmamba::trainer::{self, LADDER_HEADER, LOG_HEADER};
use buildmamba::{Error, Result, Tensor};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "buildmamba", version, about = "Building extraction and height estimation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val scene directories + index.csv)
    GenData {
        /// Dataset directory to create
        #[arg(long)]
        out: PathBuf,
        /// Number of training scenes
        #[arg(long)]
        scenes: usize,
        /// Number of validation scenes (default: scenes / 4, at least 1)
        #[arg(long)]
        val_scenes: Option<usize>,
        /// Scene edge length in pixels
        #[arg(long, default_value_t = 64)]
        extent: usize,
        /// Base RNG seed; scenes draw from disjoint per-split ranges above it
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset; writes log.csv, config.txt and best checkpoints
    Train {
        /// Dataset directory from gen-data
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory to create
        #[arg(long)]
        out: PathBuf,
        /// key = value config file (defaults apply when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed from the config file
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score the best-IoU checkpoint of a run on the validation split
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory written by train
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-sample predictions: mask as PGM, heights as BMT1 tensors
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory written by train; dumps land in <out>/predictions
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the cumulative ablation ladder and report one row per arm
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train a single named arm (backbone, mam, smamba_fpn, mhr)
        #[arg(long)]
        ablation_arm: Option<String>,
    },
    /// Audit analytic gradients against finite differences
    Gradcheck {
        /// Module to audit, or "all"
        #[arg(long, default_value = "all")]
        module: String,
        /// Random trials per op
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the selective scan against a dense self-attention reference
    BenchScan {
        /// Comma-separated ascending sequence lengths
        #[arg(long, default_value = "256,512,1024,2048,4096,8192")]
        lengths: String,
        /// Timing repeats per length
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
    /// Write side-by-side PPM strips for the validation split
    Render {
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory written by train; strips land in <out>/renders
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; they are not failures
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", e);
        std::process::exit(if e.is_validation() { 1 } else { 2 });
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::parse(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_splits(dataset: &Path) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    Ok((
        buildmamba::synthdata::load_split(dataset, Split::Train)?,
        buildmamba::synthdata::load_split(dataset, Split::Val)?,
    ))
}

/// Rebuild the model of a finished run and load its best-IoU checkpoint.
fn load_run(run: &Path) -> Result<(TrainConfig, Model, ParamStore)> {
    let cfg = TrainConfig::parse(&read_text(&run.join("config.txt"))?)?;
    let (mut store, model) = Model::build(&cfg.model_config(), cfg.seed)?;
    store.load(&run.join("best_iou"))?;
    Ok((cfg, model, store))
}

fn unsqueeze(t: &Tensor) -> Result<Tensor> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.reshape(&s)
}

/// Run the model over every val sample, handing (name, sample, S, H_ref) to
/// the sink.
fn for_each_val_prediction(
    dataset: &Path,
    run: &Path,
    mut sink: impl FnMut(&str, &SceneSample, &Tensor, &Tensor) -> Result<()>,
) -> Result<()> {
    let (_, model, store) = load_run(run)?;
    let bound = store.bind();
    for entry in read_index(dataset)? {
        if entry.split != Split::Val {
            continue;
        }
        let sample = load_sample(dataset, &entry.name)?;
        let img = unsqueeze(&sample.image)?;
        let preds = model.fwd(&bound, &img, &mut Ctx::eval())?;
        sink(&entry.name, &sample, &preds.s, &preds.h_ref)?;
    }
    Ok(())
}

fn ensure_dir(d: &Path) -> Result<()> {
    std::fs::create_dir_all(d).map_err(|e| Error::Io { path: d.display().to_string(), source: e })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, scenes, val_scenes, extent, seed } => {
            let n_val = val_scenes.unwrap_or_else(|| (scenes / 4).max(1));
            let cfg = SceneConfig { extent, seed, ..Default::default() };
            write_dataset(&out, &cfg, scenes, n_val)?;
            println!("wrote {} train + {} val scenes of {}x{} px to {}", scenes, n_val, extent, extent, out.display());
        }
        Command::Train { dataset, out, config, seed } => {
            let cfg = resolve_config(config.as_deref(), seed)?;
            let (train_set, val_set) = load_splits(&dataset)?;
            let outcome = trainer::train(&cfg.model_config(), &cfg, &train_set, &val_set, Some(&out))?;
            println!("{}", LOG_HEADER);
            for row in outcome.log.iter().rev().take(2).rev() {
                println!("{}", row);
            }
            println!(
                "best val: iou {:.4} (best_iou/), rmse {:.3} m (best_rmse/)",
                outcome.best_iou.iou, outcome.best_rmse.rmse
            );
        }
        Command::Eval { dataset, out } => {
            let (_, model, store) = load_run(&out)?;
            let val = buildmamba::synthdata::load_split(&dataset, Split::Val)?;
            let (rep, _) = trainer::evaluate(&model, &store, &val, &LossConfig::default(), MetricsConfig::default())?;
            println!("{}", CSV_HEADER);
            println!("{}", rep.csv_row());
        }
        Command::Infer { dataset, out } => {
            let dir = out.join("predictions");
            ensure_dir(&dir)?;
            let mut n = 0usize;
            for_each_val_prediction(&dataset, &out, |name, sample, s, h_ref| {
                let hw = &sample.mask.shape()[1..];
                write_pgm_mask(&dir.join(format!("{}_mask.pgm", name)), s)?;
                write_bmt(&dir.join(format!("{}_height.bmt", name)), &h_ref.reshape(&[1, hw[0], hw[1]])?)?;
                n += 1;
                Ok(())
            })?;
            println!("wrote {} prediction pairs to {}", n, dir.display());
        }
        Command::Ablate { dataset, out, config, seed, ablation_arm } => {
            let cfg = resolve_config(config.as_deref(), seed)?;
            let (train_set, val_set) = load_splits(&dataset)?;
            let base = ModelConfig::default();
            match ablation_arm {
                Some(arm) => {
                    let mc = base
                        .with_arm(&arm)
                        .ok_or_else(|| Error::Config(format!("unknown arm '{}'; arms: {:?}", arm, ModelConfig::arm_names())))?;
                    let outcome = trainer::train(&mc, &cfg, &train_set, &val_set, Some(&out.join(&arm)))?;
                    println!("{}", LOG_HEADER);
                    for row in outcome.log.iter().rev().take(2).rev() {
                        println!("{}", row);
                    }
                }
                None => {
                    let rows = trainer::run_ablation_ladder(&base, &cfg, &train_set, &val_set, Some(&out))?;
                    println!("{}", LADDER_HEADER);
                    for row in rows {
                        println!("{}", row);
                    }
                }
            }
        }
        Command::Gradcheck { module, trials, seed } => {
            let reports = gradcheck::run_checks(&module, trials, seed)?;
            println!("op,trials,max_rel_err,tolerance,status");
            let mut failed = 0usize;
            for r in &reports {
                println!(
                    "{},{},{:.3e},{:.0e},{}",
                    r.op,
                    r.trials,
                    r.max_rel_err,
                    r.tolerance,
                    if r.passed() { "pass" } else { "FAIL" }
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                eprintln!("error: {} of {} gradient checks failed", failed, reports.len());
                std::process::exit(2);
            }
        }
        Command::BenchScan { lengths, trials } => {
            let mut ls = Vec::new();
            for tok in lengths.split(',') {
                let l: usize = tok
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad length '{}' in --lengths", tok)))?;
                if ls.last().is_some_and(|&p| p >= l) {
                    return Err(Error::Config("--lengths must be strictly ascending".into()));
                }
                ls.push(l);
            }
            let rows = bench_scan(&ls, trials)?;
            print!("{}", bench_csv(&rows));
        }
        Command::Render { dataset, out } => {
            let dir = out.join("renders");
            ensure_dir(&dir)?;
            let mut n = 0usize;
            for_each_val_prediction(&dataset, &out, |name, sample, s, h_ref| {
                let (rgb, w, h) = render_panels(&sample.image, &sample.mask, s, &sample.height, h_ref)?;
                write_ppm(&dir.join(format!("{}.ppm", name)), &rgb, w, h)?;
                n += 1;
                Ok(())
            })?;
            println!("wrote {} strips to {}", n, dir.display());
        }
    }
    Ok(())
}
