use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use hqm_core::harness::{
    ablate, dump_attention, evaluate, grad_check, train, train_on, Benchmark, RunConfig,
    GRAD_CHECK_STRATEGIES, VAL_SEED_OFFSET,
};
use hqm_core::hqm::StrategyKind;
use hqm_core::model::Checkpoint;
use hqm_core::scenes::Dataset;
use hqm_core::{HqmError, Result};

#[derive(Parser)]
#[command(name = "hqm", version, about = "Synthetic HOI detector with hard-positive query mining")]
struct Cli {
    /// Run configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (for gen-data: the data seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and validation splits as JSON.
    GenData {
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
    },
    /// Train one model and write metrics.csv plus a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSON; defaults to the configured validation split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train several strategies over several seeds and tabulate.
    Ablate {
        /// Comma-separated labels such as `baseline,ajl,amm_only+no_topk`.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write per-layer, per-head attention maps of one scene as CSV.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Compare analytic and numeric gradients on a tiny model.
    GradCheck {
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Strategy label; overrides the configured one.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, requires = "val_data")]
    train_data: Option<PathBuf>,
    #[arg(long, requires = "train_data")]
    val_data: Option<PathBuf>,
}

fn load_config(cli: &Cli, fallback: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => fallback,
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_json(&fs::read_to_string(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { train, val } => {
            let mut cfg = load_config(&cli, RunConfig::default())?;
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            let d = &cfg.data;
            d.scene.validate()?;
            let train = Dataset::generate(&d.scene, d.seed, "train", train.unwrap_or(d.train_scenes))?;
            let val = Dataset::generate(
                &d.scene,
                d.seed.wrapping_add(VAL_SEED_OFFSET),
                "val",
                val.unwrap_or(d.val_scenes),
            )?;
            fs::create_dir_all(&cfg.out_dir)?;
            for ds in [&train, &val] {
                let path = cfg.out_dir.join(format!("{}.json", ds.split));
                fs::write(&path, ds.to_json()?)?;
                println!("wrote {} scenes to {}", ds.scenes.len(), path.display());
            }
        }
        Command::Train(args) => {
            let mut cfg = load_config(&cli, RunConfig::default())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(s) = &args.strategy {
                cfg.strategy = s.parse()?;
            }
            if let Some(e) = args.epochs {
                cfg.optim.epochs = e;
            }
            cfg.validate()?;
            let summary = match (&args.train_data, &args.val_data) {
                (Some(t), Some(v)) => {
                    let bench = Benchmark::from_datasets(&cfg, read_dataset(t)?, read_dataset(v)?)?;
                    train_on(&cfg, Arc::new(bench))?
                }
                _ => train(&cfg)?,
            };
            for m in &summary.metrics {
                println!(
                    "epoch {:>3}  loss {:.4}  L_l {:.4}  L_h {:.4}  val mAP {:.4}",
                    m.epoch, m.loss_total, m.loss_l, m.loss_h, m.val_map
                );
            }
            println!("metrics: {}", summary.metrics_path.display());
            println!("checkpoint: {}", summary.checkpoint_path.display());
        }
        Command::Eval { checkpoint, data } => {
            let cfg = load_config(&cli, RunConfig::default())?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let dataset = match data {
                Some(p) => read_dataset(p)?,
                None => Benchmark::generate(&cfg)?.val,
            };
            let report = evaluate(&ckpt, &dataset, &cfg.eval)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate {
            strategies,
            seeds,
            epochs,
        } => {
            let mut cfg = load_config(&cli, RunConfig::default())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(list) = strategies {
                cfg.ablation.strategies = list.clone();
            }
            if let Some(list) = seeds {
                cfg.ablation.seeds = list.clone();
            }
            if let Some(e) = epochs {
                cfg.optim.epochs = *e;
            }
            cfg.validate()?;
            let strategies = cfg.ablation_strategies()?;
            let table = ablate(&cfg, &strategies)?;
            for s in &table.summaries {
                println!(
                    "{:<28} median final mAP {:.4}  median epochs to {:.2}: {}",
                    s.strategy, s.median_final_map, cfg.eval.map_threshold, s.median_epochs_to_threshold
                );
            }
            println!("table: {}", cfg.out_dir.join("ablation.csv").display());
        }
        Command::DumpAttn {
            checkpoint,
            data,
            scene,
        } => {
            let cfg = load_config(&cli, RunConfig::default())?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let dataset = match data {
                Some(p) => read_dataset(p)?,
                None => Benchmark::generate(&cfg)?.val,
            };
            let s = dataset.scenes.get(*scene).ok_or_else(|| {
                HqmError::Config(format!("scene {scene} out of range ({} scenes)", dataset.scenes.len()))
            })?;
            for p in dump_attention(&ckpt, s, &cfg.out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::GradCheck { strategies } => {
            let mut cfg = load_config(&cli, RunConfig::tiny())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let kinds: Vec<StrategyKind> = match strategies {
                Some(list) => list.iter().map(|s| s.parse()).collect::<Result<_>>()?,
                None => GRAD_CHECK_STRATEGIES.to_vec(),
            };
            let summary = grad_check(&cfg, &kinds)?;
            for row in &summary.rows {
                println!("{:<10} {:<18} {:.3e}", row.strategy, row.group, row.max_rel_error);
            }
            for (s, e) in &summary.per_strategy {
                println!("{s:<10} max {e:.3e}");
            }
            let worst = summary.max_rel_error();
            if worst >= 1e-4 {
                return Err(HqmError::Numeric(format!("max relative error {worst:.3e} exceeds 1e-4")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

