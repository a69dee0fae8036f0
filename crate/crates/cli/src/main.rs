use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dualalign::data::{generate_dataset, load_dataset, GenerateOptions, SplitKind};
use dualalign::detect::{evaluate, Inference, SCORE_THRESHOLD};
use dualalign::harness::{ablate, checkpoint, sweep, train, OrderingCheck, Precision, SweepParam, TrainConfig};

#[derive(Parser)]
#[command(name = "dualalign", version, about = "Cross-domain detection with style and attention alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clean/foggy dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        n_source: usize,
        #[arg(long, default_value_t = 400)]
        n_target: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        /// Render the target splits without fog.
        #[arg(long)]
        no_fog: bool,
    },
    /// Train one configuration and write run.json and checkpoint.bin.
    Train {
        /// key=value config file; defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the target test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Component and block ablations; writes ablation.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Only the four component variants.
        #[arg(long)]
        components_only: bool,
        /// Concurrent runs.
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// One run per value of a hyperparameter; writes sweep_<param>.csv.
    Sweep {
        /// gamma, epsilon3, epsilon4, epsilon5, lambda or mu.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn read_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn parse_list<V: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<V>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| anyhow::anyhow!("invalid {what} {x:?}")))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            out,
            n_source,
            n_target,
            n_test,
            no_fog,
        } => {
            let mut opts = GenerateOptions::new(seed, n_source, n_target, n_test);
            opts.fog = !no_fog;
            let m = generate_dataset(&out, &opts)?;
            for s in &m.splits {
                println!("{}: {} images", s.name.name(), s.count);
            }
        }
        Command::Train { config, data, out } => {
            let cfg = read_config(config.as_ref())?;
            let ds = load_dataset(&data)?;
            let r = train(&cfg, &ds, Some(&out))?;
            println!(
                "best mAP {:.4} (epoch {}), final mAP {:.4}, {:.1}s",
                r.best_eval.map, r.best_epoch, r.final_eval.map, r.wall_clock_secs
            );
        }
        Command::Eval { checkpoint: path, data } => {
            let ck = checkpoint::load(&path)?;
            let ds = load_dataset(&data)?;
            let test = ds.split(SplitKind::TargetTest);
            let result = match ck.config.precision {
                Precision::F32 => {
                    let m = ck.restore::<f32>()?;
                    let inf = Inference {
                        detector: &m.detector,
                        params: &m.params,
                        sa: ck.config.sa_blocks,
                    };
                    evaluate(&inf, &test.images, &test.annotations, SCORE_THRESHOLD)?
                }
                Precision::F64 => {
                    let m = ck.restore::<f64>()?;
                    let inf = Inference {
                        detector: &m.detector,
                        params: &m.params,
                        sa: ck.config.sa_blocks,
                    };
                    evaluate(&inf, &test.images, &test.annotations, SCORE_THRESHOLD)?
                }
            };
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::Ablate {
            config,
            data,
            out,
            seeds,
            components_only,
            jobs,
        } => {
            let cfg = read_config(config.as_ref())?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            if seeds.is_empty() {
                bail!("at least one seed is required");
            }
            let ds = load_dataset(&data)?;
            let rows = ablate(&cfg, &ds, Some(&out), &seeds, !components_only, jobs)?;
            for (variant, m) in dualalign::harness::mean_by_variant(&rows) {
                println!("{variant:<28} mean best mAP {:.2}", 100.0 * m);
            }
            if let Some(o) = OrderingCheck::from_rows(&rows) {
                for (what, ok) in o.checks() {
                    println!("{} {what}", if ok { "ok  " } else { "FAIL" });
                }
            }
            println!("wrote {}", out.join("ablation.csv").display());
        }
        Command::Sweep {
            param,
            values,
            config,
            data,
            out,
            jobs,
        } => {
            let cfg = read_config(config.as_ref())?;
            let param: SweepParam = param.parse()?;
            let values: Vec<f64> = parse_list(&values, "value")?;
            let ds = load_dataset(&data)?;
            let rows = sweep(param, &values, &cfg, &ds, Some(&out), jobs)?;
            for r in &rows {
                println!("{}={} best mAP {:.4}", r.param, r.value, r.best_map);
            }
            println!("wrote {}", out.join(format!("sweep_{param}.csv")).display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
