use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctn_core::pipeline::{
    build_network_stage, cluster_stage, open_store, read_edges, run_analysis_stage, run_census, run_landscape_stage,
    run_noise_stage, load_partition, RunConfig, EDGES_FILE,
};
use ctn_core::Error;
use log::{error, warn};

#[derive(Parser)]
#[command(name = "ctn", version, about = "Census, similarity network and analysis of dipole-coupled transport structures")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set n_samples=1000`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (same as `--set output_dir=...`).
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample structures and keep the efficient ones (resumes from a checkpoint).
    Sample {
        /// Stop after this many batches, leaving a checkpoint.
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Build the similarity network over stored structures.
    Network,
    /// Cluster the stored edge list and compute a layout.
    Cluster,
    /// Robustness, activity, pair and class analysis of clustered structures.
    Analyze,
    /// Evolve stored structures under the configured noise model.
    Noise,
    /// Pair landscape around the most efficient structure with a pair.
    Landscape {
        #[arg(long, default_value_t = 0.02)]
        rp_min: f64,
        #[arg(long, default_value_t = 0.6)]
        rp_max: f64,
        #[arg(long, default_value_t = 0.02)]
        rb_min: f64,
        #[arg(long, default_value_t = 0.8)]
        rb_max: f64,
        #[arg(long, default_value_t = 40)]
        points: usize,
    },
    /// Write the structure store as CSV.
    Export {
        /// Destination file (default: structures.csv in the output directory).
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

/// 1 for failures a rerun (possibly with other parameters) can fix, 2 for
/// bad input or damaged state.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotConverged { .. }
        | Error::Quadrature { .. }
        | Error::TraceDrift { .. }
        | Error::SamplingRejected { .. }
        | Error::Io(_) => 1,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (i, kv) in common.overrides.iter().enumerate() {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config {
                line: i + 1,
                message: format!("override {kv:?} is not KEY=VALUE"),
            });
        };
        config.set(i + 1, k.trim(), v.trim())?;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = load_config(&cli.common)?;
    std::fs::create_dir_all(&config.output_dir)?;
    match cli.command {
        Command::Sample { batches } => {
            let s = run_census(&config, batches)?;
            println!(
                "evaluated {} of {}, {} above {}, max epsilon {:.6}{}",
                s.n_evaluated,
                config.n_samples,
                s.n_survivors,
                config.efficiency_threshold,
                s.max_epsilon,
                if s.complete { "" } else { " (checkpointed)" }
            );
        }
        Command::Network => {
            let (structures, net) = build_network_stage(&config)?;
            println!("{} nodes, {} edges", structures.len(), net.edges.len());
        }
        Command::Cluster => {
            let n = open_store(&config)?.len();
            let net = read_edges(&config.output_dir.join(EDGES_FILE), n, config.similarity_cutoff)?;
            let (p, _) = cluster_stage(&config, &net)?;
            println!("{} clusters ({} major), noise fraction {:.4}", p.n_clusters(), p.major_clusters().len(), p.noise_fraction);
        }
        Command::Analyze => {
            let store = open_store(&config)?;
            let structures = store.load_all()?;
            let net = read_edges(&config.output_dir.join(EDGES_FILE), structures.len(), config.similarity_cutoff)?;
            let partition = load_partition(&config)?;
            if structures.is_empty() {
                warn!("store is empty; nothing to analyze");
            }
            let a = run_analysis_stage(&config, &structures, &net, &partition)?;
            for c in &a.classes.classes {
                println!(
                    "{:<13} {:>6} nodes  {:>6.1}%  mean loss {:.4}  mean t* {:.3}",
                    c.label.name(),
                    c.n_members,
                    100.0 * c.population,
                    c.mean_delta_eps_rand,
                    c.mean_t_star
                );
            }
        }
        Command::Noise => {
            let r = run_noise_stage(&config)?;
            let loss: f64 = r.iter().map(|x| x.epsilon_coherent - x.epsilon_noisy).sum::<f64>() / r.len().max(1) as f64;
            println!("{} structures, mean efficiency change {:.4}", r.len(), -loss);
        }
        Command::Landscape {
            rp_min,
            rp_max,
            rb_min,
            rb_max,
            points,
        } => match run_landscape_stage(&config, &grid(rp_min, rp_max, points), &grid(rb_min, rb_max, points))? {
            Some((seed, scan)) => println!("scanned seed {seed}: {} skipped points", scan.skipped.len()),
            None => {
                warn!("no stored structure has a pair");
                return Err(Error::InvalidConfiguration("no structure with a pair to scan".into()));
            }
        },
        Command::Export { to } => {
            let path = to.unwrap_or_else(|| config.output_dir.join("structures.csv"));
            open_store(&config)?.export_csv(BufWriter::new(File::create(&path)?))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
