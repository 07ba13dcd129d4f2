use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ldlif_core::data::{gen_synthetic, SyntheticConfig};
use ldlif_core::events::{decode, save_dataset};

mod config;
mod run;

#[derive(Parser)]
#[command(
    name = "ldlif",
    version,
    about = "Linear-decay LIF training, CIM macro simulation and cost reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a job described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a labeled synthetic dataset as an event file.
    GenData {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 50)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 0.4)]
        rate_high: f64,
        #[arg(long, default_value_t = 0.05)]
        rate_low: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print an event file's header and event counts.
    Inspect {
        #[arg(long)]
        events: PathBuf,
    },
}

enum Failure {
    /// Rejected before any work started; nothing was written.
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LDLF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("LDLF_THREADS={v:?} is not a count"))?;
    if n == 0 {
        bail!("LDLF_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn run_job(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let overrides = config::Overrides { seed, out_dir: out };
    let job = config::load(&config, &overrides).map_err(Failure::Config)?;
    let artifacts = run::execute(&job).map_err(Failure::Runtime)?;
    run::write_all(&job.out_dir, &artifacts).map_err(Failure::Runtime)?;
    for a in &artifacts {
        println!("{}", job.out_dir.join(&a.name).display());
    }
    Ok(())
}

fn gen_data(cfg: SyntheticConfig, out: PathBuf) -> Result<()> {
    let data = gen_synthetic(&cfg)?;
    save_dataset(&out, &data).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn inspect(path: PathBuf) -> Result<()> {
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let file = decode(BufReader::new(f)).with_context(|| format!("decoding {}", path.display()))?;
    let h = file.header;
    let counts: Vec<usize> = file.samples.iter().map(|s| s.events.len()).collect();
    let total: usize = counts.iter().sum();
    println!("version: {}", h.version);
    println!("neurons: {}", h.neuron_count);
    println!("timesteps: {}", h.timestep_count);
    println!("samples: {}", h.sample_count);
    println!("events: {total}");
    if let (Some(min), Some(max)) = (counts.iter().min(), counts.iter().max()) {
        let mean = total as f64 / counts.len() as f64;
        println!("events per sample: min {min}, max {max}, mean {mean:.2}");
    }
    let mut labels: BTreeMap<u32, usize> = BTreeMap::new();
    let mut unlabeled = 0;
    for s in &file.samples {
        match s.label {
            Some(l) => *labels.entry(l).or_default() += 1,
            None => unlabeled += 1,
        }
    }
    if !labels.is_empty() {
        let parts: Vec<String> = labels.iter().map(|(l, n)| format!("{l}={n}")).collect();
        println!("labels: {}", parts.join(" "));
    }
    if unlabeled > 0 {
        println!("unlabeled: {unlabeled}");
    }
    Ok(())
}

fn report(kind: &str, err: &anyhow::Error) {
    let msg = serde_json::json!({
        "status": "error",
        "kind": kind,
        "message": format!("{err:#}"),
    });
    eprintln!("{msg}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        report("config", &e);
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Run { config, seed, out } => match run_job(config, seed, out) {
            Ok(()) => return ExitCode::SUCCESS,
            Err(Failure::Config(e)) => {
                report("config", &e);
                return ExitCode::from(2);
            }
            Err(Failure::Runtime(e)) => Err(e),
        },
        Command::GenData {
            classes,
            width,
            steps,
            samples_per_class,
            rate_high,
            rate_low,
            seed,
            out,
        } => gen_data(
            SyntheticConfig {
                classes,
                width,
                steps,
                samples_per_class,
                rate_high,
                rate_low,
                seed,
            },
            out,
        ),
        Command::Inspect { events } => inspect(events),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report("runtime", &e);
            ExitCode::FAILURE
        }
    }
}
