use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use focalcount::config::ExperimentConfig;
use focalcount::synthgen::{corpus_specs, write_corpus_csv};
use focalcount::trainer::{ablation_csv, run_ablation_matrix, run_experiment, write_outputs};
use focalcount::verify::{run_all, Fault};
use focalcount::{plot, Error};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "focalcount", version, about = "Attribute-weighted Focal-MSE counting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded corpus description as CSV.
    GenCorpus {
        #[arg(long)]
        n: usize,
        /// Fraction of single-category scenes.
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set epochs=10`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Replace the corpus, init and Dirichlet seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the ablation matrix over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the gradient, Dirichlet, dominance and attribute checks.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Render MAE and leakage charts from one or more training logs.
    Plot {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    DropEsGradient,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Parse { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(path: &Path, overrides: &[String]) -> focalcount::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_file(path)?;
    config.apply_overrides(overrides)?;
    config.validate()?;
    Ok(config)
}

fn gen_corpus(n: usize, fraction: f64, seed: u64, out: &Path) -> focalcount::Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config {
            key: "fraction".into(),
            reason: format!("{fraction} outside [0, 1]"),
        });
    }
    let specs = corpus_specs(n, fraction, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_corpus_csv(out, &specs)?;
    println!("wrote {} scenes to {}", specs.len(), out.display());
    Ok(())
}

fn train(config: &Path, overrides: &[String], seed: Option<u64>) -> focalcount::Result<()> {
    let mut config = load_config(config, overrides)?;
    if let Some(s) = seed {
        config.reseed(s);
    }
    let start = Instant::now();
    let outcome = run_experiment(&config)?;
    write_outputs(&config, &outcome)?;
    let e = &outcome.final_eval;
    println!(
        "trained {} epochs in {:.1}s: mae {:.4} rmse {:.4} leakage {:.4} -> {}",
        config.epochs,
        start.elapsed().as_secs_f64(),
        e.mae,
        e.rmse,
        e.leakage,
        config.output_dir.display()
    );
    Ok(())
}

fn ablate(config: &Path, seeds: u64, overrides: &[String]) -> focalcount::Result<()> {
    if seeds == 0 {
        return Err(Error::Config {
            key: "seeds".into(),
            reason: "need at least one seed".into(),
        });
    }
    let config = load_config(config, overrides)?;
    let results = run_ablation_matrix(&config, seeds)?;
    let table = ablation_csv(&results);
    std::fs::create_dir_all(&config.output_dir)?;
    std::fs::write(config.output_dir.join("ablation.csv"), &table)?;
    std::fs::write(config.output_dir.join("config.txt"), config.to_text())?;
    print!("{table}");
    Ok(())
}

fn verify(fault: Option<FaultArg>) -> ExitCode {
    let fault = fault.map(|f| match f {
        FaultArg::DropEsGradient => Fault::DropEsGradient,
    });
    let start = Instant::now();
    let results = run_all(fault);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn plot_logs(logs: &[PathBuf], out: &Path) -> focalcount::Result<()> {
    let series = plot::load_series(logs).map_err(|e| match e {
        Error::Io(err) => Error::Config {
            key: "log".into(),
            reason: err.to_string(),
        },
        other => other,
    })?;
    for path in plot::write_charts(&series, out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("FOCALCOUNT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| format!("FOCALCOUNT_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match cli.command {
        Command::GenCorpus { n, fraction, seed, out } => gen_corpus(n, fraction, seed, &out),
        Command::Train { config, overrides, seed } => train(&config, &overrides, seed),
        Command::Ablate { config, seeds, overrides } => ablate(&config, seeds, &overrides),
        Command::Verify { inject_fault } => return verify(inject_fault),
        Command::Plot { logs, out } => plot_logs(&logs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
