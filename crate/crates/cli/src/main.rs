use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dharq_cli::commands::{self, Context};
use dharq_cli::config::ExperimentConfig;
use dharq_cli::output::Table;

#[derive(Parser)]
#[command(name = "dharq", version, about = "Finite-blocklength HARQ analysis and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytical PER and throughput over an SNR grid
    Analyze(Flags),
    /// Monte Carlo simulation with analytical columns alongside
    Simulate(Flags),
    /// Analytical PER and throughput over information lengths at one SNR
    SweepRate(Flags),
    /// Empirical distribution of the conditional packet error
    Cdf(Flags),
}

/// Every flag overrides the same key of the config file.
#[derive(Args, Default)]
struct Flags {
    /// Flat key=value file applied before the flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    n: Option<String>,
    /// Retransmission limit
    #[arg(long = "L")]
    l: Option<String>,
    /// Credit caps, comma separated
    #[arg(long)]
    m: Option<String>,
    /// start:stop:step in dB, or a single value
    #[arg(long)]
    snr_db: Option<String>,
    /// Comma separated subset of fixed,harq,dharq
    #[arg(long)]
    protocols: Option<String>,
    /// cc or ir
    #[arg(long)]
    scheme: Option<String>,
    /// normal or verbatim
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    packets: Option<String>,
    #[arg(long)]
    warmup: Option<String>,
    #[arg(long)]
    replicas: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Fading samples per averaged error probability
    #[arg(long)]
    samples: Option<String>,
    /// Information lengths as start:stop:step or a list
    #[arg(long)]
    k_grid: Option<String>,
    #[arg(long)]
    realizations: Option<String>,
    #[arg(long)]
    cdf_points: Option<String>,
    /// cap or termination
    #[arg(long)]
    cdf_point: Option<String>,
    /// CSV destination (stdout when absent)
    #[arg(long)]
    out: Option<String>,
    /// Also write the table as JSON
    #[arg(long)]
    json: Option<String>,
    /// Persistent cache of averaged error probabilities
    #[arg(long)]
    cache: Option<String>,
}

impl Flags {
    fn build(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path).map_err(|e| e.to_string())?;
        }
        let pairs = [
            ("k", &self.k),
            ("n", &self.n),
            ("L", &self.l),
            ("m", &self.m),
            ("snr-db", &self.snr_db),
            ("protocols", &self.protocols),
            ("scheme", &self.scheme),
            ("mode", &self.mode),
            ("packets", &self.packets),
            ("warmup", &self.warmup),
            ("replicas", &self.replicas),
            ("seed", &self.seed),
            ("samples", &self.samples),
            ("k-grid", &self.k_grid),
            ("realizations", &self.realizations),
            ("cdf-points", &self.cdf_points),
            ("cdf-point", &self.cdf_point),
            ("out", &self.out),
            ("json", &self.json),
            ("cache", &self.cache),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.apply(key, v).map_err(|e| e.to_string())?;
            }
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn emit(ctx: &Context, table: &Table) -> io::Result<()> {
    match &ctx.config.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            table.write_csv(&mut w)?;
            w.flush()?;
        }
        None => table.write_csv(io::stdout().lock())?,
    }
    if let Some(path) = &ctx.config.json {
        table.write_json(path)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, flags) = match &cli.command {
        Command::Analyze(f) => ("analyze", f),
        Command::Simulate(f) => ("simulate", f),
        Command::SweepRate(f) => ("sweep-rate", f),
        Command::Cdf(f) => ("cdf", f),
    };
    let cfg = match flags.build() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("dharq: {e}");
            return ExitCode::from(2);
        }
    };
    let ctx = match Context::new(cfg) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("dharq: {e}");
            return ExitCode::from(2);
        }
    };
    let table = match cli.command {
        Command::Analyze(_) => commands::analyze_table(&ctx, name, &commands::cmd_analyze(&ctx)),
        Command::SweepRate(_) => commands::analyze_table(&ctx, name, &commands::cmd_sweep_rate(&ctx)),
        Command::Simulate(_) => commands::simulate_table(&ctx, &commands::cmd_simulate(&ctx)),
        Command::Cdf(_) => commands::cdf_table(&ctx, &commands::cmd_cdf(&ctx)),
    };
    if let Err(e) = emit(&ctx, &table) {
        eprintln!("dharq: writing output: {e}");
        return ExitCode::from(1);
    }
    if let Err(e) = ctx.finish() {
        eprintln!("dharq: saving cache: {e}");
        return ExitCode::from(1);
    }
    let failed = commands::failures(&table);
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for f in &failed {
            eprintln!("dharq: {f}");
        }
        ExitCode::from(3)
    }
}
