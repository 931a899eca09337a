use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedlp::config::{RunConfig, RunManifest};
use fedlp::metrics::{emit_csv, RunSummary};
use fedlp::{Error, Simulation};

#[derive(Parser)]
#[command(name = "fedlp", version, about = "Federated learning simulator with layer-wise pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its metrics CSV and manifest.
    Run {
        config: PathBuf,
        /// Overrides of the form --key=value (any config key, e.g. --seed=3 --workers=4).
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Monte-Carlo check of the expected aggregate scaling 1 - (1 - p)^K.
    #[command(name = "verify-prop1")]
    VerifyProp1 {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 1_000_000)]
        trials: u64,
        #[arg(long)]
        seed: u64,
    },
    /// Print per-client sample counts and class histograms without training.
    #[command(name = "partition-stats")]
    PartitionStats {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InsufficientSamples { .. } => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for arg in raw {
        match arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            Some((k, v)) if !k.is_empty() => out.push((k.to_string(), v.to_string())),
            _ => bad.push(format!("override `{arg}` is not of the form --key=value")),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(Failure::Config(bad.join("\n")))
    }
}

fn load(config: &PathBuf, overrides: &[String]) -> Result<RunConfig, Failure> {
    let overrides = parse_overrides(overrides)?;
    match RunConfig::from_file(config, &overrides) {
        Ok(c) => Ok(c),
        // An unreadable config file is a configuration problem, not a run failure.
        Err(e @ Error::Io { .. }) => Err(Failure::Config(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn cmd_run(config: PathBuf, overrides: Vec<String>) -> Result<(), Failure> {
    let rc = load(&config, &overrides)?;
    let mut sim = Simulation::new(rc.experiment.clone())?;
    sim.run()?;
    let flops = sim.mean_local_model_flops();
    let metrics = sim.history().to_vec();
    emit_csv(&metrics, &rc.metrics_csv)?;
    let manifest = RunManifest {
        config: rc.clone(),
        config_source: Some(config),
    };
    manifest.write(rc.manifest_path())?;

    let summary = RunSummary::from_metrics(&metrics);
    println!(
        "{:<22} {:>18} {:>20} {:>14}",
        "Method", "Test accuracy (%)", "Comm. #param (k)", "Comp. MFLOPs"
    );
    println!(
        "{:<22} {:>18} {:>20.2} {:>14.4}",
        method_label(&rc),
        summary
            .final_accuracy
            .map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a)),
        summary.mean_comm_per_participant / 1e3,
        flops / 1e6
    );
    if let Some(last) = metrics.iter().rev().find(|m| m.is_evaluated()) {
        println!(
            "round={} acc={:.6} up={} down={}",
            last.round,
            last.test_accuracy.unwrap_or(0.0),
            last.upload_params,
            last.download_params
        );
    }
    Ok(())
}

fn method_label(rc: &RunConfig) -> String {
    use fedlp::Scheme;
    match &rc.experiment.scheme {
        Scheme::FedAvg => "FedAvg".into(),
        Scheme::FedLpHomo(lpr) => {
            let r = lpr.rates();
            if r.iter().all(|&x| x == r[0]) {
                format!("FedLP-Homo({})", r[0])
            } else {
                "FedLP-Homo(mixed)".into()
            }
        }
        Scheme::FedLpHetero(_) => "FedLP-Hetero".into(),
    }
}

fn cmd_verify(k: usize, p: f64, trials: u64, seed: u64) -> Result<bool, Failure> {
    let r = fedlp::verify_prop1(k, p, trials, seed)?;
    println!("k={}", r.k);
    println!("p={}", r.p);
    println!("trials={}", r.trials);
    println!("empirical_ratio={:.10}", r.empirical_ratio);
    println!("closed_form={:.10}", r.closed_form);
    println!("abs_error={:.3e}", r.abs_error);
    println!("std_error={:.3e}", r.std_error);
    let ok = r.within_three_sigma();
    println!("within_3_sigma={ok}");
    Ok(ok)
}

fn cmd_partition_stats(config: PathBuf, overrides: Vec<String>) -> Result<(), Failure> {
    let rc = load(&config, &overrides)?;
    let sim = Simulation::new(rc.experiment)?;
    let train = sim.train_set();
    let part = sim.partition();
    let classes = train.num_classes;
    let header: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
    println!("client,count,{}", header.join(","));
    for (id, idx) in part.assignments.iter().enumerate() {
        let hist = train.class_histogram(idx);
        let hist: Vec<String> = hist.iter().map(usize::to_string).collect();
        println!("{id},{},{}", idx.len(), hist.join(","));
    }
    println!(
        "total_assigned={} dataset={}",
        part.total_assigned(),
        train.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides } => cmd_run(config, overrides).map(|_| true),
        Command::VerifyProp1 { k, p, trials, seed } => cmd_verify(k, p, trials, seed),
        Command::PartitionStats { config, overrides } => {
            cmd_partition_stats(config, overrides).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error:\n{msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
