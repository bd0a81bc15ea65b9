use advtt_cli::config::{ExperimentConfig, KEYS};
use advtt_cli::{run, CliError, Command};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "advtt", version, about = "Adversarial test-time training experiments on synthetic segmentation data")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args)]
struct Flags {
    /// Key-value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent TTT
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overwrite existing outputs
    #[arg(long, global = true)]
    force: bool,
    /// synth: apply the intensity shift to the test split
    #[arg(long, global = true)]
    shift: bool,
    /// TTT loss
    #[arg(long, global = true, value_parser = ["adversarial", "reconstruction", "both"])]
    mode: Option<String>,
    #[arg(long, global = true, value_parser = ["gan", "causal"])]
    model: Option<String>,
    /// Any config key, e.g. --set train.max_epochs=20 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the synthetic dataset
    Synth,
    /// Train the segmentation GAN (or causal model)
    Train,
    /// Adapt each test subject independently
    Ttt,
    /// Adapt along the test stream, carrying the adaptor over
    Continual,
    /// Score adapted predictions against ground truth
    Eval,
    /// Run ablation rows over several seeds
    Ablate,
    /// Classify discriminator convergence from a history CSV
    Diagnose,
    /// Print every configuration key
    Keys,
}

impl Flags {
    fn overrides(&self) -> Result<Vec<(String, String)>, String> {
        let mut o = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            o.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_owned(), v));
            }
        };
        flag("run_dir", self.run_dir.as_ref().map(|p| p.display().to_string()));
        flag("seed", self.seed.map(|s| s.to_string()));
        flag("jobs", self.jobs.map(|j| j.to_string()));
        flag("force", self.force.then(|| "true".to_owned()));
        flag("data.shift", self.shift.then(|| "true".to_owned()));
        flag("ttt.mode", self.mode.clone());
        flag("model", self.model.clone());
        Ok(o)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Keys => {
            for (k, doc) in KEYS {
                let default = ExperimentConfig::default().get(k).unwrap_or_default();
                println!("{k} = {default}\t# {doc}");
            }
            return ExitCode::SUCCESS;
        }
        Cmd::Synth => Command::Synth,
        Cmd::Train => Command::Train,
        Cmd::Ttt => Command::Ttt,
        Cmd::Continual => Command::Continual,
        Cmd::Eval => Command::Eval,
        Cmd::Ablate => Command::Ablate,
        Cmd::Diagnose => Command::Diagnose,
    };
    let result = cli
        .flags
        .overrides()
        .map_err(|m| CliError::new(advtt_cli::ErrorCode::ConfigInvalid, m))
        .and_then(|o| ExperimentConfig::resolve(cli.flags.config.as_deref(), &o).map_err(CliError::from))
        .and_then(|cfg| run(command, &cfg));
    match result {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code.exit_code() as u8)
        }
    }
}
