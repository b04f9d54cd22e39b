use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use steered_cli::{run, CliError, CliResult, Command, Config};

#[derive(Parser)]
#[command(name = "steered", version, about = "Steered diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    samples: Option<usize>,

    /// Number of noise levels.
    #[arg(long, global = true)]
    steps: Option<usize>,

    #[arg(long, global = true)]
    eta: Option<f64>,

    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Plain reverse sampling.
    Uncond,
    /// Inpainting, colorization, super-resolution or coordinate constraints.
    Linear,
    /// Label steering toward one mixture component.
    Guided,
    /// Sweep the steering strength.
    SweepK,
    /// Paired implicit vs latent-space steering.
    AblateSpace,
    /// Train a denoiser on toy images.
    Train,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Uncond => Command::Uncond,
            Cmd::Linear => Command::Linear,
            Cmd::Guided => Command::Guided,
            Cmd::SweepK => Command::SweepK,
            Cmd::AblateSpace => Command::AblateSpace,
            Cmd::Train => Command::Train,
        }
    }
}

fn config(cli: &Cli) -> CliResult<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(v) = cli.seed {
        cfg.set("run.seed", &v.to_string())?;
    }
    if let Some(v) = &cli.out {
        let v = v.to_str().ok_or_else(|| CliError::Validation("output path is not UTF-8".into()))?;
        cfg.set("run.out", v)?;
    }
    if let Some(v) = cli.samples {
        cfg.set("run.samples", &v.to_string())?;
    }
    if let Some(v) = cli.steps {
        cfg.set("schedule.steps", &v.to_string())?;
    }
    if let Some(v) = cli.eta {
        cfg.set("schedule.eta", &v.to_string())?;
    }
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage mistakes are validation errors; help and version are not errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = config(&cli).and_then(|cfg| run(cli.command.into(), &cfg));
    match result {
        Ok(summary) => {
            print!("{}", summary.report.render());
            println!("out = {}", summary.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
