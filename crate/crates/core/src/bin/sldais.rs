use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sldais::error::{Error, Result};
use sldais::model::LikelihoodKind;
use sldais::oracle::{report, GaussianMoments};
use sldais::train::{check::run_checks, generate, run_fit, write_csv, GenSpec, RunConfig};

#[derive(Parser)]
#[command(name = "sldais", version, about = "Annealed variational inference with surrogate likelihoods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a variational approximation. Metrics go to stdout as JSON lines unless --out is given.
    Fit {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the final report (default: stderr).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Closed-form posterior and evidence for a linear-regression config.
    Oracle {
        config: PathBuf,
        /// Also enumerate the minibatch mixture for the config's batch size.
        #[arg(long)]
        aggregate: bool,
    },
    /// Write a synthetic dataset described by a JSON spec.
    Gen { spec: PathBuf, out: PathBuf },
    /// Run the invariant suite.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Fit { config, out, report } => {
            let cfg = RunConfig::load(&config)?;
            let mut sink: Box<dyn Write> = match &out {
                Some(p) => Box::new(BufWriter::new(create(p)?)),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            let outcome = run_fit(cfg, sink.as_mut())?;
            sink.flush()?;
            let text = serde_json::to_string_pretty(&outcome.report)?;
            match report {
                Some(p) => std::fs::write(p, text + "\n")?,
                None => eprintln!("{text}"),
            }
        }
        Command::Oracle { config, aggregate } => {
            let cfg = RunConfig::load(&config)?;
            if cfg.model != LikelihoodKind::Linear {
                return Err(Error::config("the oracle needs a linear model"));
            }
            let data = cfg.load_data()?;
            let model = cfg.build_model(data.d())?;
            let batch = if aggregate {
                Some(cfg.resolved_batch(data.n())?)
            } else {
                None
            };
            let r = report(&GaussianMoments::prior_of(&model), data.x(), data.y(), cfg.sigma_obs, batch)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Gen { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", spec.display()))))?;
            let spec: GenSpec = serde_json::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
            let (data, z_star) = generate(&spec)?;
            write_csv(&out, &data)?;
            eprintln!("{}", serde_json::json!({ "rows": data.n(), "z_star": z_star }));
        }
        Command::Check => {
            let results = run_checks();
            let mut ok = true;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                ok &= r.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
