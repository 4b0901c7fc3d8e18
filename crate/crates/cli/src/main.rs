use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use famp::config::{EnvKind, ExperimentConfig};
use famp::experiment::{self, EvalRequest, Mode};
use famp::geodesic::write_grid_csv;
use famp::nn::MlpParams;
use famp::ssm::{read_rollouts, write_rollouts};
use famp::Error;

#[derive(Parser)]
#[command(name = "famp", version, about = "Filter-aware model predictive control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed (overrides `[experiment] seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Environment (overrides `[experiment] env`).
    #[arg(long, value_parser = ["darkzone", "arm"])]
    env: Option<String>,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Collect vanilla-MPC rollouts as JSON lines.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        len: Option<usize>,
    },
    /// Train the trackability network on a rollout file.
    Train {
        #[command(flatten)]
        common: Common,
        /// Rollout dataset produced by `collect`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the network's values on a grid as CSV.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 100)]
        res: usize,
    },
    /// Evaluate one or more controllers on shared rollout seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list of vanilla, filteraware, easy.
        #[arg(long, default_value = "vanilla")]
        mode: String,
        /// Trackability weights (required for filteraware).
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        len: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Json { .. } => 2,
        Error::EmptyData(_) => 3,
        Error::Shape { .. } => 4,
        Error::MissingArtifact(_) => 5,
        _ => 1,
    }
}

fn load_config(common: &Common) -> famp::Result<ExperimentConfig> {
    let env = common.env.as_deref().map(str::parse::<EnvKind>).transpose()?;
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path, env)?,
        None => ExperimentConfig::from_toml("", env)?,
    };
    if let Some(seed) = common.seed {
        cfg.experiment.seed = seed;
    }
    Ok(cfg)
}

fn create(path: &Path) -> famp::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn finish(mut w: BufWriter<File>, path: &Path) -> famp::Result<()> {
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> famp::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Json {
        context: "writing report".into(),
        source: e,
    })?;
    writeln!(w).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    finish(w, path)
}

fn run(cli: Cli) -> famp::Result<()> {
    match cli.command {
        Command::Collect { common, n, len } => {
            let cfg = load_config(&common)?;
            let n = n.unwrap_or(cfg.collect.n_rollouts);
            let len = len.unwrap_or(cfg.collect.length);
            if n == 0 {
                log::warn!("--n 0: writing an empty dataset");
            }
            let mut w = create(&common.out)?;
            let rollouts = experiment::collect(&cfg, n, len)?;
            write_rollouts(&mut w, &rollouts)?;
            finish(w, &common.out)?;
            let errors: Vec<f64> = rollouts.iter().flat_map(|r| r.errors.iter().copied()).collect();
            let mean = if errors.is_empty() {
                0.0
            } else {
                errors.iter().sum::<f64>() / errors.len() as f64
            };
            println!("collected {} rollouts, mean tracking error {mean:.6}", rollouts.len());
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let file = File::open(&data).map_err(|e| Error::Io {
                path: data.clone(),
                source: e,
            })?;
            let rollouts = read_rollouts(BufReader::new(file))?;
            if rollouts.is_empty() {
                return Err(Error::EmptyData(format!("{} has no rollouts", data.display())));
            }
            let outcome = experiment::train(&cfg, &rollouts)?;
            let meta = experiment::weights_metadata(&cfg, &outcome, rollouts.len());
            outcome.params.save(&common.out, meta)?;
            println!("trained on {} rollouts, final loss {:.6}", rollouts.len(), outcome.final_loss);
        }
        Command::Heatmap { common, weights, res } => {
            let cfg = load_config(&common)?;
            let (net, _) = MlpParams::load(&weights)?;
            let grid = experiment::heatmap(&cfg, &net, res)?;
            let mut w = create(&common.out)?;
            write_grid_csv(&mut w, &grid, res).map_err(|e| Error::Io {
                path: common.out.clone(),
                source: e,
            })?;
            finish(w, &common.out)?;
            println!("wrote {res}x{res} grid");
        }
        Command::Eval {
            common,
            mode,
            weights,
            n,
            len,
        } => {
            let cfg = load_config(&common)?;
            let modes = mode
                .split(',')
                .map(|m| m.trim().parse::<Mode>())
                .collect::<famp::Result<Vec<_>>>()?;
            let net = match &weights {
                Some(p) => Some(MlpParams::load(p)?.0),
                None => None,
            };
            let n = n.unwrap_or(cfg.eval.n_rollouts);
            let len = len.unwrap_or(cfg.eval.length);
            let mut reports = Vec::with_capacity(modes.len());
            for m in &modes {
                let report = experiment::evaluate(
                    &cfg,
                    &EvalRequest {
                        mode: *m,
                        n,
                        length: len,
                        net: net.as_ref(),
                    },
                )?;
                println!(
                    "{m}: success {:.3}, tracking error {:.5}, cost {:.3}, {:.1} Hz",
                    report.success_rate, report.mean_tracking_error, report.mean_total_cost, report.planner_hz
                );
                reports.push(report);
            }
            if reports.len() == 1 {
                write_json(&common.out, &reports[0])?;
            } else {
                write_json(&common.out, &experiment::pair_reports(reports))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
