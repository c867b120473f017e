use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use apex_cli::commands::{self, ReplayArgs};
use apex_cli::server::{router, AppState};
use apex_core::backend::BACKEND_URL_ENV;
use apex_core::{AnswerPolicy, BackendSelection, RemoteConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "apex", version, about = "Step tracking for guided lab procedures")]
struct Cli {
    /// Directory of .sop files (and optional planner.toml). Defaults to the
    /// bundled atlas.
    #[arg(long, global = true)]
    atlas_dir: Option<PathBuf>,
    /// Defaults to info for `serve` and warn otherwise.
    #[arg(long, global = true)]
    log_level: Option<tracing::Level>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Scripted,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the session API over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Backend for sessions whose config does not choose one.
        #[arg(long, value_enum, default_value = "scripted")]
        backend: BackendKind,
    },
    /// Replay a recording against ground truth and report metrics.
    Replay {
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Session config (JSON). Overrides --script.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scripted backend table (JSON lines); plans come from the
        /// recording header.
        #[arg(long)]
        script: Option<PathBuf>,
        /// oracle, refuse, or fixed:K
        #[arg(long, default_value = "oracle")]
        answer: AnswerPolicy,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a noisy synthetic replay case.
    Synth {
        #[arg(long)]
        sop: String,
        #[arg(long)]
        frames_per_step: usize,
        #[arg(long)]
        flip: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run every replay case in a directory and check its expectations.
    Bench {
        #[arg(long)]
        suite: PathBuf,
        /// Write the machine-readable report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_max_level(cli.log_level.unwrap_or(match cli.command {
            Command::Serve { .. } => tracing::Level::INFO,
            _ => tracing::Level::WARN,
        }))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let (atlas, planner) = commands::load_atlas(cli.atlas_dir.as_deref())?;
    match cli.command {
        Command::Serve {
            port,
            host,
            backend,
        } => {
            let default_backend = match backend {
                BackendKind::Scripted => BackendSelection::default(),
                BackendKind::Remote => {
                    if std::env::var_os(BACKEND_URL_ENV).is_none() {
                        tracing::warn!("{BACKEND_URL_ENV} is not set; sessions must give a url");
                    }
                    BackendSelection::Remote(RemoteConfig::default())
                }
            };
            let state = Arc::new(AppState::new(atlas, planner, default_backend));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                tracing::info!(addr = %listener.local_addr()?, "listening");
                axum::serve(listener, router(state)).await?;
                Ok::<_, anyhow::Error>(())
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay {
            recording,
            truth,
            config,
            script,
            answer,
            out,
        } => {
            let args = ReplayArgs {
                recording: &recording,
                truth: &truth,
                config: config.as_deref(),
                script: script.as_deref(),
                answer,
                out: out.as_deref(),
            };
            let metrics = commands::run_replay(&args, &atlas, &planner)?;
            print!("{}", commands::metrics_summary(&metrics));
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            sop,
            frames_per_step,
            flip,
            seed,
            out,
        } => {
            let path = commands::run_synth(&sop, frames_per_step, flip, seed, &out, &atlas)?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { suite, json } => {
            let report = commands::run_bench(&suite, &atlas, &planner)?;
            print!("{}", commands::bench_table(&report));
            let text = serde_json::to_string_pretty(&report)?;
            match json {
                Some(path) => std::fs::write(&path, text)?,
                None => println!("{text}"),
            }
            Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
