use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use scenewright_service::api::{router, AppState};
use scenewright_service::commands::{self, Pipeline};
use scenewright_service::Runtime;

#[derive(Parser)]
#[command(
    name = "scenewright",
    version,
    about = "Co-generate stories, scene graphs, image prompts and soundscape cues"
)]
struct Cli {
    #[command(flatten)]
    runtime: RuntimeArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RuntimeArgs {
    /// Directory of extra arc definitions (JSON).
    #[arg(long, global = true)]
    arcs_dir: Option<PathBuf>,
    /// Directory of extra tone entries (JSON).
    #[arg(long, global = true)]
    tones_dir: Option<PathBuf>,
    /// Backend settings file; without it, seeded mocks are used.
    #[arg(long, global = true)]
    backends: Option<PathBuf>,
    /// Stamp projects with the Unix epoch instead of the current time.
    #[arg(long, global = true)]
    fixed_clock: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a starter story config.
    New {
        #[arg(default_value = "story.config.json")]
        path: PathBuf,
        #[arg(long, default_value_t = 10)]
        scenes: u32,
        #[arg(long, default_value = "Classic Arc")]
        arc: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a whole story with the integrated pipeline.
    Run {
        config: PathBuf,
        #[arg(long, short, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a story with the sequential text-then-visuals baseline.
    Baseline {
        config: PathBuf,
        #[arg(long, short, default_value = "out-baseline")]
        out: PathBuf,
    },
    /// Serve the HTTP session API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value = "sessions")]
        data_dir: PathBuf,
    },
    /// Check project, config, arc, tone or graph files.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Regenerate a story on mock backends with a fixed seed and clock.
    Replay {
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, short, default_value = "replay")]
        out: PathBuf,
        /// Fail unless the result matches this project file byte for byte.
        #[arg(long)]
        golden: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn runtime(args: &RuntimeArgs) -> anyhow::Result<Runtime> {
    let rt = Runtime::load(
        args.arcs_dir.as_deref(),
        args.tones_dir.as_deref(),
        args.backends.as_deref(),
    )?;
    Ok(if args.fixed_clock {
        rt.with_fixed_clock()
    } else {
        rt
    })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::New {
            path,
            scenes,
            arc,
            seed,
        } => {
            commands::write_config(&commands::scaffold_config(scenes, &arc, seed), &path)?;
            println!("wrote {}", path.display());
        }
        Command::Run { config, out } => {
            let rt = runtime(&cli.runtime)?;
            let (path, project) = commands::run_to_dir(
                &rt,
                commands::read_config(&config)?,
                &out,
                Pipeline::Integrated,
            )?;
            report(&path, &project);
        }
        Command::Baseline { config, out } => {
            let rt = runtime(&cli.runtime)?;
            let (path, project) = commands::run_to_dir(
                &rt,
                commands::read_config(&config)?,
                &out,
                Pipeline::Baseline,
            )?;
            report(&path, &project);
        }
        Command::Serve { addr, data_dir } => {
            let rt = runtime(&cli.runtime)?;
            serve(rt, addr, data_dir)?;
        }
        Command::Validate { files } => {
            let rt = runtime(&cli.runtime)?;
            let mut failed = false;
            for f in &files {
                match commands::validate_file(&rt, f) {
                    Ok(kind) => println!("ok    {} ({kind:?})", f.display()),
                    Err(e) => {
                        failed = true;
                        println!("error {}: {e:#}", f.display());
                    }
                }
            }
            if failed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Replay {
            config,
            seed,
            out,
            golden,
        } => {
            let path = commands::replay(
                commands::read_config(&config)?,
                seed,
                &out,
                golden.as_deref(),
            )?;
            println!("replayed seed {seed} into {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn report(path: &std::path::Path, project: &scenewright::project::StoryProject) {
    for s in &project.scenes {
        let stage = if s.stage_name.is_empty() {
            "-"
        } else {
            &s.stage_name
        };
        println!(
            "scene {:>2}  {stage:<15} {} warning(s)",
            s.index,
            s.warnings.len()
        );
    }
    println!("saved {}", path.display());
}

#[tokio::main]
async fn serve(rt: Runtime, addr: SocketAddr, data_dir: PathBuf) -> anyhow::Result<()> {
    std::fs::create_dir_all(&data_dir)?;
    let state = Arc::new(AppState::new(rt, &data_dir));
    let restored = state.restore().await;
    log::info!("restored {restored} session(s) from {}", data_dir.display());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
