use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Result;
use clap::{Args, CommandFactory, Parser, Subcommand};
use ganlocal_core::editor::{EditMode, DEFAULT_RHO_RATIO};
use ganlocal_gateway::commands::{self, EditArgs, GenArgs, SweepArgs};
use ganlocal_gateway::project::{Project, ProjectConfig};
use ganlocal_gateway::server::{serve, AppState};
use ganlocal_gateway::{error_code, UsageError};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "ganlocal",
    version,
    about = "Unsupervised part discovery and local style editing"
)]
struct Cli {
    /// Project root holding the catalog and outputs.
    #[arg(long, global = true, env = "GANLOCAL_DATA", default_value = ".")]
    data: PathBuf,
    /// Report errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render samples with their styles and layer captures.
    Gen(GenCli),
    /// Cluster base-layer features into a catalog and attribute every layer.
    Cluster(ClusterCli),
    /// Export per-layer attribution matrices from the catalog.
    Attribute(AttributeCli),
    /// Transfer one part's style from a reference onto a target.
    Edit(EditCli),
    /// Run paired edits over a list of strengths and write a CSV.
    Sweep(SweepCli),
    /// Fréchet distance between two directories of PNGs.
    Frechet(FrechetCli),
    /// Serve the JSON API.
    Serve(ServeCli),
}

#[derive(Args)]
struct GenCli {
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = 0)]
    generator_seed: u64,
    /// Layers to capture, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterCli {
    #[arg(long, default_value_t = 15)]
    k: usize,
    /// Number of generated samples to cluster.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Seed for k-means initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    base_layer: usize,
    #[arg(long, default_value_t = 0)]
    generator_seed: u64,
    /// Create one part per cluster.
    #[arg(long)]
    singleton_parts: bool,
}

#[derive(Args)]
struct AttributeCli {
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EditCli {
    #[arg(long)]
    target_seed: u64,
    #[arg(long)]
    ref_seed: u64,
    /// Part id or label.
    #[arg(long)]
    part: String,
    #[arg(long, default_value = "sequential")]
    mode: EditMode,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_RHO_RATIO)]
    rho_ratio: f64,
    /// Restrict the edit to these layers, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCli {
    #[arg(long, default_value = "sequential")]
    mode: EditMode,
    #[arg(long, value_delimiter = ',', conflicts_with = "lambdas")]
    epsilons: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, default_value_t = 10_000)]
    first_seed: u64,
    /// Use this part for every pair instead of cycling.
    #[arg(long)]
    part: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RHO_RATIO)]
    rho_ratio: f64,
}

#[derive(Args)]
struct FrechetCli {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 8)]
    grid: usize,
}

#[derive(Args)]
struct ServeCli {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn usage(message: String) -> anyhow::Error {
    UsageError(message).into()
}

fn params_or_usage(
    mode: EditMode,
    lambda: Option<f64>,
    epsilon: Option<f64>,
    rho: f64,
) -> Result<ganlocal_core::editor::EditParams> {
    commands::edit_params(mode, lambda, epsilon, Some(rho)).map_err(|(field, msg)| usage(format!("--{field}: {msg}")))
}

fn run(cli: Cli) -> Result<Option<Value>> {
    let project = Project::new(&cli.data);
    Ok(Some(match cli.command {
        Command::Gen(a) => commands::gen(&GenArgs {
            count: a.count,
            first_seed: a.first_seed,
            generator_seed: a.generator_seed,
            layers: a.layers,
            out: a.out.unwrap_or_else(|| cli.data.join("samples")),
        })?,
        Command::Cluster(a) => {
            let mut cfg = ProjectConfig::new(&cli.data);
            cfg.k = a.k;
            cfg.sample_count = a.count;
            cfg.base_layer_id = a.base_layer;
            cfg.generator_seed = a.generator_seed;
            commands::cluster(&cfg, a.seed, a.singleton_parts)?
        }
        Command::Attribute(a) => {
            let out = a.out.unwrap_or_else(|| cli.data.join("attributions"));
            commands::attribute(&project, &out)?
        }
        Command::Edit(a) => {
            let params = params_or_usage(a.mode, a.lambda, a.epsilon, a.rho_ratio)?;
            commands::edit_cmd(
                &project,
                &EditArgs {
                    target_seed: a.target_seed,
                    reference_seed: a.ref_seed,
                    part: a.part,
                    params,
                    layers: a.layers.map(|l| l.into_iter().collect::<BTreeSet<_>>()),
                    out: a.out,
                },
            )?
        }
        Command::Sweep(a) => {
            let strengths = match a.mode {
                EditMode::Sequential => &a.epsilons,
                EditMode::Global | EditMode::Simultaneous => &a.lambdas,
            };
            if strengths.is_empty() {
                let flag = if a.mode == EditMode::Sequential {
                    "--epsilons"
                } else {
                    "--lambdas"
                };
                return Err(usage(format!("{flag} is required for mode {}", a.mode)));
            }
            let settings = strengths
                .iter()
                .map(|&s| match a.mode {
                    EditMode::Sequential => params_or_usage(a.mode, None, Some(s), a.rho_ratio),
                    _ => params_or_usage(a.mode, Some(s), None, a.rho_ratio),
                })
                .collect::<Result<Vec<_>>>()?;
            commands::sweep_cmd(
                &project,
                &SweepArgs {
                    settings,
                    pairs: a.pairs,
                    first_seed: a.first_seed,
                    part: a.part,
                    out: a.out.unwrap_or_else(|| cli.data.join(format!("sweep_{}.csv", a.mode))),
                },
            )?
        }
        Command::Frechet(a) => commands::frechet(&a.a, &a.b, a.grid)?,
        Command::Serve(a) => {
            let state = Arc::new(AppState::load(project)?);
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(serve(state, &a.host, a.port))?;
            return Ok(None);
        }
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json_errors = cli.json;
    match run(cli) {
        Ok(Some(summary)) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            // A closed pipe downstream is not a failure of the command.
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(err) => {
            let code = error_code(&err);
            if json_errors {
                eprintln!(
                    "{}",
                    json!({ "error": { "code": code, "message": format!("{err:#}") } })
                );
            } else if code == "usage" {
                let mut cmd = Cli::command();
                cmd.error(clap::error::ErrorKind::ValueValidation, format!("{err:#}"))
                    .print()
                    .ok();
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(if code == "usage" { 2 } else { 1 })
        }
    }
}
