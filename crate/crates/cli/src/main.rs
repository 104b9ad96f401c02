//! `impc` binary: closed-loop simulation, one-step benchmarking, map
//! generation, and boundary-detector training.
//!
//! Exit codes: 0 on success, 2 for configuration errors (bad flags, bad
//! config or model files), 3 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use impc_cli::{benchmark, maps, sbdtool, scenarios, simulate};
use impc_core::geometry::{load_map, save_map, ObstacleMap};
use impc_core::sbd::{MlpModel, TrainConfig};

#[derive(Parser)]
#[command(
    name = "impc",
    about = "Iterative convex MPC with barrier constraints: simulation, \
             benchmarking, map generation, and detector training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop scenario; writes <scenario>.csv and <scenario>.json.
    Simulate {
        /// JSON run configuration (scenario name, optional model path).
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// One-step solve benchmark over a horizon/order grid of random states.
    Benchmark {
        /// Optional JSON spec; defaults to the full grid with 1000 trials.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a boundary detector on a map file.
    TrainSbd {
        /// Map JSON produced by make-maps.
        #[arg(long)]
        map: PathBuf,
        /// Where to save the trained model.
        #[arg(long)]
        out_model: PathBuf,
        /// Spatial error CSV; defaults to <out-model>.heatmap.csv.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// First hidden-layer width.
        #[arg(long, default_value_t = 512)]
        width: usize,
        /// Number of hidden layers.
        #[arg(long, default_value_t = 9)]
        layers: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        patience: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Heatmap resolution (cells per axis).
        #[arg(long, default_value_t = 60)]
        heatmap_grid: usize,
    },
    /// Generate one of the shipped maps as JSON.
    MakeMaps {
        #[arg(long, value_enum)]
        kind: MapKind,
        /// Output map path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved detector against exact nearest points.
    EvalSbd {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Optional spatial error CSV.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        heatmap_grid: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MapKind {
    /// Unit circle at the origin.
    Circle,
    /// Five mixed convex and nonconvex obstacles.
    FiveIrregular,
    /// Two boundary bands forming a winding track.
    NarrowTrack,
}

/// JSON schema for `simulate --config`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    /// One of: circle-crossing, cluttered-field, narrow-track.
    scenario: String,
    /// Trained detector model; map scenarios only. Without it the exact
    /// pixel-search oracle provides nearest points.
    #[serde(default)]
    model: Option<PathBuf>,
    /// Overrides the scenario's step budget.
    #[serde(default)]
    max_steps: Option<usize>,
}

/// Errors that indicate a bad configuration rather than a failed run.
struct ConfigError(anyhow::Error);

fn config_err<E: Into<anyhow::Error>>(e: E) -> ConfigError {
    ConfigError(e.into())
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("IMPC_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("config error: IMPC_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Ok(ConfigError(e))) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

/// `Err(Ok(_))` is a configuration error (exit 2), `Err(Err(_))` a runtime
/// failure (exit 3).
fn run(command: Command) -> Result<(), Result<ConfigError, anyhow::Error>> {
    match command {
        Command::Simulate { config, out } => {
            let scenario = load_simulate_config(&config).map_err(|e| Ok(e))?;
            let summary = simulate::run_scenario(&scenario, Some(&out)).map_err(Err)?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| Err(e.into()))?);
            Ok(())
        }
        Command::Benchmark { config, out } => {
            let spec = match config {
                Some(path) => load_json::<benchmark::BenchmarkSpec>(&path).map_err(|e| Ok(e))?,
                None => benchmark::BenchmarkSpec::default(),
            };
            let cells = benchmark::run_benchmark(&spec).map_err(Err)?;
            benchmark::write_benchmark_csv(&cells, &out).map_err(Err)?;
            Ok(())
        }
        Command::TrainSbd {
            map,
            out_model,
            heatmap,
            samples,
            width,
            layers,
            epochs,
            learning_rate,
            batch_size,
            patience,
            seed,
            heatmap_grid,
        } => {
            let map = load_map_file(&map).map_err(|e| Ok(e))?;
            let spec = sbdtool::TrainSpec {
                samples,
                first_width: width,
                hidden_layers: layers,
                seed,
                config: TrainConfig {
                    learning_rate,
                    batch_size,
                    max_epochs: epochs,
                    patience,
                    validation_fraction: 0.1,
                    shuffle_seed: seed,
                },
            };
            let outcome = sbdtool::train_on_map(&map, &spec).map_err(Err)?;
            outcome
                .model
                .save(&out_model)
                .context("saving model")
                .map_err(Err)?;
            let heatmap = heatmap.unwrap_or_else(|| {
                let mut p = out_model.as_os_str().to_owned();
                p.push(".heatmap.csv");
                PathBuf::from(p)
            });
            sbdtool::write_mse_heatmap(&outcome.model, &map, heatmap_grid, &heatmap)
                .map_err(Err)?;
            println!(
                "{}",
                serde_json::json!({
                    "epochs_run": outcome.report.epochs_run,
                    "final_train_loss": outcome.report.final_train_loss,
                    "best_validation_loss": outcome.report.best_validation_loss,
                    "test_mse": outcome.test.mean_squared_error,
                    "test_max_se": outcome.test.max_squared_error,
                    "model": out_model,
                    "heatmap": heatmap,
                })
            );
            Ok(())
        }
        Command::MakeMaps { kind, out } => {
            let map = match kind {
                MapKind::Circle => maps::circle_map(),
                MapKind::FiveIrregular => maps::five_obstacle_map(),
                MapKind::NarrowTrack => maps::narrow_track_map(),
            }
            .map_err(Err)?;
            save_map(&map, &out).context("writing map").map_err(Err)?;
            Ok(())
        }
        Command::EvalSbd {
            model,
            map,
            samples,
            seed,
            heatmap,
            heatmap_grid,
        } => {
            let map = load_map_file(&map).map_err(|e| Ok(e))?;
            let model = MlpModel::load(&model)
                .context("loading model")
                .map_err(config_err)
                .map_err(Ok)?;
            if model.points_out() != map.obstacles.len() {
                return Err(Ok(config_err(anyhow!(
                    "model predicts {} points but the map has {} obstacles",
                    model.points_out(),
                    map.obstacles.len()
                ))));
            }
            let report = sbdtool::eval_on_map(&model, &map, samples, seed).map_err(Err)?;
            if let Some(path) = heatmap {
                sbdtool::write_mse_heatmap(&model, &map, heatmap_grid, &path).map_err(Err)?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "test_mse": report.mean_squared_error,
                    "test_max_se": report.max_squared_error,
                    "samples": samples,
                })
            );
            Ok(())
        }
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(config_err)
}

fn load_map_file(path: &Path) -> Result<ObstacleMap, ConfigError> {
    load_map(path)
        .with_context(|| format!("loading map {}", path.display()))
        .map_err(config_err)
}

fn load_simulate_config(path: &Path) -> Result<scenarios::Scenario, ConfigError> {
    let cfg: SimulateConfig = load_json(path)?;
    let source = |model: &Option<PathBuf>| -> Result<scenarios::BoundarySource, ConfigError> {
        Ok(match model {
            None => scenarios::BoundarySource::Oracle,
            Some(p) => scenarios::BoundarySource::Learned(
                MlpModel::load(p).context("loading model").map_err(config_err)?,
            ),
        })
    };
    let mut scenario = match cfg.scenario.as_str() {
        "circle-crossing" => {
            if cfg.model.is_some() {
                return Err(config_err(anyhow!(
                    "circle-crossing uses the analytic circle detector; \
                     a model file does not apply"
                )));
            }
            scenarios::circle_crossing().map_err(config_err)?
        }
        "cluttered-field" => scenarios::cluttered_field(source(&cfg.model)?).map_err(config_err)?,
        "narrow-track" => scenarios::narrow_track(source(&cfg.model)?).map_err(config_err)?,
        other => {
            return Err(config_err(anyhow!(
                "unknown scenario {other:?}; expected circle-crossing, \
                 cluttered-field, or narrow-track"
            )))
        }
    };
    if let Some(steps) = cfg.max_steps {
        scenario.task.max_steps = steps;
    }
    Ok(scenario)
}
