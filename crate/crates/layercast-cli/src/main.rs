//! Command-line front-end: build recipes into an on-disk registry, pull
//! against a persistent layer cache with simulated timing, and emit the
//! size/rollout/optimizer reports as CSV or JSON.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use layercast::imagebuild::{self, image_size, parse_recipe, parse_reference, stack_size, Image};
use layercast::optimizer::{
    assignment_csv, assignment_json, baseline_assign, exact_assign, greedy_assign,
    services_from_json, BaseCatalog, DEFAULT_SEARCH_LIMIT,
};
use layercast::registry::{LayerCache, PullMode, Registry};
use layercast::simcost::{
    rollout_csv, rollout_json, simulate_rollout, timed_pull, CostModel, Scenario,
};

#[derive(Parser)]
#[command(
    name = "layercast",
    version,
    about = "Layered container image modeling toolkit"
)]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Globals {
    /// Root directory for the registry and cache (default: $LAYERCAST_HOME
    /// or ./.layercast).
    #[arg(long, global = true)]
    home: Option<PathBuf>,
    /// Registry store directory (default: <home>/registry).
    #[arg(long, global = true)]
    registry_dir: Option<PathBuf>,
    /// Layer cache directory (default: <home>/cache).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Report format.
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
    /// Download bandwidth override, bytes per second.
    #[arg(long, global = true)]
    bandwidth: Option<f64>,
    /// Extraction rate override, bytes per second.
    #[arg(long, global = true)]
    extract_rate: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a Buildfile into the registry and print the image size.
    Build {
        /// Buildfile path.
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
        /// Target image reference, `name:tag`.
        #[arg(short = 't', long = "tag")]
        tag: String,
        /// Flatten the result into a single monolithic layer before pushing.
        #[arg(long)]
        squash: bool,
    },
    /// Pull an image into the local cache and print the transfer report.
    Pull {
        /// Image reference, `name:tag`.
        reference: String,
        #[arg(long, value_enum, default_value_t = PullModeArg::Incremental)]
        mode: PullModeArg,
    },
    /// Print deduplicated vs summed size of a set of images.
    StackSize {
        /// Image references, `name:tag`.
        #[arg(required = true)]
        references: Vec<String>,
    },
    /// Replay a rollout scenario file and print per-version totals.
    Simulate {
        /// Scenario JSON path.
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    /// Choose base images for a service set against a base catalog.
    Optimize {
        /// Services JSON path.
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
        /// Catalog JSON path.
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, value_enum, default_value_t = SolverArg::Exact)]
        solver: SolverArg,
        /// Combination limit for the exact solver.
        #[arg(long, default_value_t = DEFAULT_SEARCH_LIMIT)]
        limit: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum PullModeArg {
    Absolute,
    Incremental,
}

impl From<PullModeArg> for PullMode {
    fn from(mode: PullModeArg) -> PullMode {
        match mode {
            PullModeArg::Absolute => PullMode::Absolute,
            PullModeArg::Incremental => PullMode::Incremental,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Exact,
    Greedy,
    Baseline,
}

/// Optional overrides read from `<home>/config.json`. Flags beat the file,
/// the file beats built-in defaults.
#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    registry_dir: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    format: Option<String>,
    bandwidth: Option<f64>,
    extract_rate: Option<f64>,
}

struct Config {
    registry_dir: PathBuf,
    cache_dir: PathBuf,
    format: OutputFormat,
    cost: CostModel,
    cost_overridden: bool,
}

enum CliError {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(error: E) -> CliError {
        CliError::User(error.into())
    }
}

fn user(message: impl Into<String>) -> CliError {
    CliError::User(anyhow!(message.into()))
}

fn resolve_config(globals: &Globals) -> Result<Config, CliError> {
    let home = globals
        .home
        .clone()
        .or_else(|| std::env::var_os("LAYERCAST_HOME").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(".layercast"));

    let config_path = home.join("config.json");
    let file: ConfigFile = if config_path.is_file() {
        let text = fs::read_to_string(&config_path)
            .with_context(|| format!("reading {}", config_path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| user(format!("malformed {}: {e}", config_path.display())))?
    } else {
        ConfigFile::default()
    };

    let format = match (&globals.format, file.format.as_deref()) {
        (Some(flag), _) => *flag,
        (None, Some("csv")) => OutputFormat::Csv,
        (None, Some("json")) => OutputFormat::Json,
        (None, Some(other)) => {
            return Err(user(format!(
                "config format must be csv or json, got `{other}`"
            )))
        }
        (None, None) => OutputFormat::Csv,
    };

    let defaults = CostModel::default();
    let cost = CostModel {
        bandwidth: globals
            .bandwidth
            .or(file.bandwidth)
            .unwrap_or(defaults.bandwidth),
        extract_rate: globals
            .extract_rate
            .or(file.extract_rate)
            .unwrap_or(defaults.extract_rate),
    };
    cost.validate().map_err(|e| user(e.to_string()))?;

    Ok(Config {
        registry_dir: globals
            .registry_dir
            .clone()
            .or(file.registry_dir)
            .unwrap_or_else(|| home.join("registry")),
        cache_dir: globals
            .cache_dir
            .clone()
            .or(file.cache_dir)
            .unwrap_or_else(|| home.join("cache")),
        format,
        cost,
        cost_overridden: globals.bandwidth.is_some()
            || globals.extract_rate.is_some()
            || file.bandwidth.is_some()
            || file.extract_rate.is_some(),
    })
}

fn load_registry(dir: &Path) -> Result<Registry, CliError> {
    if dir.join("config.json").is_file() {
        return Ok(Registry::load(dir)?);
    }
    if dir.join("blobs").exists() || dir.join("manifests").exists() {
        return Err(user(format!(
            "registry at {} has blobs but no config.json",
            dir.display()
        )));
    }
    Ok(Registry::default())
}

fn load_cache(dir: &Path) -> Result<LayerCache, CliError> {
    if dir.join("manifests").exists() {
        return Ok(LayerCache::load(dir)?);
    }
    Ok(LayerCache::new())
}

/// Renders rows either as CSV with the fixed column order or as a JSON array
/// of objects with sorted keys. Both carry exactly the same fields.
fn render_rows(format: OutputFormat, columns: &[&str], rows: &[serde_json::Value]) -> String {
    match format {
        OutputFormat::Csv => {
            let mut out = columns.join(",") + "\n";
            for row in rows {
                let cells: Vec<String> = columns
                    .iter()
                    .map(|column| match &row[*column] {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            out
        }
        OutputFormat::Json => serde_json::to_string(rows).expect("rows serialize") + "\n",
    }
}

fn cmd_build(config: &Config, file: &Path, tag: &str, squash: bool) -> Result<String, CliError> {
    let (name, tag) = parse_reference(tag).map_err(|e| user(e.to_string()))?;
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let recipe = parse_recipe(&text)?;
    let mut registry = load_registry(&config.registry_dir)?;
    let output = imagebuild::build(&recipe, |r| registry.image(r).ok(), name, tag)?;
    let image = if squash {
        imagebuild::squash(&output.image).with_tag(tag)?
    } else {
        output.image
    };
    registry.push(&image);
    registry.save(&config.registry_dir)?;

    // Self-check: what was just pushed must read back unchanged.
    let read_back = Registry::load(&config.registry_dir)
        .and_then(|r| r.image(&image.reference()))
        .map_err(|e| CliError::Internal(anyhow!("pushed image failed verification: {e}")))?;
    if read_back.layers() != image.layers() {
        return Err(CliError::Internal(anyhow!(
            "pushed image differs from the built image"
        )));
    }

    let rows = [serde_json::json!({
        "image": image.reference(),
        "layers": image.layers().len(),
        "size": image_size(&image),
    })];
    Ok(render_rows(
        config.format,
        &["image", "layers", "size"],
        &rows,
    ))
}

fn cmd_pull(config: &Config, reference: &str, mode: PullMode) -> Result<String, CliError> {
    let registry = load_registry(&config.registry_dir)?;
    let mut cache = load_cache(&config.cache_dir)?;
    let (report, schedule) = timed_pull(&registry, &mut cache, reference, mode, &config.cost)?;
    cache.save(&config.cache_dir)?;
    let rows = [serde_json::json!({
        "ref": reference,
        "mode": mode.to_string(),
        "bytes_downloaded": report.bytes_downloaded,
        "layers_fetched": report.layers_fetched.len(),
        "layers_reused": report.layers_reused.len(),
        "simulated_seconds": schedule.total_time,
    })];
    Ok(render_rows(
        config.format,
        &[
            "ref",
            "mode",
            "bytes_downloaded",
            "layers_fetched",
            "layers_reused",
            "simulated_seconds",
        ],
        &rows,
    ))
}

fn cmd_stack_size(config: &Config, references: &[String]) -> Result<String, CliError> {
    let registry = load_registry(&config.registry_dir)?;
    let images: Vec<Image> = references
        .iter()
        .map(|r| registry.image(r))
        .collect::<Result<_, _>>()?;
    let sizes = stack_size(&images);
    let rows = [serde_json::json!({
        "refs": references.join(";"),
        "dedup_bytes": sizes.dedup,
        "sum_bytes": sizes.sum,
    })];
    Ok(render_rows(
        config.format,
        &["refs", "dedup_bytes", "sum_bytes"],
        &rows,
    ))
}

fn cmd_simulate(config: &Config, file: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let mut scenario = Scenario::from_json(&text)?;
    if config.cost_overridden {
        scenario.cost = config.cost;
    }
    let registry = load_registry(&config.registry_dir)?;
    let report = simulate_rollout(&scenario, &registry)?;
    Ok(match config.format {
        OutputFormat::Csv => rollout_csv(&report),
        OutputFormat::Json => rollout_json(&report),
    })
}

fn cmd_optimize(
    config: &Config,
    file: &Path,
    catalog_path: &Path,
    solver: SolverArg,
    limit: u64,
) -> Result<String, CliError> {
    let services = services_from_json(
        &fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?,
    )?;
    let catalog = BaseCatalog::from_json(
        &fs::read_to_string(catalog_path)
            .with_context(|| format!("reading {}", catalog_path.display()))?,
    )?;
    let assignment = match solver {
        SolverArg::Exact => exact_assign(&services, &catalog, limit)?,
        SolverArg::Greedy => greedy_assign(&services, &catalog)?,
        SolverArg::Baseline => baseline_assign(&services, &catalog)?,
    };
    Ok(match config.format {
        OutputFormat::Csv => assignment_csv(&assignment, &catalog)?,
        OutputFormat::Json => assignment_json(&assignment, &catalog)?,
    })
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let config = resolve_config(&cli.globals)?;
    match &cli.command {
        Command::Build { file, tag, squash } => cmd_build(&config, file, tag, *squash),
        Command::Pull { reference, mode } => cmd_pull(&config, reference, (*mode).into()),
        Command::StackSize { references } => cmd_stack_size(&config, references),
        Command::Simulate { file } => cmd_simulate(&config, file),
        Command::Optimize {
            file,
            catalog,
            solver,
            limit,
        } => cmd_optimize(&config, file, catalog, *solver, *limit),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(output) => {
            print!("{output}");
            ExitCode::SUCCESS
        }
        Err(CliError::User(error)) => {
            eprintln!("error: {error:#}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(error)) => {
            eprintln!("internal error: {error:#}");
            ExitCode::from(2)
        }
    }
}
