use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tactile_core::dataset::{generate, load, regime_config, DatasetConfig, LabelMode, Regime};
use tactile_core::estimator::metrics::{evaluate, write_report};
use tactile_core::estimator::regressor::{Regressor, RegressorConfig};
use tactile_core::estimator::samples::SampleSet;
use tactile_core::geometry::{ShellGeometry, Uv};
use tactile_core::mechanics::{displacement_field, ContactSpec, Indenter, SurfaceGrid, UvGrid};
use tactile_core::render::{Illumination, SensorInstance};
use tactile_bench::config::{output_root, read_json, DESK_DIVISOR};
use tactile_bench::error::BenchError;
use tactile_bench::experiments;
use tactile_bench::plot::plot;
use tactile_bench::{ExperimentName, ExperimentSpec};

#[derive(Parser)]
#[command(name = "tactile", version, about = "Simulated tactile sensor benchmark")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON configuration for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the seed in `--config`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use full regime sizes instead of the reduced desk defaults.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled dataset to disk.
    GenDataset {
        /// Built-in regime used when no config is given.
        #[arg(long, default_value = "full_state")]
        regime: String,
    },
    /// Render the reference frame and one press of a sensor.
    RenderPreview {
        #[arg(long, default_value = "rrrgggbbb")]
        illumination: String,
        #[arg(long)]
        clear: bool,
        /// Contact azimuth, rad.
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        /// Contact axial coordinate in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        axial: f64,
        #[arg(long, default_value_t = 1.5)]
        depth: f64,
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
    },
    /// Train a regressor on a dataset.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint path to write.
        #[arg(long)]
        model: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    ConfigSweep,
    MultiIndenter,
    DataEfficiency,
    Transfer,
    /// Render plots from a report.
    Plot {
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_name<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, BenchError> {
    serde_json::from_value(json!(s)).map_err(|_| BenchError::Config(format!("unknown {what} `{s}`")))
}

fn divisor(g: &Global) -> usize {
    if g.paper_scale {
        1
    } else {
        DESK_DIVISOR
    }
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("value serializes"));
}

fn gen_dataset(g: &Global, regime: &str) -> Result<(), BenchError> {
    let mut config: DatasetConfig = match &g.config {
        Some(p) => read_json(p)?,
        None => {
            let r: Regime = parse_name(regime, "regime")?;
            regime_config(r, divisor(g), g.seed.unwrap_or(0), PathBuf::new())
        }
    };
    if let Some(s) = g.seed {
        config.seed = s;
    }
    if let Some(o) = &g.out {
        config.output_dir = o.clone();
    } else if config.output_dir.as_os_str().is_empty() {
        config.output_dir = output_root().join(format!("dataset-{}-{}", config.name, config.seed));
    }
    let ds = generate(&config)?;
    print(json!({ "dataset": ds.root, "records": ds.len(), "episodes": ds.episode_ids().len() }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn render_preview(
    g: &Global,
    illumination: &str,
    clear: bool,
    azimuth: f64,
    axial: f64,
    depth: f64,
    radius: f64,
) -> Result<(), BenchError> {
    let instance: SensorInstance = match &g.config {
        Some(p) => read_json(p)?,
        None => SensorInstance::nominal("preview", parse_name::<Illumination>(illumination, "illumination")?, !clear),
    };
    let geom = ShellGeometry::default();
    let renderer = instance.renderer(&geom)?;
    let surface = SurfaceGrid::new(&geom, UvGrid::default());
    let spec = ContactSpec::press(Uv::new(azimuth, axial), depth);
    let deformation = displacement_field(&surface, &Indenter::Sphere { radius }, &spec, &geom)?;
    let image = renderer.render(&deformation)?;
    let dir = g.out.clone().unwrap_or_else(|| output_root().join("preview"));
    std::fs::create_dir_all(&dir).map_err(|source| BenchError::Io { path: dir.clone(), source })?;
    let (reference, press) = (dir.join("reference.png"), dir.join("press.png"));
    renderer.reference().write_png(&reference)?;
    image.write_png(&press)?;
    print(json!({
        "reference": reference,
        "press": press,
        "mean_abs_diff": image.mean_abs_diff(renderer.reference()),
    }));
    Ok(())
}

fn load_samples(manifest: &Path) -> Result<SampleSet, BenchError> {
    Ok(SampleSet::from_dataset(&load(manifest)?)?)
}

fn train(g: &Global, data: &Path, init: Option<&Path>, model_path: &Path) -> Result<(), BenchError> {
    let dataset = load(data)?;
    let set = SampleSet::from_dataset(&dataset)?;
    let mut model = match init {
        Some(p) => Regressor::load(p)?,
        None => {
            let mut config: RegressorConfig = match &g.config {
                Some(p) => read_json(p)?,
                None => RegressorConfig::default(),
            };
            if let Some(s) = g.seed {
                config.seed = s;
            }
            Regressor::new(config)?
        }
    };
    let report = match dataset.config.label_mode {
        LabelMode::PositionOnly => model.pretrain_localization(&set)?,
        LabelMode::FullState => model.finetune(&set)?,
    };
    model.save(model_path)?;
    print(json!({ "model": model_path, "samples": report.samples, "epochs": report.epochs, "seconds": report.seconds }));
    Ok(())
}

fn eval(g: &Global, data: &Path, model_path: &Path) -> Result<(), BenchError> {
    let test = load_samples(data)?;
    let mut model = Regressor::load(model_path)?;
    let (metrics, rows) = evaluate(&mut model, &test)?;
    if let Some(dir) = &g.out {
        write_report(dir, &metrics, &rows)?;
    }
    println!("{}", metrics.to_json());
    Ok(())
}

fn experiment(g: &Global, name: ExperimentName) -> Result<(), BenchError> {
    let mut spec: ExperimentSpec = match &g.config {
        Some(p) => read_json(p)?,
        None => ExperimentSpec::default_for(name, g.seed.unwrap_or(0), divisor(g)),
    };
    if spec.name != name {
        return Err(BenchError::Config(format!(
            "config describes {}, not {}",
            spec.name.as_str(),
            name.as_str()
        )));
    }
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    if let Some(o) = &g.out {
        spec.output_dir = Some(o.clone());
    }
    let report = experiments::run(&spec)?;
    print(json!({ "report": spec.output_dir().join("report.json"), "warnings": report.warnings }));
    Ok(())
}

fn plot_report(g: &Global, report: &Path) -> Result<(), BenchError> {
    let text = std::fs::read_to_string(report).map_err(|source| BenchError::Io { path: report.into(), source })?;
    let value: serde_json::Value = if text.trim().is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_str(&text).map_err(|source| BenchError::Json { path: report.into(), source })?
    };
    let dir = g
        .out
        .clone()
        .unwrap_or_else(|| report.parent().unwrap_or(Path::new(".")).to_path_buf());
    let outcome = plot(&value, &dir)?;
    for w in &outcome.warnings {
        eprintln!("{}", json!({ "warning": w }));
    }
    print(json!({ "files": outcome.files }));
    Ok(())
}

fn run(cli: Cli) -> Result<(), BenchError> {
    let g = &cli.global;
    match &cli.command {
        Command::GenDataset { regime } => gen_dataset(g, regime),
        Command::RenderPreview {
            illumination,
            clear,
            azimuth,
            axial,
            depth,
            radius,
        } => render_preview(g, illumination, *clear, *azimuth, *axial, *depth, *radius),
        Command::Train { data, init, model } => train(g, data, init.as_deref(), model),
        Command::Eval { data, model } => eval(g, data, model),
        Command::ConfigSweep => experiment(g, ExperimentName::ConfigSweep),
        Command::MultiIndenter => experiment(g, ExperimentName::MultiIndenter),
        Command::DataEfficiency => experiment(g, ExperimentName::DataEfficiency),
        Command::Transfer => experiment(g, ExperimentName::Transfer),
        Command::Plot { report } => plot_report(g, report),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
