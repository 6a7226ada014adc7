use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kls::control::{kls_pipeline, ControlConfig};
use kls::dataset::{self, DatasetManifest, Record, MANIFEST_FILE};
use kls::eval;
use kls::experiment::{self, ExperimentConfig, METHODS};
use kls::predictor::AnyModel;
use kls::sls::{deviation_bound_check, DeviationConfig};
use kls::{KlsError, Result};

#[derive(Parser)]
#[command(name = "kls", version, about = "One-shot under-frequency load shedding on a learned linear predictor")]
struct Cli {
    /// Experiment configuration (JSON); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate scenarios and write train/test splits.
    Gen(GenArgs),
    /// Fit one predictor on the training split.
    Train(TrainArgs),
    /// Open-loop prediction MAE on a split.
    Predict(PredictArgs),
    /// Shedding plan for one scenario.
    Control(ControlArgs),
    /// Safety margin for each feeder size.
    Margin(MarginArgs),
    /// Open-loop deviation under sampled model perturbations.
    SlsCheck(SlsArgs),
    /// Full experiment suite into a report directory.
    Evaluate(EvaluateArgs),
    /// KLS against the tuned fixed-proportion relay.
    CompareUfls(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// kls, kls-ntd, edmd or dmd
    #[arg(long, default_value = "kls")]
    method: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Limits {
    /// Hard frequency floor, Hz.
    #[arg(long)]
    omega_min_hz: Option<f64>,
    /// Steady-state floor, Hz.
    #[arg(long)]
    omega_inf_min_hz: Option<f64>,
}

#[derive(Args)]
struct ControlArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long)]
    scenario: u64,
    #[arg(long, default_value_t = 10.0)]
    d_mw: f64,
    #[command(flatten)]
    limits: Limits,
    /// Round up to whole feeders.
    #[arg(long)]
    ceil: bool,
    /// Override the computed margin, pu.
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MarginArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,25,50")]
    d_mw: Vec<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SlsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    d_mw: Option<Vec<f64>>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, default_value_t = 10.0)]
    d_mw: f64,
    #[arg(long)]
    trigger_hz: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        log::error!("{e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("KLS_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| KlsError::Config(format!("KLS_THREADS={v} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| KlsError::Config(e.to_string()))?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_records(dir: &Path, split: &str) -> Result<Vec<Record>> {
    let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
    dataset::load_split(dir, &manifest, split)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| KlsError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| KlsError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(a) => {
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.n_train {
                cfg.dataset.n_train = n;
            }
            if let Some(n) = a.n_test {
                cfg.dataset.n_test = n;
            }
            cfg.validate()?;
            let (train, test) = experiment::build_dataset(&cfg, &a.out)?;
            log::info!("wrote {} train and {} test records to {}", train.len(), test.len(), a.out.display());
        }
        Command::Train(a) => {
            if let Some(s) = a.seed {
                cfg.kls.seed = s;
                cfg.ntd.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.kls.epochs = e;
                cfg.ntd.epochs = e;
            }
            cfg.validate()?;
            let train = load_records(&a.data, "train")?;
            let model = match a.method.as_str() {
                "kls" => AnyModel::Koopman(experiment::train_kls(&cfg, &train, true)?),
                "kls-ntd" => AnyModel::Koopman(experiment::train_kls(&cfg, &train, false)?),
                "dmd" | "edmd" => {
                    let (dmd, edmd) = experiment::fit_baselines(&cfg, &train)?;
                    AnyModel::Linear(if a.method == "dmd" { dmd } else { edmd })
                }
                other => {
                    return Err(KlsError::Config(format!(
                        "unknown method `{other}`, expected one of {}",
                        METHODS.join(", ")
                    )))
                }
            };
            model.save(&a.out)?;
            log::info!(
                "saved {} model, max training error {:.3e} pu",
                a.method,
                model.as_predictor().max_pred_error()
            );
        }
        Command::Predict(a) => {
            let model = AnyModel::load(&a.input.model)?;
            let records = load_records(&a.input.data, &a.input.split)?;
            let rows = eval::prediction_rows(model.as_predictor(), &records, &cfg.grid, &cfg.metrics)?;
            let s = eval::summarize(model.as_predictor().method(), &rows);
            log::info!(
                "median MAE {:.3e} pu, p95 {:.3e} pu over {} trajectories",
                s.median_mae.unwrap_or(f64::NAN),
                s.p95_mae.unwrap_or(f64::NAN),
                s.count
            );
            write(&a.out, &eval::rows_to_csv(&rows))?;
        }
        Command::Control(a) => {
            let model = AnyModel::load(&a.input.model)?;
            let records = load_records(&a.input.data, &a.input.split)?;
            let rec = records
                .iter()
                .find(|r| r.scenario.id == a.scenario)
                .ok_or_else(|| KlsError::Argument(format!("scenario {} not in split", a.scenario)))?;
            let grid = rec.scenario.grid_config(&cfg.grid)?;
            let control = control_config(&cfg, &a.limits, a.ceil, a.zeta);
            let plan = kls_pipeline(
                model.as_predictor(),
                &rec.trajectory,
                &grid,
                &control,
                a.d_mw,
                rec.trajectory.omega.len(),
            )?;
            log::info!("shed {:.1} MW with margin {:.4} pu", plan.total_shed_mw, plan.zeta);
            write(&a.out, &serde_json::to_string_pretty(&plan).expect("plan serialises"))?;
        }
        Command::Margin(a) => {
            let model = AnyModel::load(&a.model)?;
            let horizon = a.horizon.unwrap_or(cfg.dataset.generation.grid.points);
            let rows = experiment::margin_table(model.as_predictor(), &cfg.grid, &a.d_mw, horizon)?;
            write(&a.out, &experiment::margin_csv(&rows))?;
        }
        Command::SlsCheck(a) => {
            let model = AnyModel::load(&a.model)?;
            let p = model.as_predictor();
            let defaults = DeviationConfig::default();
            let config = DeviationConfig {
                levels: a.levels.unwrap_or(defaults.levels),
                samples: a.samples.unwrap_or(defaults.samples),
                seed: a.seed.unwrap_or(cfg.seed),
                horizon: a.horizon.unwrap_or(defaults.horizon),
                ..cfg.sls.clone()
            };
            let report = deviation_bound_check(p.a(), p.b(), &config)?;
            if !report.monotone {
                log::warn!("maximum deviation does not decrease across levels");
            }
            write(&a.out, &report.to_csv())?;
        }
        Command::Evaluate(a) => {
            if let Some(m) = a.methods {
                cfg.methods = m;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.n_train {
                cfg.dataset.n_train = n;
            }
            if let Some(n) = a.n_test {
                cfg.dataset.n_test = n;
            }
            if let Some(e) = a.epochs {
                cfg.kls.epochs = e;
                cfg.ntd.epochs = e;
            }
            if let Some(d) = a.d_mw {
                cfg.feeder_mw = d;
            }
            let report = experiment::run(&cfg, &a.out)?;
            log::info!("report digest {}", report.combined_digest());
        }
        Command::CompareUfls(a) => {
            let model = AnyModel::load(&a.input.model)?;
            let records = load_records(&a.input.data, &a.input.split)?;
            if let Some(t) = a.trigger_hz {
                cfg.conventional.trigger_hz = t;
            }
            let gen = &cfg.dataset.generation;
            let tuned = eval::tune_proportion(
                &cfg.conventional,
                &cfg.reference_scenario(),
                &cfg.grid,
                gen,
                &cfg.metrics,
                cfg.safety_target,
            )?;
            if !tuned.safe {
                log::warn!("no proportion up to 1 keeps the reference scenario safe");
            }
            let mut rows = eval::control_rows(
                model.as_predictor(),
                model.as_predictor().method(),
                &records,
                &cfg.grid,
                gen,
                &cfg.control,
                a.d_mw,
                &cfg.metrics,
            )?;
            let kls = eval::summarize(model.as_predictor().method(), &rows);
            let conv = eval::conventional_rows(&tuned.policy, &records, &cfg.grid, gen, &cfg.metrics)?;
            let relay = eval::summarize("conventional", &conv);
            log::info!(
                "proportion {:.3}: Safety >= {} in {:.2} (KLS) vs {:.2} (relay)",
                tuned.policy.proportion,
                cfg.safety_target,
                kls.fraction_safety_09,
                relay.fraction_safety_09
            );
            rows.extend(conv);
            write(&a.out, &eval::rows_to_csv(&rows))?;
        }
    }
    Ok(())
}

fn control_config(cfg: &ExperimentConfig, limits: &Limits, ceil: bool, zeta: Option<f64>) -> ControlConfig {
    let mut c = cfg.control.clone();
    if let Some(hz) = limits.omega_min_hz {
        c.omega_min = cfg.grid.hz_to_pu(hz);
    }
    if let Some(hz) = limits.omega_inf_min_hz {
        c.omega_inf_min = cfg.grid.hz_to_pu(hz);
    }
    c.ceil = ceil;
    if zeta.is_some() {
        c.zeta_override = zeta;
    }
    c
}
