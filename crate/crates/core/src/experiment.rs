//! End-to-end experiment: data, models, prediction benchmark, latent
//! correlation, margins, controlled re-simulation, relay comparison and the
//! perturbation check, written as a reproducible report directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{fit_baseline, BaselineConfig, LinearModel, StateSpec};
use crate::control::{bisect_min_zeta, feeder_step_pu, zeta_margin, ControlConfig, SafetyMargin};
use crate::dataset::{self, generate, sample_scenarios, GenerationConfig, Record, ScenarioRanges, ScenarioSpec};
use crate::error::{KlsError, Result};
use crate::eval::{self, ConventionalPolicy, MetricConfig, MetricsRow, Summary, TunedPolicy};
use crate::grid::{FaultEvent, GridConfig, SampleGrid};
use crate::koopman::{self, CorrelationTable, EmbeddingSpec, KoopmanModel, TrainConfig};
use crate::predictor::Predictor;
use crate::sls::{deviation_bound_check, DeviationConfig, DeviationReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub n_train: usize,
    pub n_test: usize,
    /// Inertia multipliers drawn from `[1 − band, 1 + band]`.
    pub band: f64,
    pub shed_max: f64,
    pub generation: GenerationConfig,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n_train: 200,
            n_test: 100,
            band: 0.3,
            shed_max: 0.25,
            generation: GenerationConfig::default(),
        }
    }
}

/// Which inertia the latent correlation is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InertiaLabel {
    /// Inertia of the machines left in service after the trip.
    PostFault,
    /// Inertia of the full pre-fault fleet.
    PreFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub dataset: DatasetParams,
    pub kls: TrainConfig,
    /// Training of the ablation without the delay window.
    pub ntd: TrainConfig,
    pub rbf_count: usize,
    pub ridge: f64,
    pub control: ControlConfig,
    pub feeder_mw: Vec<f64>,
    pub metrics: MetricConfig,
    pub conventional: ConventionalPolicy,
    /// Reference fault for relay tuning, at nominal inertia.
    pub reference_trip: Vec<usize>,
    pub safety_target: f64,
    pub zeta_search_max: f64,
    pub zeta_search_tol: f64,
    pub inertia_label: InertiaLabel,
    pub sls: DeviationConfig,
    /// Predictors in the benchmark; KLS is always trained for control.
    pub methods: Vec<String>,
}

pub const METHODS: [&str; 4] = ["kls", "kls-ntd", "edmd", "dmd"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            grid: GridConfig::desk_default(),
            dataset: DatasetParams::default(),
            kls: TrainConfig {
                learning_rate: 2e-3,
                lr_decay: 0.995,
                epochs: 600,
                omega_weight: 1e4,
                max_span: Some(3),
                ..TrainConfig::default()
            },
            ntd: TrainConfig {
                learning_rate: 2e-3,
                lr_decay: 0.995,
                epochs: 600,
                omega_weight: 1e4,
                max_span: Some(3),
                method: "kls-ntd".into(),
                ..TrainConfig::default()
            },
            rbf_count: 40,
            ridge: 1e-8,
            control: ControlConfig::default(),
            feeder_mw: vec![10.0, 25.0, 50.0],
            metrics: MetricConfig::default(),
            conventional: ConventionalPolicy::default(),
            reference_trip: vec![0, 2, 3],
            safety_target: 0.9,
            zeta_search_max: 0.5,
            zeta_search_tol: 1e-4,
            inertia_label: InertiaLabel::PostFault,
            sls: DeviationConfig::default(),
            methods: METHODS.iter().map(|m| m.to_string()).collect(),
        }
    }
}

impl ExperimentConfig {
    /// Small configuration for smoke tests.
    pub fn quick() -> Self {
        let mut c = ExperimentConfig::default();
        c.dataset.n_train = 12;
        c.dataset.n_test = 6;
        c.dataset.generation.grid.points = 15;
        for t in [&mut c.kls, &mut c.ntd] {
            t.epochs = 3;
            t.batch_size = 4;
        }
        c.rbf_count = 8;
        c.feeder_mw = vec![10.0, 50.0];
        c.zeta_search_tol = 1e-2;
        c.sls.samples = 4;
        c.sls.horizon = 4;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.kls.validate()?;
        self.ntd.validate()?;
        self.metrics.validate()?;
        self.dataset.generation.grid.validate()?;
        if self.dataset.n_train == 0 || self.dataset.n_test < 3 {
            return Err(KlsError::Config("need training records and at least 3 test records".into()));
        }
        if self.feeder_mw.is_empty() || self.feeder_mw.iter().any(|d| !(*d > 0.0)) {
            return Err(KlsError::Config("feeder sizes must be positive".into()));
        }
        if let Some(m) = self.methods.iter().find(|m| !METHODS.contains(&m.as_str())) {
            return Err(KlsError::Config(format!("unknown method `{m}`")));
        }
        if !(self.zeta_search_max > 0.0 && self.zeta_search_tol > 0.0) {
            return Err(KlsError::Config("margin search bounds must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KlsError::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| KlsError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn embedding(&self) -> EmbeddingSpec {
        let g = &self.dataset.generation.grid;
        EmbeddingSpec {
            tau: g.tau,
            dt_embed: g.dt_embed,
        }
    }

    pub fn reference_scenario(&self) -> ScenarioSpec {
        ScenarioSpec {
            id: u64::MAX,
            inertia_scale: vec![1.0; self.grid.machines.len()],
            fault: FaultEvent::trip(1.0, self.reference_trip.clone()),
            shed: vec![0.0; self.grid.loads.len()],
            seed: 0,
        }
    }
}

/// Generate and persist the train/test splits.
pub fn build_dataset(config: &ExperimentConfig, dir: &Path) -> Result<(Vec<Record>, Vec<Record>)> {
    let d = &config.dataset;
    let mut ranges = ScenarioRanges::all_trips(&config.grid, d.band);
    ranges.shed_max = d.shed_max;
    let n = d.n_train + d.n_test;
    let scenarios = sample_scenarios(config.seed, n, 0, config.grid.machines.len(), config.grid.loads.len(), &ranges)?;
    let trajectories = generate(&config.grid, &scenarios, &d.generation)?;
    let manifest = dataset::split_and_persist(
        &scenarios,
        &trajectories,
        (d.n_train, d.n_test),
        dir,
        config.seed,
        d.band,
        &d.generation,
    )?;
    Ok((
        dataset::load_split(dir, &manifest, "train")?,
        dataset::load_split(dir, &manifest, "test")?,
    ))
}

pub fn train_kls(config: &ExperimentConfig, train: &[Record], delay: bool) -> Result<KoopmanModel> {
    let mut emb = config.embedding();
    let mut tc = config.kls.clone();
    if !delay {
        emb.tau = 0.0;
        tc = config.ntd.clone();
    }
    let samples = koopman::samples_from_records(train, &emb)?;
    koopman::train(&samples, &tc, emb, 1 + config.grid.signal_count())
}

pub fn fit_baselines(config: &ExperimentConfig, train: &[Record]) -> Result<(LinearModel, LinearModel)> {
    let state = StateSpec::instantaneous(config.dataset.generation.grid.dt_embed);
    let dmd = fit_baseline(
        train,
        &BaselineConfig {
            rbf_count: 0,
            seed: config.seed,
            ridge: config.ridge,
            state,
        },
    )?;
    let edmd = fit_baseline(
        train,
        &BaselineConfig {
            rbf_count: config.rbf_count,
            seed: config.seed,
            ridge: config.ridge,
            state,
        },
    )?;
    Ok((dmd, edmd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub label: InertiaLabel,
    pub max_abs_inertia: f64,
    pub max_abs_imbalance: f64,
    pub table: CorrelationTable,
}

pub fn latent_correlation(config: &ExperimentConfig, model: &KoopmanModel, records: &[Record]) -> Result<CorrelationReport> {
    let samples = koopman::samples_from_records(records, &model.embedding)?;
    let inertia: Vec<f64> = records
        .iter()
        .map(|r| match config.inertia_label {
            InertiaLabel::PostFault => config.grid.post_fault_inertia_ratio(&r.scenario.inertia_scale, &r.scenario.fault.tripped),
            InertiaLabel::PreFault => config.grid.system_inertia_ratio(&r.scenario.inertia_scale),
        })
        .collect();
    let imbalance: Vec<f64> = records.iter().map(|r| r.scenario.fault.deficit_mw(&config.grid)).collect();
    let table = koopman::latent_correlation(model, &samples, &inertia, &imbalance)?;
    Ok(CorrelationReport {
        label: config.inertia_label,
        max_abs_inertia: table.max_abs_inertia(),
        max_abs_imbalance: table.max_abs_imbalance(),
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub feeder_mw: f64,
    pub margin: SafetyMargin,
}

pub fn margin_table(model: &dyn Predictor, grid: &GridConfig, feeder_mw: &[f64], horizon: usize) -> Result<Vec<MarginRow>> {
    feeder_mw
        .iter()
        .map(|&d| {
            let steps = feeder_step_pu(grid, d)?;
            Ok(MarginRow {
                feeder_mw: d,
                margin: zeta_margin(model.a(), model.b(), &steps, model.max_pred_error(), horizon)?,
            })
        })
        .collect()
}

pub fn margin_csv(rows: &[MarginRow]) -> String {
    let mut out = String::from("feeder_mw,zeta,quantization_term,euclidean_term,max_pred_error,spectral_radius\n");
    for r in rows {
        let m = &r.margin;
        let q = m.quantization_terms.iter().copied().fold(0.0, f64::max);
        let e = m.euclidean_terms.iter().copied().fold(0.0, f64::max);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.feeder_mw, m.zeta, q, e, m.max_pred_error, m.spectral_radius
        ));
    }
    out
}

/// Controlled results for one feeder size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLevel {
    pub feeder_mw: f64,
    pub zeta: f64,
    /// Smallest ζ keeping every test scenario at Safety 1, if any in range.
    pub zeta_min: Option<f64>,
    pub kls: Summary,
    pub kls_ceil: Summary,
    pub no_margin: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionalResult {
    pub tuned: TunedPolicy,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub prediction: Vec<Summary>,
    pub correlation: CorrelationReport,
    pub margins: Vec<MarginRow>,
    pub control: Vec<ControlLevel>,
    pub conventional: ConventionalResult,
    pub sls: DeviationReport,
    /// SHA-256 of every artefact written before the report itself.
    pub digests: BTreeMap<String, String>,
}

impl ExperimentReport {
    /// Digest over all artefact digests.
    pub fn combined_digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.digests {
            h.update(k.as_bytes());
            h.update(v.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

struct Writer {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
}

impl Writer {
    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| KlsError::io(&path, e))?;
        self.digests.insert(name.to_string(), hex::encode(Sha256::digest(text.as_bytes())));
        Ok(())
    }
}

pub fn prediction_benchmark(
    config: &ExperimentConfig,
    models: &[&dyn Predictor],
    test: &[Record],
) -> Result<(Vec<MetricsRow>, Vec<Summary>)> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for m in models {
        let r = eval::prediction_rows(*m, test, &config.grid, &config.metrics)?;
        summaries.push(eval::summarize(m.method(), &r));
        rows.extend(r);
    }
    Ok((rows, summaries))
}

/// KLS, KLS-C and the unmargined variant at one feeder size, plus the
/// bisection for the smallest sufficient margin.
pub fn control_level(
    config: &ExperimentConfig,
    model: &dyn Predictor,
    test: &[Record],
    feeder_mw: f64,
    zeta: f64,
) -> Result<(ControlLevel, Vec<MetricsRow>)> {
    let gen = &config.dataset.generation;
    let run = |label: &str, control: &ControlConfig| {
        eval::control_rows(model, label, test, &config.grid, gen, control, feeder_mw, &config.metrics)
    };
    let kls = run("kls", &config.control)?;
    let ceil = run(
        "kls-c",
        &ControlConfig {
            ceil: true,
            ..config.control.clone()
        },
    )?;
    let zero = run(
        "kls-no-margin",
        &ControlConfig {
            zeta_override: Some(0.0),
            ..config.control.clone()
        },
    )?;
    let zeta_min = bisect_min_zeta(0.0, config.zeta_search_max, config.zeta_search_tol, |z| {
        let rows = run(
            "probe",
            &ControlConfig {
                zeta_override: Some(z),
                ..config.control.clone()
            },
        )?;
        Ok(rows.iter().all(|r| r.safety >= 1.0))
    })?;
    let level = ControlLevel {
        feeder_mw,
        zeta,
        zeta_min,
        kls: eval::summarize("kls", &kls),
        kls_ceil: eval::summarize("kls-c", &ceil),
        no_margin: eval::summarize("kls-no-margin", &zero),
    };
    let mut rows = kls;
    rows.extend(ceil);
    rows.extend(zero);
    Ok((level, rows))
}

/// Run everything, writing artefacts under `out`.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| KlsError::io(out, e))?;
    let data_dir = out.join("data");
    log::info!("generating {} + {} scenarios", config.dataset.n_train, config.dataset.n_test);
    let (train, test) = build_dataset(config, &data_dir)?;

    log::info!("training kls");
    let kls = train_kls(config, &train, true)?;
    let wants = |m: &str| config.methods.iter().any(|x| x == m);
    let ntd = if wants("kls-ntd") {
        log::info!("training kls-ntd");
        Some(train_kls(config, &train, false)?)
    } else {
        None
    };
    let (dmd, edmd) = if wants("dmd") || wants("edmd") {
        let (d, e) = fit_baselines(config, &train)?;
        (wants("dmd").then_some(d), wants("edmd").then_some(e))
    } else {
        (None, None)
    };

    let models_dir = out.join("models");
    fs::create_dir_all(&models_dir).map_err(|e| KlsError::io(&models_dir, e))?;
    let mut w = Writer {
        dir: out.to_path_buf(),
        digests: BTreeMap::new(),
    };
    let mut benchmark: Vec<&dyn Predictor> = Vec::new();
    let mut save = |name: &str, model: AnyModelRef| -> Result<()> {
        let path = models_dir.join(format!("{name}.json"));
        match model {
            AnyModelRef::Koopman(m) => m.save(&path)?,
            AnyModelRef::Linear(m) => m.save(&path)?,
        }
        let bytes = fs::read(&path).map_err(|e| KlsError::io(&path, e))?;
        w.digests.insert(format!("models/{name}.json"), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    };
    save("kls", AnyModelRef::Koopman(&kls))?;
    if let Some(m) = &ntd {
        save("kls-ntd", AnyModelRef::Koopman(m))?;
    }
    if let Some(m) = &edmd {
        save("edmd", AnyModelRef::Linear(m))?;
    }
    if let Some(m) = &dmd {
        save("dmd", AnyModelRef::Linear(m))?;
    }
    for name in METHODS {
        if !wants(name) {
            continue;
        }
        match name {
            "kls" => benchmark.push(&kls),
            "kls-ntd" => benchmark.extend(ntd.as_ref().map(|m| m as &dyn Predictor)),
            "edmd" => benchmark.extend(edmd.as_ref().map(|m| m as &dyn Predictor)),
            _ => benchmark.extend(dmd.as_ref().map(|m| m as &dyn Predictor)),
        }
    }

    log::info!("prediction benchmark");
    let (pred_rows, prediction) = prediction_benchmark(config, &benchmark, &test)?;
    w.write("predictions.csv", &eval::rows_to_csv(&pred_rows))?;
    let groups: Vec<(String, Vec<f64>)> = benchmark
        .iter()
        .map(|m| {
            let v = pred_rows.iter().filter(|r| r.method == m.method()).filter_map(|r| r.mae).collect();
            (m.method().to_string(), v)
        })
        .collect();
    w.write("prediction_mae.svg", &eval::boxes_svg("Prediction MAE (pu)", &groups))?;

    let correlation = latent_correlation(config, &kls, &test)?;
    let mut corr_csv = String::from("dim,inertia_r,imbalance_r,degenerate\n");
    for r in &correlation.table.rows {
        corr_csv.push_str(&format!("{},{},{},{}\n", r.dim, r.inertia, r.imbalance, r.degenerate));
    }
    w.write("correlation.csv", &corr_csv)?;

    let horizon = config.dataset.generation.grid.points;
    let margins = margin_table(&kls, &config.grid, &config.feeder_mw, horizon)?;
    w.write("margins.csv", &margin_csv(&margins))?;

    log::info!("controlled re-simulation");
    let mut control = Vec::new();
    let mut control_rows = Vec::new();
    for m in &margins {
        let (level, rows) = control_level(config, &kls, &test, m.feeder_mw, m.margin.zeta)?;
        control.push(level);
        control_rows.extend(rows);
    }

    log::info!("conventional relay");
    let gen = &config.dataset.generation;
    let tuned = eval::tune_proportion(
        &config.conventional,
        &config.reference_scenario(),
        &config.grid,
        gen,
        &config.metrics,
        config.safety_target,
    )?;
    let conv_rows = eval::conventional_rows(&tuned.policy, &test, &config.grid, gen, &config.metrics)?;
    let conventional = ConventionalResult {
        summary: eval::summarize("conventional", &conv_rows),
        tuned,
    };
    control_rows.extend(conv_rows);
    w.write("control.csv", &eval::rows_to_csv(&control_rows))?;

    let mut summaries = prediction.clone();
    for l in &control {
        summaries.extend([l.kls.clone(), l.kls_ceil.clone(), l.no_margin.clone()]);
    }
    summaries.push(conventional.summary.clone());
    w.write("summary.csv", &eval::summaries_to_csv(&summaries))?;

    w.write("trajectories.svg", &example_plot(config, &kls, &test[0], &conventional.tuned.policy)?)?;

    log::info!("perturbation check");
    let sls = deviation_bound_check(&kls.a, &kls.b, &config.sls)?;
    w.write("sls.csv", &sls.to_csv())?;

    let report = ExperimentReport {
        seed: config.seed,
        prediction,
        correlation,
        margins,
        control,
        conventional,
        sls,
        digests: w.digests,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serialises");
    let path = out.join("report.json");
    fs::write(&path, text).map_err(|e| KlsError::io(&path, e))?;
    Ok(report)
}

fn example_plot(config: &ExperimentConfig, model: &dyn Predictor, rec: &Record, relay: &ConventionalPolicy) -> Result<String> {
    let gen = &config.dataset.generation;
    let d = config.feeder_mw[0];
    let runs: Vec<(String, ControlConfig)> = vec![
        ("KLS".into(), config.control.clone()),
        (
            "KLS, no margin".into(),
            ControlConfig {
                zeta_override: Some(0.0),
                ..config.control.clone()
            },
        ),
    ];
    let cfg = rec.scenario.grid_config(&config.grid)?;
    let mut series: Vec<(String, Vec<f64>, Vec<f64>)> = runs
        .par_iter()
        .map(|(label, control)| {
            let (_, traj) = eval::control_one(model, label, rec, &config.grid, gen, control, d, &config.metrics)?;
            Ok((label.clone(), traj.coarse_times.clone(), hz(&cfg, &traj.omega)))
        })
        .collect::<Result<_>>()?;
    let (_, relay_traj) = relay.simulate(&rec.scenario, &config.grid, gen)?;
    series.push(("relay".into(), relay_traj.coarse_times.clone(), hz(&cfg, &relay_traj.omega)));
    let none = crate::grid::simulate(&cfg, &rec.scenario.fault, &vec![0.0; cfg.loads.len()], 0.0_f64.max(rec.scenario.fault.time), &gen.grid)?;
    series.push(("no shedding".into(), none.coarse_times.clone(), hz(&cfg, &none.omega)));
    let limits = [
        cfg.pu_to_hz(config.control.omega_min),
        cfg.pu_to_hz(config.control.omega_inf_min),
    ];
    Ok(eval::trajectories_svg(&format!("Scenario {}", rec.scenario.id), &series, &limits))
}

enum AnyModelRef<'a> {
    Koopman(&'a KoopmanModel),
    Linear(&'a LinearModel),
}

fn hz(cfg: &GridConfig, omega: &[f64]) -> Vec<f64> {
    omega.iter().map(|w| cfg.pu_to_hz(*w)).collect()
}

/// Coarse sampling used by a configuration.
pub fn sample_grid(config: &ExperimentConfig) -> SampleGrid {
    config.dataset.generation.grid
}
