//! Scenario sampling, trajectory generation, delay embeddings and
//! persistence of train/test splits.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KlsError, Result};
use crate::grid::{self, FaultEvent, GridConfig, SampleGrid, Trajectory};

pub const DATASET_VERSION: u32 = 1;

/// One operating condition, fault and shedding input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u64,
    /// Per-machine inertia multipliers.
    pub inertia_scale: Vec<f64>,
    pub fault: FaultEvent,
    /// Per-bus shedding, pu of bus load.
    pub shed: Vec<f64>,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn grid_config(&self, base: &GridConfig) -> Result<GridConfig> {
        base.with_inertia_scale(&self.inertia_scale)
    }

    /// Same operating condition and fault with a different shedding vector.
    pub fn with_shed(&self, shed: Vec<f64>) -> ScenarioSpec {
        ScenarioSpec {
            shed,
            ..self.clone()
        }
    }
}

/// Ranges from which scenarios are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRanges {
    /// Half-width of the uniform inertia band around 1.
    pub band: f64,
    /// Candidate faults as sets of tripped machine groups.
    pub faults: Vec<Vec<usize>>,
    pub fault_time: f64,
    /// Upper end of the uniform shedding draw.
    #[serde(default = "default_shed_max")]
    pub shed_max: f64,
}

fn default_shed_max() -> f64 {
    1.0
}

impl ScenarioRanges {
    /// All single, double and triple trips of the machine groups.
    pub fn all_trips(config: &GridConfig, band: f64) -> Self {
        let n = config.machines.len();
        let mut faults = Vec::new();
        for a in 0..n {
            faults.push(vec![a]);
        }
        for a in 0..n {
            for b in a + 1..n {
                faults.push(vec![a, b]);
            }
        }
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    faults.push(vec![a, b, c]);
                }
            }
        }
        ScenarioRanges {
            band,
            faults,
            fault_time: 1.0,
            shed_max: 1.0,
        }
    }
}

/// Draw `n` scenarios. Ids are `first_id..first_id + n`.
pub fn sample_scenarios(
    seed: u64,
    n: usize,
    first_id: u64,
    machines: usize,
    buses: usize,
    ranges: &ScenarioRanges,
) -> Result<Vec<ScenarioSpec>> {
    if n == 0 {
        return Err(KlsError::Argument("scenario count must be positive".into()));
    }
    if !(0.0..1.0).contains(&ranges.band) {
        return Err(KlsError::Config(format!("inertia band {} outside [0, 1)", ranges.band)));
    }
    if ranges.faults.is_empty() {
        return Err(KlsError::Config("empty fault set".into()));
    }
    if !(0.0..=1.0).contains(&ranges.shed_max) {
        return Err(KlsError::Config("shed_max must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = (0..n as u64)
        .map(|k| {
            let inertia_scale = (0..machines)
                .map(|_| {
                    if ranges.band == 0.0 {
                        1.0
                    } else {
                        rng.gen_range(1.0 - ranges.band..=1.0 + ranges.band)
                    }
                })
                .collect();
            let tripped = ranges.faults[rng.gen_range(0..ranges.faults.len())].clone();
            let shed = (0..buses)
                .map(|_| rng.gen::<f64>() * ranges.shed_max)
                .collect();
            ScenarioSpec {
                id: first_id + k,
                inertia_scale,
                fault: FaultEvent::trip(ranges.fault_time, tripped),
                shed,
                seed: rng.gen(),
            }
        })
        .collect();
    Ok(out)
}

/// Generation settings shared by every trajectory of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub grid: SampleGrid,
    /// Delay from fault to one-shot shedding.
    pub shed_delay: f64,
    /// Standard deviation of additive measurement noise on the windows.
    #[serde(default)]
    pub noise_std: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            grid: SampleGrid::default(),
            shed_delay: 0.3,
            noise_std: 0.0,
        }
    }
}

/// Simulate every scenario. Output order follows the input.
pub fn generate(
    base: &GridConfig,
    scenarios: &[ScenarioSpec],
    gen: &GenerationConfig,
) -> Result<Vec<Trajectory>> {
    scenarios
        .par_iter()
        .map(|sc| {
            let cfg = sc.grid_config(base)?;
            let mut traj = grid::simulate(
                &cfg,
                &sc.fault,
                &sc.shed,
                sc.fault.time + gen.shed_delay,
                &gen.grid,
            )?;
            if gen.noise_std > 0.0 {
                add_noise(&mut traj, gen.noise_std, sc.seed);
            }
            Ok(traj)
        })
        .collect()
}

fn add_noise(traj: &mut Trajectory, std: f64, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for w in &mut traj.windows {
        for x in w.omega.iter_mut() {
            *x += normal.sample(&mut rng);
        }
        for ch in &mut w.signals {
            for x in ch.iter_mut() {
                *x += normal.sample(&mut rng);
            }
        }
    }
}

/// Flattened delay window `[ω_{t−τ} … ω_t, y¹_{t−τ} … y¹_t, …]` at coarse
/// point `index`.
pub fn build_embedding(
    traj: &Trajectory,
    tau: f64,
    dt_embed: f64,
    index: usize,
) -> Result<Vec<f64>> {
    let window = traj.windows.get(index).ok_or_else(|| {
        KlsError::Argument(format!(
            "coarse index {index} out of range ({} points)",
            traj.windows.len()
        ))
    })?;
    let stride = (dt_embed / window.dt).round();
    if stride < 1.0 || (stride * window.dt - dt_embed).abs() > 1e-9 {
        return Err(KlsError::Argument(format!(
            "embedding step {dt_embed} is not a multiple of the stored step {}",
            window.dt
        )));
    }
    let stride = stride as usize;
    let count = (tau / dt_embed).round() as usize + 1;
    let available = window.omega.len();
    let needed = (count - 1) * stride + 1;
    if needed > available {
        return Err(KlsError::Window {
            time: window.end_time,
            needed,
            available,
        });
    }
    let mut out = Vec::with_capacity(count * (1 + window.signals.len()));
    for series in std::iter::once(&window.omega).chain(&window.signals) {
        let last = series.len() - 1;
        out.extend((0..count).map(|j| series[last - (count - 1 - j) * stride]));
    }
    Ok(out)
}

/// Embedding at a given time rather than coarse index.
pub fn build_embedding_at(
    traj: &Trajectory,
    tau: f64,
    dt_embed: f64,
    time: f64,
) -> Result<Vec<f64>> {
    let index = traj
        .coarse_times
        .iter()
        .position(|&t| (t - time).abs() < 1e-9)
        .ok_or(KlsError::Window {
            time,
            needed: 1,
            available: 0,
        })?;
    build_embedding(traj, tau, dt_embed, index)
}

/// One line of a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub scenario: ScenarioSpec,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub band: f64,
    pub tau: f64,
    pub dt_embed: f64,
    pub dt_pred: f64,
    pub horizon: usize,
    pub shed_delay: f64,
    pub splits: Vec<SplitInfo>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Option<&SplitInfo> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KlsError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| KlsError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Split aligned scenarios/trajectories by `ratio = (train, test)` and write
/// `train.jsonl`, `test.jsonl` and `manifest.json` under `dir`.
pub fn split_and_persist(
    scenarios: &[ScenarioSpec],
    trajectories: &[Trajectory],
    ratio: (usize, usize),
    dir: &Path,
    seed: u64,
    band: f64,
    gen: &GenerationConfig,
) -> Result<DatasetManifest> {
    if scenarios.len() != trajectories.len() {
        return Err(KlsError::Argument(format!(
            "{} scenarios but {} trajectories",
            scenarios.len(),
            trajectories.len()
        )));
    }
    if ratio.0 + ratio.1 == 0 {
        return Err(KlsError::Argument("split ratio is 0:0".into()));
    }
    let n = scenarios.len();
    let n_train = ((n * ratio.0) as f64 / (ratio.0 + ratio.1) as f64).round() as usize;
    fs::create_dir_all(dir).map_err(|e| KlsError::io(dir, e))?;
    let records: Vec<Record> = scenarios
        .iter()
        .zip(trajectories)
        .map(|(s, t)| Record {
            scenario: s.clone(),
            trajectory: t.clone(),
        })
        .collect();
    let (train, test) = records.split_at(n_train);
    let splits = vec![
        write_split(dir, "train", train)?,
        write_split(dir, "test", test)?,
    ];
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        seed,
        band,
        tau: gen.grid.tau,
        dt_embed: gen.grid.dt_embed,
        dt_pred: gen.grid.dt_pred,
        horizon: gen.grid.points,
        shed_delay: gen.shed_delay,
        splits,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text).map_err(|e| KlsError::io(&path, e))?;
    Ok(manifest)
}

fn write_split(dir: &Path, name: &str, records: &[Record]) -> Result<SplitInfo> {
    let file = format!("{name}.jsonl");
    let path = dir.join(&file);
    let handle = File::create(&path).map_err(|e| KlsError::io(&path, e))?;
    let mut writer = BufWriter::new(handle);
    let mut hasher = Sha256::new();
    for r in records {
        let mut line = serde_json::to_string(r).expect("record serialises");
        line.push('\n');
        hasher.update(line.as_bytes());
        writer
            .write_all(line.as_bytes())
            .map_err(|e| KlsError::io(&path, e))?;
    }
    writer.flush().map_err(|e| KlsError::io(&path, e))?;
    Ok(SplitInfo {
        name: name.to_string(),
        file,
        count: records.len(),
        sha256: hex::encode(hasher.finalize()),
    })
}

/// Read a JSONL trajectory file.
pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let handle = File::open(path).map_err(|e| KlsError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(handle).lines().enumerate() {
        let line = line.map_err(|e| KlsError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| KlsError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Load one split named in a manifest, verifying its digest and count.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, name: &str) -> Result<Vec<Record>> {
    let info = manifest.split(name).ok_or_else(|| KlsError::Format {
        path: dir.join(MANIFEST_FILE),
        message: format!("no split named `{name}`"),
    })?;
    let path: PathBuf = dir.join(&info.file);
    let bytes = fs::read(&path).map_err(|e| KlsError::io(&path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != info.sha256 {
        return Err(KlsError::Format {
            path,
            message: "digest mismatch".into(),
        });
    }
    let records = load_records(&path)?;
    if records.len() != info.count {
        return Err(KlsError::Format {
            path,
            message: format!("expected {} records, found {}", info.count, records.len()),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FineWindow;

    fn ranges() -> ScenarioRanges {
        ScenarioRanges::all_trips(&GridConfig::desk_default(), 0.3)
    }

    #[test]
    fn zero_band_gives_unit_multipliers() {
        let r = ScenarioRanges { band: 0.0, ..ranges() };
        let sc = sample_scenarios(3, 50, 0, 4, 5, &r).unwrap();
        assert!(sc.iter().all(|s| s.inertia_scale.iter().all(|&m| m == 1.0)));
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_scenarios(11, 20, 0, 4, 5, &ranges()).unwrap();
        let b = sample_scenarios(11, 20, 0, 4, 5, &ranges()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn multiplier_mean_converges() {
        let sc = sample_scenarios(5, 10_000, 0, 4, 5, &ranges()).unwrap();
        let all: Vec<f64> = sc.iter().flat_map(|s| s.inertia_scale.clone()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(all.iter().all(|m| (0.7..=1.3).contains(m)));
        assert!(sc.iter().all(|s| s.shed.iter().all(|u| (0.0..=1.0).contains(u))));
    }

    #[test]
    fn empty_fault_set_is_config_error() {
        let r = ScenarioRanges { faults: vec![], ..ranges() };
        assert!(matches!(
            sample_scenarios(1, 1, 0, 4, 5, &r),
            Err(KlsError::Config(_))
        ));
    }

    fn ramp_trajectory() -> Trajectory {
        let dt = 0.01;
        let times: Vec<f64> = (0..31).map(|j| 0.7 + j as f64 * dt).collect();
        let omega: Vec<f64> = times.iter().map(|t| 0.001 * t).collect();
        Trajectory {
            coarse_times: vec![1.0],
            omega: vec![0.001],
            windows: vec![FineWindow {
                end_time: 1.0,
                dt,
                omega: omega.clone(),
                signals: vec![vec![2.0; 31]],
            }],
            nadir: 0.0,
            steady_state: 0.0,
            collapsed: false,
            settled: true,
            shed_time: None,
            shed: vec![],
        }
    }

    #[test]
    fn ramp_window_indexing() {
        let traj = ramp_trajectory();
        let e = build_embedding_at(&traj, 0.3, 0.1, 1.0).unwrap();
        let expected = [0.0007, 0.0008, 0.0009, 0.001];
        for (a, b) in e[..4].iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(&e[4..], &[2.0; 4]);
    }

    #[test]
    fn degenerate_and_constant_windows() {
        let mut traj = ramp_trajectory();
        let e = build_embedding(&traj, 0.0, 0.01, 0).unwrap();
        assert_eq!(e, vec![traj.windows[0].omega[30], 2.0]);
        traj.windows[0].omega = vec![-0.02; 31];
        let e = build_embedding(&traj, 0.3, 0.01, 0).unwrap();
        assert_eq!(e.len(), 31 * 2);
        assert!(e[..31].iter().all(|&x| x == -0.02));
    }

    #[test]
    fn short_history_is_window_error() {
        let traj = ramp_trajectory();
        assert!(matches!(
            build_embedding(&traj, 0.5, 0.01, 0),
            Err(KlsError::Window { .. })
        ));
    }

    #[test]
    fn embedding_length_matches_grid() {
        let cfg = GridConfig::desk_default();
        let gen = GenerationConfig {
            grid: SampleGrid {
                points: 5,
                ..SampleGrid::default()
            },
            ..GenerationConfig::default()
        };
        let sc = sample_scenarios(2, 2, 0, 4, 5, &ranges()).unwrap();
        let trajs = generate(&cfg, &sc, &gen).unwrap();
        for t in &trajs {
            for k in 0..5 {
                let e = build_embedding(t, 0.3, 0.01, k).unwrap();
                assert_eq!(e.len(), 31 * (1 + cfg.signal_count()));
            }
        }
    }

    #[test]
    fn persist_round_trip() {
        let cfg = GridConfig::desk_default();
        let gen = GenerationConfig {
            grid: SampleGrid {
                points: 4,
                ..SampleGrid::default()
            },
            ..GenerationConfig::default()
        };
        let sc = sample_scenarios(9, 6, 0, 4, 5, &ranges()).unwrap();
        let trajs = generate(&cfg, &sc, &gen).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = split_and_persist(&sc, &trajs, (2, 1), dir.path(), 9, 0.3, &gen).unwrap();
        assert_eq!(m.split("train").unwrap().count, 4);
        assert_eq!(m.split("test").unwrap().count, 2);
        let train = load_split(dir.path(), &m, "train").unwrap();
        let test = load_split(dir.path(), &m, "test").unwrap();
        let back: Vec<Trajectory> = train.iter().chain(&test).map(|r| r.trajectory.clone()).collect();
        assert_eq!(back, trajs);
        let train_ids: Vec<u64> = train.iter().map(|r| r.scenario.id).collect();
        assert!(test.iter().all(|r| !train_ids.contains(&r.scenario.id)));

        let m1 = split_and_persist(&sc, &trajs, (1, 0), dir.path(), 9, 0.3, &gen).unwrap();
        assert_eq!(m1.split("test").unwrap().count, 0);
        assert!(load_split(dir.path(), &m1, "test").unwrap().is_empty());
    }
}
