//! Least-squares reference identifiers: DMD with control on raw states and
//! EDMD on Gaussian RBF-lifted states.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_embedding, Record};
use crate::error::{KlsError, Result};
use crate::grid::Trajectory;
use crate::matrix_io;
use crate::stats;

/// Relative singular-value floor below which the data matrix counts as rank
/// deficient.
const RANK_TOL: f64 = 1e-12;

/// Solve `min Σ‖z⁺ − A z − B u‖²` over snapshot columns.
///
/// With `ridge = Some(λ)` a rank-deficient problem is regularised by
/// Tikhonov damping `λ·σ_max²`; without it, rank deficiency is an error.
pub fn fit_dmdc(
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
    z_next: &DMatrix<f64>,
    ridge: Option<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = z.shape();
    let q = u.nrows();
    if u.ncols() != m || z_next.shape() != (n, m) {
        return Err(KlsError::Argument("snapshot matrices are not aligned".into()));
    }
    if m == 0 {
        return Err(KlsError::Argument("no snapshot pairs".into()));
    }
    let mut x = DMatrix::zeros(n + q, m);
    x.rows_mut(0, n).copy_from(z);
    x.rows_mut(n, q).copy_from(u);
    let svd = x.transpose().svd(true, true);
    let sigma = &svd.singular_values;
    let smax = sigma.max();
    if !smax.is_finite() {
        return Err(KlsError::Numeric("non-finite snapshot data".into()));
    }
    let deficient = m < n + q || sigma.iter().any(|&s| s <= RANK_TOL * smax);
    let damping = match (deficient, ridge) {
        (false, _) => 0.0,
        (true, Some(l)) => l * smax * smax,
        (true, None) => {
            return Err(KlsError::Conditioning(format!(
                "snapshot matrix of {m} pairs is rank deficient for {} unknowns per row",
                n + q
            )))
        }
    };
    let uu = svd.u.as_ref().expect("left vectors requested");
    let vt = svd.v_t.as_ref().expect("right vectors requested");
    // Θᵀ = V diag(σ/(σ²+λ)) Uᵀ z⁺ᵀ
    let inv = sigma.map(|s| {
        if damping == 0.0 {
            if s > 0.0 {
                1.0 / s
            } else {
                0.0
            }
        } else {
            s / (s * s + damping)
        }
    });
    let proj = uu.transpose() * z_next.transpose();
    let scaled = DMatrix::from_fn(proj.nrows(), proj.ncols(), |i, j| proj[(i, j)] * inv[i]);
    let theta_t = vt.transpose() * scaled;
    let theta = theta_t.transpose();
    Ok((theta.columns(0, n).into_owned(), theta.columns(n, q).into_owned()))
}

/// Gaussian RBF dictionary on standardised states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdmdDictionary {
    pub centers: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl EdmdDictionary {
    pub fn empty(dim: usize) -> Self {
        EdmdDictionary {
            centers: Vec::new(),
            bandwidth: 1.0,
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// `count` centres by seeded k-means on the standardised columns of
    /// `states`; bandwidth is the median pairwise centre distance.
    pub fn fit(states: &DMatrix<f64>, count: usize, seed: u64) -> Result<Self> {
        let (dim, n) = states.shape();
        if count == 0 {
            return Ok(EdmdDictionary::empty(dim));
        }
        if n == 0 {
            return Err(KlsError::Argument("no states to place centres on".into()));
        }
        let mut shift = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for i in 0..dim {
            let row: Vec<f64> = states.row(i).iter().copied().collect();
            let m = stats::mean(&row);
            let sd = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            shift[i] = m;
            scale[i] = if sd > 1e-12 { sd } else { 1.0 };
        }
        let points: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..dim).map(|i| (states[(i, j)] - shift[i]) / scale[i]).collect())
            .collect();
        let centers = kmeans(&points, count.min(n), seed, 100);
        let mut dists = Vec::new();
        for a in 0..centers.len() {
            for b in a + 1..centers.len() {
                dists.push(sq_dist(&centers[a], &centers[b]).sqrt());
            }
        }
        let bandwidth = if dists.is_empty() { 1.0 } else { stats::median(&dists) };
        if !(bandwidth > 0.0) {
            return Err(KlsError::Numeric("RBF centres coincide".into()));
        }
        Ok(EdmdDictionary {
            centers,
            bandwidth,
            shift,
            scale,
        })
    }

    /// `[z; ψ₁(z) … ψ_k(z)]`.
    pub fn lift(&self, z: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = z
            .iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, k))| (v - s) / k)
            .collect();
        let mut out = z.to_vec();
        let h2 = self.bandwidth * self.bandwidth;
        out.extend(self.centers.iter().map(|c| (-sq_dist(&scaled, c) / h2).exp()));
        out
    }

    pub fn lift_columns(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = z
            .column_iter()
            .map(|c| DVector::from_vec(self.lift(c.as_slice())))
            .collect();
        DMatrix::from_columns(&cols)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd iterations from a k-means++ seeding.
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, iters: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, d) in nearest.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[next].clone());
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .expect("k > 0");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
}

/// What the baseline observes at each coarse point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    /// Use the whole delay window instead of the latest sample.
    pub window: bool,
    pub tau: f64,
    pub dt_embed: f64,
}

impl StateSpec {
    pub fn instantaneous(dt_embed: f64) -> Self {
        StateSpec {
            window: false,
            tau: 0.0,
            dt_embed,
        }
    }

    /// State vector at coarse point `index`.
    pub fn state(&self, traj: &Trajectory, index: usize) -> Result<Vec<f64>> {
        let tau = if self.window { self.tau } else { 0.0 };
        build_embedding(traj, tau, self.dt_embed, index)
    }
}

/// Fitted DMD/EDMD model; frequency is the first lifted coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub version: u32,
    pub method: String,
    #[serde(with = "matrix_io")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_io")]
    pub b: DMatrix<f64>,
    pub dictionary: EdmdDictionary,
    pub state: StateSpec,
    pub max_pred_error: f64,
    pub pred_error_by_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Number of RBFs; 0 gives plain DMD with control.
    pub rbf_count: usize,
    pub seed: u64,
    pub ridge: f64,
    pub state: StateSpec,
}

impl LinearModel {
    pub fn lift(&self, z: &[f64]) -> Vec<f64> {
        self.dictionary.lift(z)
    }

    pub fn initial_state(&self, traj: &Trajectory, index: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.lift(&self.state.state(traj, index)?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("model serialises");
        fs::write(path, text).map_err(|e| KlsError::io(path, e))
    }
}

/// Fit DMD (no RBFs) or EDMD on persisted training records.
pub fn fit_baseline(records: &[Record], config: &BaselineConfig) -> Result<LinearModel> {
    if records.is_empty() {
        return Err(KlsError::Argument("empty training set".into()));
    }
    let mut z = Vec::new();
    let mut zn = Vec::new();
    let mut u = Vec::new();
    for r in records {
        let t = r.trajectory.omega.len();
        let states = (0..t)
            .map(|k| config.state.state(&r.trajectory, k))
            .collect::<Result<Vec<_>>>()?;
        for k in 0..t - 1 {
            z.push(DVector::from_vec(states[k].clone()));
            zn.push(DVector::from_vec(states[k + 1].clone()));
            u.push(DVector::from_vec(r.scenario.shed.clone()));
        }
    }
    let z = DMatrix::from_columns(&z);
    let zn = DMatrix::from_columns(&zn);
    let u = DMatrix::from_columns(&u);
    let dictionary = EdmdDictionary::fit(&z, config.rbf_count, config.seed)?;
    let (a, b) = fit_dmdc(
        &dictionary.lift_columns(&z),
        &u,
        &dictionary.lift_columns(&zn),
        Some(config.ridge),
    )?;
    let mut model = LinearModel {
        version: 1,
        method: if config.rbf_count == 0 { "dmd" } else { "edmd" }.into(),
        a,
        b,
        dictionary,
        state: config.state,
        max_pred_error: 0.0,
        pred_error_by_step: Vec::new(),
    };
    let mut by_step: Vec<f64> = Vec::new();
    for r in records {
        let g1 = model.initial_state(&r.trajectory, 0)?;
        let pred = crate::predictor::predict_omega(&model.a, &model.b, &g1, &r.scenario.shed, r.trajectory.omega.len());
        by_step.resize(by_step.len().max(pred.len()), 0.0);
        for (k, (p, w)) in pred.iter().zip(&r.trajectory.omega).enumerate() {
            by_step[k] = by_step[k].max((p - w).abs());
        }
    }
    model.max_pred_error = by_step.iter().copied().fold(0.0, f64::max);
    model.pred_error_by_step = by_step;
    Ok(model)
}
