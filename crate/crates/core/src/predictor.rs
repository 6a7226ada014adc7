//! Common view of every linear frequency predictor.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::baselines::LinearModel;
use crate::error::{KlsError, Result};
use crate::grid::Trajectory;
use crate::koopman::KoopmanModel;

/// Frequency predicted at `horizon` coarse points (the first is the
/// measured present) under one-shot constant shedding `shed`.
pub fn predict_omega(a: &DMatrix<f64>, b: &DMatrix<f64>, g1: &DVector<f64>, shed: &[f64], horizon: usize) -> Vec<f64> {
    let u = DVector::from_column_slice(shed);
    let bu = b * u;
    let mut g = g1.clone();
    let mut out = Vec::with_capacity(horizon);
    out.push(g[0]);
    for _ in 1..horizon {
        g = a * &g + &bu;
        out.push(g[0]);
    }
    out
}

/// A lifted linear model `g⁺ = A g + B u` whose first coordinate is ω.
pub trait Predictor: Sync {
    fn method(&self) -> &str;
    fn a(&self) -> &DMatrix<f64>;
    fn b(&self) -> &DMatrix<f64>;
    /// Lifted state at coarse point `index` of a measured trajectory.
    fn initial_state(&self, traj: &Trajectory, index: usize) -> Result<DVector<f64>>;
    /// Largest frequency prediction error on the training set, pu.
    fn max_pred_error(&self) -> f64;

    fn predict(&self, traj: &Trajectory, shed: &[f64]) -> Result<Vec<f64>> {
        let g1 = self.initial_state(traj, 0)?;
        Ok(predict_omega(self.a(), self.b(), &g1, shed, traj.omega.len()))
    }
}

impl Predictor for KoopmanModel {
    fn method(&self) -> &str {
        &self.method
    }

    fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn initial_state(&self, traj: &Trajectory, index: usize) -> Result<DVector<f64>> {
        let w = crate::dataset::build_embedding(traj, self.embedding.tau, self.embedding.dt_embed, index)?;
        self.encode(&w, traj.omega[index])
    }

    fn max_pred_error(&self) -> f64 {
        self.meta.max_pred_error
    }
}

impl Predictor for LinearModel {
    fn method(&self) -> &str {
        &self.method
    }

    fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn initial_state(&self, traj: &Trajectory, index: usize) -> Result<DVector<f64>> {
        LinearModel::initial_state(self, traj, index)
    }

    fn max_pred_error(&self) -> f64 {
        self.max_pred_error
    }
}

/// Either model family, as loaded from disk.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Koopman(KoopmanModel),
    Linear(LinearModel),
}

impl AnyModel {
    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            AnyModel::Koopman(m) => m,
            AnyModel::Linear(m) => m,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KlsError::io(path, e))?;
        let bad = |message: String| KlsError::Format {
            path: path.to_path_buf(),
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if value.get("version").and_then(|v| v.as_u64()).is_none() {
            return Err(bad("missing version field".into()));
        }
        if value.get("encoder").is_some() {
            let m = KoopmanModel::load(path)?;
            Ok(AnyModel::Koopman(m))
        } else {
            let m: LinearModel = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            Ok(AnyModel::Linear(m))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            AnyModel::Koopman(m) => m.save(path),
            AnyModel::Linear(m) => m.save(path),
        }
    }
}
