//! One-shot shedding decision: the margin-tightened QP on a linear
//! predictor, quantisation to feeder steps and the safety margin.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KlsError, Result};
use crate::grid::{GridConfig, Trajectory};
use crate::predictor::{predict_omega, Predictor};

/// Constraint tightening QP on a lifted linear predictor.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g1: DVector<f64>,
    /// Symmetric positive definite cost.
    pub r: DMatrix<f64>,
    pub omega_min: f64,
    pub omega_inf_min: f64,
    pub zeta: f64,
    /// Coarse points including the present.
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub u: Vec<f64>,
    pub objective: f64,
    /// Largest of the stationarity, feasibility, sign and complementarity
    /// residuals.
    pub kkt_residual: f64,
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Rows `a_iᵀ u ≥ b_i`.
struct Constraints {
    rows: DMatrix<f64>,
    rhs: Vec<f64>,
}

impl ControlProblem {
    pub fn validate(&self) -> Result<()> {
        let p = self.a.nrows();
        if self.a.ncols() != p || self.b.nrows() != p || self.g1.len() != p {
            return Err(KlsError::Argument("inconsistent model dimensions".into()));
        }
        let q = self.b.ncols();
        if self.r.shape() != (q, q) {
            return Err(KlsError::Argument(format!("cost matrix must be {q}x{q}")));
        }
        if (&self.r - self.r.transpose()).amax() > 1e-12 * self.r.amax().max(1.0) {
            return Err(KlsError::Config("cost matrix is not symmetric".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(KlsError::Config("cost matrix is not positive definite".into()));
        }
        if !(self.omega_min <= self.omega_inf_min && self.omega_inf_min <= 0.0) {
            return Err(KlsError::Config(
                "limits must satisfy omega_min <= omega_inf_min <= 0".into(),
            ));
        }
        if !(self.zeta >= 0.0) {
            return Err(KlsError::Config("safety margin must be non-negative".into()));
        }
        if self.horizon < 1 {
            return Err(KlsError::Config("horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Free response `C A^{t−1} g₁` and input row `C Σ_{k<t−1} A^k B` for
    /// t = 1..T.
    pub fn response_rows(&self) -> (Vec<f64>, DMatrix<f64>) {
        let q = self.b.ncols();
        let mut free = Vec::with_capacity(self.horizon);
        let mut gain = DMatrix::zeros(self.horizon, q);
        let mut g = self.g1.clone();
        let mut acc = DMatrix::<f64>::zeros(self.a.nrows(), q);
        for t in 0..self.horizon {
            free.push(g[0]);
            gain.row_mut(t).copy_from(&acc.row(0));
            g = &self.a * g;
            acc = &self.a * acc + &self.b;
        }
        (free, gain)
    }

    fn constraints(&self) -> Constraints {
        let q = self.b.ncols();
        let (free, gain) = self.response_rows();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        // the present (t = 1) is measured and independent of u
        for t in 1..self.horizon {
            rows.push(gain.row(t).into_owned());
            rhs.push(self.omega_min + self.zeta - free[t]);
        }
        let last = self.horizon - 1;
        if last >= 1 {
            rows.push(gain.row(last).into_owned());
            rhs.push(self.omega_inf_min + self.zeta - free[last]);
        }
        for i in 0..q {
            let mut lo = nalgebra::RowDVector::zeros(q);
            lo[i] = 1.0;
            rows.push(lo.clone());
            rhs.push(0.0);
            rows.push(-lo);
            rhs.push(-1.0);
        }
        Constraints {
            rows: DMatrix::from_rows(&rows),
            rhs,
        }
    }

    /// Predicted frequency at all coarse points under constant `u`.
    pub fn predict(&self, u: &[f64]) -> Vec<f64> {
        predict_omega(&self.a, &self.b, &self.g1, u, self.horizon)
    }
}

/// Minimise `uᵀRu` subject to the tightened limits and `0 ≤ u ≤ 1` with a
/// primal active-set method started from full shedding.
pub fn solve_qp(problem: &ControlProblem) -> Result<QpSolution> {
    problem.validate()?;
    let q = problem.b.ncols();
    let cons = problem.constraints();
    let m = cons.rhs.len();
    let slack = |u: &DVector<f64>, i: usize| (cons.rows.row(i) * u)[0] - cons.rhs[i];
    let scale = |i: usize| cons.rows.row(i).amax().max(1.0);

    let mut u = DVector::from_element(q, 1.0);
    let feas_tol = 1e-12;
    if let Some((worst, viol)) = (0..m)
        .map(|i| (i, -slack(&u, i) / scale(i)))
        .filter(|(_, v)| *v > feas_tol)
        .max_by(|a, b| a.1.total_cmp(&b.1))
    {
        return Err(KlsError::Infeasible {
            step: constraint_step(worst, problem.horizon),
            violation: viol,
        });
    }

    let h = &problem.r * 2.0;
    let mut working: Vec<usize> = (0..q).map(|i| m - 2 * q + 2 * i + 1).collect();
    let mut iterations = 0;
    let max_iter = 50 * (m + q);
    // set after an unblocked full step: u already minimises on the working set
    let mut subspace_min = false;
    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(KlsError::Numeric("active-set iteration limit reached".into()));
        }
        let (step, lambda) = eqp(&h, &u, &cons.rows, &working)?;
        // a full working set pins a vertex; any step there is roundoff
        if subspace_min || working.len() >= q || step.amax() <= 1e-12 * (1.0 + u.amax()) {
            subspace_min = false;
            let neg = lambda
                .iter()
                .enumerate()
                .filter(|(_, l)| **l < -1e-14)
                .min_by(|a, b| a.1.total_cmp(b.1));
            match neg {
                None => {
                    let mut full = vec![0.0; m];
                    for (k, &i) in working.iter().enumerate() {
                        full[i] = lambda[k].max(0.0);
                    }
                    let kkt = kkt_residual(&h, &u, &cons, &full);
                    let objective = (u.transpose() * &problem.r * &u)[0];
                    let mut active = working.clone();
                    active.sort_unstable();
                    return Ok(QpSolution {
                        u: u.iter().copied().collect(),
                        objective,
                        kkt_residual: kkt,
                        active,
                        iterations,
                    });
                }
                Some((k, _)) => {
                    working.remove(k);
                }
            }
        } else {
            let mut alpha = 1.0;
            let mut blocking = None;
            for i in 0..m {
                if working.contains(&i) {
                    continue;
                }
                let ap = (cons.rows.row(i) * &step)[0];
                if ap < -1e-14 * scale(i) {
                    let ratio = (slack(&u, i).max(0.0)) / -ap;
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(i);
                    }
                }
            }
            u += &step * alpha;
            match blocking {
                Some(i) => working.push(i),
                None => subspace_min = true,
            }
        }
    }
}

/// Equality-constrained step: min ½pᵀHp + (Hu)ᵀp s.t. A_W p = 0, with
/// multipliers of the working constraints.
fn eqp(h: &DMatrix<f64>, u: &DVector<f64>, rows: &DMatrix<f64>, working: &[usize]) -> Result<(DVector<f64>, Vec<f64>)> {
    let q = u.len();
    let w = working.len();
    let mut kkt = DMatrix::zeros(q + w, q + w);
    kkt.view_mut((0, 0), (q, q)).copy_from(h);
    for (k, &i) in working.iter().enumerate() {
        for j in 0..q {
            kkt[(q + k, j)] = rows[(i, j)];
            kkt[(j, q + k)] = -rows[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(q + w);
    rhs.rows_mut(0, q).copy_from(&(-(h * u)));
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| KlsError::Numeric("singular working-set system".into()))?;
    let step = sol.rows(0, q).into_owned();
    let lambda = sol.rows(q, w).iter().copied().collect();
    Ok((step, lambda))
}

fn kkt_residual(h: &DMatrix<f64>, u: &DVector<f64>, cons: &Constraints, lambda: &[f64]) -> f64 {
    let mut grad = h * u;
    for (i, l) in lambda.iter().enumerate() {
        if *l != 0.0 {
            grad -= cons.rows.row(i).transpose() * *l;
        }
    }
    let mut worst = grad.amax();
    for (i, l) in lambda.iter().enumerate() {
        let s = (cons.rows.row(i) * u)[0] - cons.rhs[i];
        worst = worst.max((-s).max(0.0)).max((-l).max(0.0)).max((l * s).abs());
    }
    worst
}

/// Map a constraint row index back to its coarse step (1-based).
fn constraint_step(index: usize, horizon: usize) -> usize {
    if index < horizon - 1 {
        index + 2
    } else {
        horizon
    }
}

/// Nearest multiple of `d`, halves rounding up, capped at full shedding.
pub fn quantize(u: &[f64], d: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(d)
        .map(|(&x, &step)| {
            let n = (x / step + 0.5 + 1e-9).floor();
            (n * step).min(1.0)
        })
        .collect()
}

/// Smallest multiple of `d` not below `u`, capped at full shedding.
pub fn quantize_ceil(u: &[f64], d: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(d)
        .map(|(&x, &step)| {
            let n = (x / step - 1e-9).ceil().max(0.0);
            (n * step).min(1.0)
        })
        .collect()
}

/// Per-bus feeder size in pu of each bus load.
pub fn feeder_step_pu(config: &GridConfig, d_mw: f64) -> Result<Vec<f64>> {
    if !(d_mw > 0.0) {
        return Err(KlsError::Config("feeder size must be positive".into()));
    }
    Ok(config.loads.iter().map(|l| d_mw / l.base_mw).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyMargin {
    pub zeta: f64,
    /// Quantisation term per step t = 1..T: `Σ_i |r_t,i| d_i / 2` with
    /// `r_t = C Σ_{k<t} A^k B`.
    pub quantization_terms: Vec<f64>,
    /// `‖r_t‖₂ · ‖d‖₂ / 2` for reference.
    pub euclidean_terms: Vec<f64>,
    pub max_pred_error: f64,
    pub spectral_radius: f64,
    pub growth_warning: bool,
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// `ζ = max_t Σ_i |r_t,i| d_i/2 + max_pred_error` over t = 1..T.
pub fn zeta_margin(a: &DMatrix<f64>, b: &DMatrix<f64>, d: &[f64], max_pred_error: f64, horizon: usize) -> Result<SafetyMargin> {
    if d.len() != b.ncols() {
        return Err(KlsError::Argument(format!(
            "{} feeder steps for {} inputs",
            d.len(),
            b.ncols()
        )));
    }
    if d.iter().any(|x| !(*x >= 0.0)) || !(max_pred_error >= 0.0) {
        return Err(KlsError::Argument("feeder steps and error must be non-negative".into()));
    }
    let rho = spectral_radius(a);
    let growth_warning = rho >= 1.05;
    if growth_warning {
        log::warn!("spectral radius {rho:.3} >= 1.05: margin grows with the horizon");
    }
    let d_norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut acc = b.clone();
    let mut quantization_terms = Vec::with_capacity(horizon);
    let mut euclidean_terms = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let row = acc.row(0);
        quantization_terms.push(row.iter().zip(d).map(|(r, di)| r.abs() * di / 2.0).sum());
        euclidean_terms.push(row.norm() * d_norm / 2.0);
        acc = a * acc + b;
    }
    let worst = quantization_terms.iter().copied().fold(0.0, f64::max);
    Ok(SafetyMargin {
        zeta: worst + max_pred_error,
        quantization_terms,
        euclidean_terms,
        max_pred_error,
        spectral_radius: rho,
        growth_warning,
    })
}

/// Limits and options of the KLS decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub omega_min: f64,
    pub omega_inf_min: f64,
    /// Diagonal of the cost matrix; empty means identity.
    pub cost_diag: Vec<f64>,
    /// Round up instead of to nearest.
    pub ceil: bool,
    /// Use this margin instead of the computed one.
    pub zeta_override: Option<f64>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            omega_min: -0.02,
            omega_inf_min: -0.01,
            cost_diag: Vec::new(),
            ceil: false,
            zeta_override: None,
        }
    }
}

impl ControlConfig {
    pub fn cost_matrix(&self, q: usize) -> Result<DMatrix<f64>> {
        if self.cost_diag.is_empty() {
            return Ok(DMatrix::identity(q, q));
        }
        if self.cost_diag.len() != q {
            return Err(KlsError::Config(format!("cost_diag needs {q} entries")));
        }
        Ok(DMatrix::from_diagonal(&DVector::from_column_slice(&self.cost_diag)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShedPlan {
    pub method: String,
    pub buses: Vec<String>,
    pub bus_mw: Vec<f64>,
    pub d_pu: Vec<f64>,
    pub continuous: Vec<f64>,
    pub quantized: Vec<f64>,
    pub shed_mw: Vec<f64>,
    pub total_shed_mw: f64,
    pub zeta: f64,
    pub kkt_residual: f64,
    pub predicted_continuous: Vec<f64>,
    pub predicted_quantized: Vec<f64>,
}

/// Encode the measurement at the first coarse point, tighten by ζ, solve,
/// quantise.
pub fn kls_pipeline(
    model: &dyn Predictor,
    measurement: &Trajectory,
    grid: &GridConfig,
    config: &ControlConfig,
    d_mw: f64,
    horizon: usize,
) -> Result<ShedPlan> {
    let d = feeder_step_pu(grid, d_mw)?;
    let zeta = match config.zeta_override {
        Some(z) => z,
        None => zeta_margin(model.a(), model.b(), &d, model.max_pred_error(), horizon)?.zeta,
    };
    let problem = ControlProblem {
        a: model.a().clone(),
        b: model.b().clone(),
        g1: model.initial_state(measurement, 0)?,
        r: config.cost_matrix(model.b().ncols())?,
        omega_min: config.omega_min,
        omega_inf_min: config.omega_inf_min,
        zeta,
        horizon,
    };
    let sol = solve_qp(&problem)?;
    let quantized = if config.ceil {
        quantize_ceil(&sol.u, &d)
    } else {
        quantize(&sol.u, &d)
    };
    let bus_mw: Vec<f64> = grid.loads.iter().map(|l| l.base_mw).collect();
    let shed_mw: Vec<f64> = quantized.iter().zip(&bus_mw).map(|(u, p)| u * p).collect();
    Ok(ShedPlan {
        method: model.method().to_string(),
        buses: grid.loads.iter().map(|l| l.name.clone()).collect(),
        total_shed_mw: shed_mw.iter().sum(),
        bus_mw,
        d_pu: d,
        predicted_continuous: problem.predict(&sol.u),
        predicted_quantized: problem.predict(&quantized),
        continuous: sol.u,
        quantized,
        shed_mw,
        zeta,
        kkt_residual: sol.kkt_residual,
    })
}

/// Smallest ζ in `[lo, hi]` (to `tol`) for which `safe` holds, assuming
/// monotonicity. `None` when even `hi` is unsafe.
pub fn bisect_min_zeta<F>(lo: f64, hi: f64, tol: f64, mut safe: F) -> Result<Option<f64>>
where
    F: FnMut(f64) -> Result<bool>,
{
    if safe(lo)? {
        return Ok(Some(lo));
    }
    if !safe(hi)? {
        return Ok(None);
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if safe(mid)? {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(Some(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_problem(zeta: f64) -> ControlProblem {
        ControlProblem {
            a: DMatrix::from_element(1, 1, 0.9),
            b: DMatrix::from_element(1, 1, 0.05),
            g1: DVector::from_element(1, -0.03),
            r: DMatrix::identity(1, 1),
            omega_min: -0.02,
            omega_inf_min: -0.01,
            zeta,
            horizon: 10,
        }
    }

    fn grid_search(p: &ControlProblem) -> f64 {
        let (free, gain) = p.response_rows();
        (0..=10_000)
            .map(|k| k as f64 * 1e-4)
            .find(|&u| {
                (1..p.horizon).all(|t| free[t] + gain[(t, 0)] * u >= p.omega_min + p.zeta)
                    && free[p.horizon - 1] + gain[(p.horizon - 1, 0)] * u >= p.omega_inf_min + p.zeta
            })
            .unwrap()
    }

    #[test]
    fn scalar_matches_grid_search() {
        let p = scalar_problem(0.0);
        let sol = solve_qp(&p).unwrap();
        let oracle = grid_search(&p);
        assert!((sol.objective - oracle * oracle).abs() <= 2e-4);
        assert!((sol.u[0] - 0.14).abs() < 1e-12);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn already_safe_gives_zero() {
        let mut p = scalar_problem(0.0);
        p.g1[0] = 0.0;
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.u, vec![0.0]);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn larger_margin_never_cheaper() {
        let mut prev = 0.0;
        for k in 0..10 {
            let sol = solve_qp(&scalar_problem(k as f64 * 0.001)).unwrap();
            assert!(sol.objective >= prev - 1e-15);
            prev = sol.objective;
        }
    }

    #[test]
    fn infeasible_reports_worst_step() {
        let err = solve_qp(&scalar_problem(0.1)).unwrap_err();
        assert!(matches!(err, KlsError::Infeasible { .. }));
    }

    #[test]
    fn degenerate_constraints_terminate() {
        let a = DMatrix::from_column_slice(
            3,
            3,
            &[0.0, -0.17614786189713985, 0.0, 0.06617547553225128, 0.10653848093027823, -0.1567852030948333, 0.17070644804429266, -0.07332043558823556, 0.0],
        );
        let b = DMatrix::from_column_slice(3, 2, &[0.543278234561694, 0.0, -0.6811141160144258, -0.3854793807894293, -0.16898285963911977, 0.7495156816196792]);
        let zeta = zeta_margin(&a, &b, &[0.01, 0.16161071322890927], 0.0, 8).unwrap().zeta;
        let p = ControlProblem {
            a,
            b,
            g1: DVector::zeros(3),
            r: DMatrix::identity(2, 2),
            omega_min: -0.02,
            omega_inf_min: -0.01,
            zeta,
            horizon: 8,
        };
        let sol = solve_qp(&p).unwrap();
        assert!(sol.kkt_residual <= 1e-8, "{sol:?}");
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.0], &[0.1]), vec![0.0]);
        assert_eq!(quantize(&[0.37], &[0.25]), vec![0.25]);
        assert!((quantize(&[0.45], &[0.10])[0] - 0.5).abs() < 1e-15);
        assert_eq!(quantize_ceil(&[0.37], &[0.25]), vec![0.5]);
        assert_eq!(quantize_ceil(&[0.5], &[0.25]), vec![0.5]);
    }

    #[test]
    fn zeta_scalar_example() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let m = zeta_margin(&a, &b, &[0.1], 0.02, 2).unwrap();
        assert!((m.quantization_terms[0] - 0.05).abs() < 1e-15);
        assert!((m.quantization_terms[1] - 0.075).abs() < 1e-15);
        assert!((m.zeta - 0.095).abs() < 1e-15);
        let zero = zeta_margin(&a, &b, &[0.0], 0.0, 5).unwrap();
        assert_eq!(zero.zeta, 0.0);
    }

    #[test]
    fn unstable_model_warns() {
        let a = DMatrix::from_element(1, 1, 1.1);
        let b = DMatrix::from_element(1, 1, 1.0);
        assert!(zeta_margin(&a, &b, &[0.1], 0.0, 3).unwrap().growth_warning);
    }

    #[test]
    fn bisection_finds_threshold() {
        let z = bisect_min_zeta(0.0, 0.5, 1e-6, |z| Ok(z >= 0.123)).unwrap().unwrap();
        assert!(z >= 0.123 && z - 0.123 < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn model(p: usize, q: usize) -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>)> {
            (
                proptest::collection::vec(-1.0..1.0f64, p * p),
                proptest::collection::vec(-1.0..1.0f64, p * q),
                0.2..1.1f64,
            )
                .prop_map(move |(a, b, rho)| {
                    let a = DMatrix::from_vec(p, p, a);
                    let r = spectral_radius(&a).max(1e-6);
                    (a * (rho / r), DMatrix::from_vec(p, q, b))
                })
        }

        fn triple() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, Vec<f64>, Vec<f64>, usize)> {
            (1usize..5, 1usize..4).prop_flat_map(|(p, q)| {
                (
                    model(p, q),
                    proptest::collection::vec(0.0..=1.0f64, q),
                    proptest::collection::vec(1e-3..0.5f64, q),
                    1usize..15,
                )
                    .prop_map(|((a, b), u, d, t)| (a, b, u, d, t))
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn quantization_gap_is_bounded((a, b, u, d, horizon) in triple()) {
                let margin = zeta_margin(&a, &b, &d, 0.0, horizon).unwrap();
                let g1 = DVector::zeros(a.nrows());
                let cont = predict_omega(&a, &b, &g1, &u, horizon + 1);
                let quant = predict_omega(&a, &b, &g1, &quantize(&u, &d), horizon + 1);
                for t in 0..horizon {
                    let gap = (quant[t + 1] - cont[t + 1]).abs();
                    let bound = margin.quantization_terms[t];
                    prop_assert!(gap <= bound * (1.0 + 1e-8) + 1e-14, "t={t} gap={gap} bound={bound}");
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(300))]

            #[test]
            fn margin_covers_quantization_on_the_model(
                (a, b) in model(4, 5),
                g in proptest::collection::vec(-0.03..0.01f64, 4),
                d in proptest::collection::vec(0.01..0.3f64, 5),
                horizon in 2usize..60,
            ) {
                let margin = zeta_margin(&a, &b, &d, 0.0, horizon).unwrap();
                let p = ControlProblem {
                    a: a.clone(),
                    b: b.clone(),
                    g1: DVector::from_vec(g),
                    r: DMatrix::identity(5, 5),
                    omega_min: -0.02,
                    omega_inf_min: -0.01,
                    zeta: margin.zeta,
                    horizon,
                };
                let sol = match solve_qp(&p) {
                    Ok(s) => s,
                    Err(KlsError::Infeasible { .. }) => return Ok(()),
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                };
                let w = p.predict(&quantize(&sol.u, &d));
                for t in 1..horizon {
                    prop_assert!(w[t] >= p.omega_min - 1e-10);
                }
                prop_assert!(w[horizon - 1] >= p.omega_inf_min - 1e-10);
            }
        }

        proptest! {
            #[test]
            fn quantizers_stay_on_grid(u in proptest::collection::vec(0.0..=1.0f64, 1..6), step in 1e-3..0.6f64) {
                let d = vec![step; u.len()];
                let near = quantize(&u, &d);
                let up = quantize_ceil(&u, &d);
                for i in 0..u.len() {
                    prop_assert!((near[i] - u[i]).abs() <= step / 2.0 + 1e-9);
                    prop_assert!(up[i] >= u[i] - 1e-9 || up[i] == 1.0);
                    prop_assert!(up[i] - u[i] < step + 1e-9);
                    prop_assert!((0.0..=1.0).contains(&near[i]) && (0.0..=1.0).contains(&up[i]));
                    prop_assert!(up[i] >= near[i] - 1e-12);
                    for v in [near[i], up[i]] {
                        let k = v / step;
                        prop_assert!(v == 1.0 || (k - k.round()).abs() < 1e-9);
                    }
                }
            }

            #[test]
            fn solution_is_feasible_and_stationary(
                a in 0.3..0.98f64,
                b in 0.01..0.2f64,
                g in -0.06..0.0f64,
                zeta in 0.0..0.01f64,
                horizon in 2usize..20,
            ) {
                let p = ControlProblem {
                    a: DMatrix::from_element(1, 1, a),
                    b: DMatrix::from_element(1, 1, b),
                    g1: DVector::from_element(1, g),
                    r: DMatrix::identity(1, 1),
                    omega_min: -0.02,
                    omega_inf_min: -0.01,
                    zeta,
                    horizon,
                };
                match solve_qp(&p) {
                    Ok(sol) => {
                        prop_assert!(sol.kkt_residual <= 1e-8);
                        let w = p.predict(&sol.u);
                        for t in 1..horizon {
                            prop_assert!(w[t] >= p.omega_min + zeta - 1e-10);
                        }
                        prop_assert!(w[horizon - 1] >= p.omega_inf_min + zeta - 1e-10);
                        // nothing smaller on a fine grid is feasible
                        let (free, gain) = p.response_rows();
                        let ok = |u: f64| (1..horizon).all(|t| free[t] + gain[(t, 0)] * u >= p.omega_min + zeta)
                            && free[horizon - 1] + gain[(horizon - 1, 0)] * u >= p.omega_inf_min + zeta;
                        prop_assert!(!ok(sol.u[0] - 1e-6) || sol.u[0] < 1e-6);
                    }
                    Err(KlsError::Infeasible { .. }) => {
                        let w = p.predict(&[1.0]);
                        let bad = (1..horizon).any(|t| w[t] < p.omega_min + zeta)
                            || w[horizon - 1] < p.omega_inf_min + zeta;
                        prop_assert!(bad);
                    }
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }
        }
    }
}

