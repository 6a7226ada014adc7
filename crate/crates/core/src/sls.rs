//! Stacked block operators over a finite horizon, system responses and the
//! open-loop deviation caused by model error.
//!
//! Stacked vectors are `[g_0; …; g_T]`, `[u_0; …; u_T]` and
//! `[x_0; γ_0; …; γ_{T−1}]`; the dynamics read `G = Z𝒜G + ZℬU + γ`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KlsError, Result};

const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct StackedSystem {
    /// blkdiag(A_0, …, A_{T−1}, 0)
    pub a: DMatrix<f64>,
    /// blkdiag(B_0, …, B_{T−1}, 0)
    pub b: DMatrix<f64>,
    /// Block downshift.
    pub shift: DMatrix<f64>,
    pub p: usize,
    pub q: usize,
    pub horizon: usize,
}

pub fn downshift(blocks: usize, size: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(blocks * size, blocks * size);
    for k in 1..blocks {
        for i in 0..size {
            z[(k * size + i, (k - 1) * size + i)] = 1.0;
        }
    }
    z
}

pub fn build_stacked(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize) -> Result<StackedSystem> {
    StackedSystem::from_blocks(&vec![a.clone(); horizon], &vec![b.clone(); horizon])
}

impl StackedSystem {
    /// Time-varying stack; one (A_t, B_t) per step.
    pub fn from_blocks(a_blocks: &[DMatrix<f64>], b_blocks: &[DMatrix<f64>]) -> Result<Self> {
        let horizon = a_blocks.len();
        if horizon < 1 || b_blocks.len() != horizon {
            return Err(KlsError::Argument("need one (A, B) pair per step, at least one".into()));
        }
        let (p, q) = (a_blocks[0].nrows(), b_blocks[0].ncols());
        if a_blocks.iter().any(|m| m.shape() != (p, p)) || b_blocks.iter().any(|m| m.shape() != (p, q)) {
            return Err(KlsError::Argument("inconsistent block shapes".into()));
        }
        let n = horizon + 1;
        let mut a = DMatrix::zeros(n * p, n * p);
        let mut b = DMatrix::zeros(n * p, n * q);
        for t in 0..horizon {
            a.view_mut((t * p, t * p), (p, p)).copy_from(&a_blocks[t]);
            b.view_mut((t * p, t * q), (p, q)).copy_from(&b_blocks[t]);
        }
        Ok(StackedSystem {
            a,
            b,
            shift: downshift(n, p),
            p,
            q,
            horizon,
        })
    }

    /// `(I − Z𝒜)⁻¹` as the finite sum `Σ_k (Z𝒜)^k`.
    pub fn free_response(&self) -> DMatrix<f64> {
        let za = &self.shift * &self.a;
        let n = za.nrows();
        let mut term = DMatrix::identity(n, n);
        let mut sum = term.clone();
        for _ in 0..self.horizon {
            term = &za * term;
            sum += &term;
        }
        sum
    }

    /// `[I − Z𝒜, −Zℬ]`
    pub fn constraint_operator(&self) -> DMatrix<f64> {
        let n = self.a.nrows();
        let mut m = DMatrix::zeros(n, n + self.b.ncols());
        m.view_mut((0, 0), (n, n))
            .copy_from(&(DMatrix::identity(n, n) - &self.shift * &self.a));
        m.view_mut((0, n), (n, self.b.ncols())).copy_from(&(-(&self.shift * &self.b)));
        m
    }
}

/// Closed-loop maps from the stacked disturbance to states and inputs.
#[derive(Debug, Clone)]
pub struct SystemResponse {
    pub state: DMatrix<f64>,
    pub input: DMatrix<f64>,
}

impl SystemResponse {
    /// `[T_g; T_u]`
    pub fn stacked(&self) -> DMatrix<f64> {
        let (ns, ni) = (self.state.nrows(), self.input.nrows());
        let mut out = DMatrix::zeros(ns + ni, self.state.ncols());
        out.rows_mut(0, ns).copy_from(&self.state);
        out.rows_mut(ns, ni).copy_from(&self.input);
        out
    }

    fn from_stacked(t: &DMatrix<f64>, state_rows: usize) -> Self {
        SystemResponse {
            state: t.rows(0, state_rows).into_owned(),
            input: t.rows(state_rows, t.nrows() - state_rows).into_owned(),
        }
    }

    /// Residual of `[I − Z𝒜, −Zℬ][T_g; T_u] = I`.
    pub fn residual(&self, sys: &StackedSystem) -> f64 {
        let n = sys.a.nrows();
        (sys.constraint_operator() * self.stacked() - DMatrix::identity(n, n)).amax()
    }

    /// Feedback law `T_u T_g⁻¹` realising this response.
    pub fn controller(&self) -> Result<DMatrix<f64>> {
        let inv = self
            .state
            .clone()
            .try_inverse()
            .ok_or_else(|| KlsError::Numeric("state response is singular".into()))?;
        Ok(&self.input * inv)
    }
}

/// Largest magnitude above the block diagonal.
pub fn causality_violation(m: &DMatrix<f64>, row_block: usize, col_block: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j / col_block > i / row_block {
                worst = worst.max(m[(i, j)].abs());
            }
        }
    }
    worst
}

/// Response of the stacked system under the feed-forward map `input`:
/// `T_g = (I − Z𝒜)⁻¹(I + Zℬ T_u)`.
pub fn response_of(sys: &StackedSystem, input: &DMatrix<f64>) -> Result<SystemResponse> {
    let n = sys.a.nrows();
    if input.shape() != (sys.b.ncols(), n) {
        return Err(KlsError::Argument(format!(
            "input response must be {}x{n}",
            sys.b.ncols()
        )));
    }
    if causality_violation(input, sys.q, sys.p) > 0.0 {
        return Err(KlsError::Argument("input response is not block-lower-triangular".into()));
    }
    let state = sys.free_response() * (DMatrix::identity(n, n) + &sys.shift * &sys.b * input);
    let resp = SystemResponse {
        state,
        input: input.clone(),
    };
    let res = resp.residual(sys);
    if res > RESIDUAL_TOL {
        return Err(KlsError::Numeric(format!("response residual {res:e}")));
    }
    Ok(resp)
}

/// `Δ = Z[𝒜_true − 𝒜_id, ℬ_true − ℬ_id]`, so that the true constraint
/// operator applied to the identified response gives `I − ΔT̄`.
pub fn model_mismatch(truth: &StackedSystem, identified: &StackedSystem) -> DMatrix<f64> {
    let n = truth.a.nrows();
    let m = truth.b.ncols();
    let mut d = DMatrix::zeros(n, n + m);
    d.view_mut((0, 0), (n, n)).copy_from(&(&truth.a - &identified.a));
    d.view_mut((0, n), (n, m)).copy_from(&(&truth.b - &identified.b));
    &truth.shift * d
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Columns acting on future disturbances (all but the first block).
pub fn future_columns(t: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    t.columns(p, t.ncols() - p).into_owned()
}

/// Response of the true system driven by the identified controller:
/// `T̄ + T̄Δ(I − T̄Δ)⁻¹T̄`, with the inverse as a finite Neumann sum.
pub fn true_response(truth: &StackedSystem, identified: &StackedSystem, response: &SystemResponse) -> Result<SystemResponse> {
    let delta = model_mismatch(truth, identified);
    let tbar = response.stacked();
    let loop_gain = &tbar * &delta;
    let gain_norm = spectral_norm(&loop_gain);
    if gain_norm >= 1.0 {
        return Err(KlsError::BoundInapplicable { norm: gain_norm });
    }
    let inv = neumann_inverse(&loop_gain, truth.horizon);
    let t = &tbar + &loop_gain * inv * &tbar;
    Ok(SystemResponse::from_stacked(&t, truth.a.nrows()))
}

/// `Σ_{k=0}^{T} X^k`; exact for the nilpotent loop gains above.
pub fn neumann_inverse(x: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
    let n = x.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for _ in 0..horizon {
        term = x * term;
        sum += &term;
    }
    sum
}

/// Identified-minus-true stacked `[G; u]` for disturbance `gamma`:
/// `−T̄^γ̃ Δ^γ̃ (I − T̄^γ̃ Δ^γ̃)⁻¹ T̄ γ`. The first block row of Δ is zero, so
/// only the future-disturbance columns of T̄ contribute.
pub fn open_loop_deviation(response: &SystemResponse, delta: &DMatrix<f64>, gamma: &DVector<f64>, p: usize, horizon: usize) -> DVector<f64> {
    let tbar = response.stacked();
    let future = future_columns(&tbar, p);
    let delta_future = delta.rows(p, delta.nrows() - p);
    let nominal = &tbar * gamma;
    // Neumann sum by repeated products on a vector
    let mut term = nominal.clone();
    let mut acc = nominal.clone();
    for _ in 0..horizon {
        term = &future * (&delta_future * &term);
        acc += &term;
    }
    -(&future * (&delta_future * acc))
}

/// One level of the perturbation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub epsilon: f64,
    pub max_deviation: f64,
    /// `‖T̄^γ̃‖(ε_A+ε_B) / (1 − ‖T̄^γ̃‖(ε_A+ε_B)) · ‖T̄γ‖` maximised over samples.
    pub bound: f64,
    pub neumann_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub horizon: usize,
    pub samples: usize,
    pub rows: Vec<DeviationRow>,
    pub monotone: bool,
}

impl DeviationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,max_deviation,bound,neumann_converged\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epsilon, r.max_deviation, r.bound, r.neumann_converged
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviationConfig {
    pub levels: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub horizon: usize,
    /// Norm of each future disturbance block.
    pub disturbance: f64,
    /// Constant shed applied from the first step.
    pub shed: f64,
}

impl Default for DeviationConfig {
    fn default() -> Self {
        DeviationConfig {
            levels: vec![1e-1, 1e-2, 1e-3, 0.0],
            samples: 50,
            seed: 0,
            horizon: 10,
            disturbance: 1e-3,
            shed: 0.1,
        }
    }
}

/// Gaussian matrix rescaled to spectral norm `eps`.
pub fn random_on_sphere(rng: &mut ChaCha8Rng, rows: usize, cols: usize, eps: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    let n = spectral_norm(&m);
    if n == 0.0 || eps == 0.0 {
        DMatrix::zeros(rows, cols)
    } else {
        m * (eps / n)
    }
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize, norm: f64) -> DVector<f64> {
    let v = DVector::from_fn(len, |_, _| StandardNormal.sample(rng));
    let n = v.norm();
    if n == 0.0 {
        v
    } else {
        v * (norm / n)
    }
}

/// Feed-forward input response holding `u_t = F x_0` for every step, with
/// `F` spreading `shed` over all inputs in proportion to the first state.
pub fn one_shot_input(p: usize, q: usize, horizon: usize, shed: f64) -> DMatrix<f64> {
    let n = horizon + 1;
    let mut input = DMatrix::zeros(n * q, n * p);
    for t in 0..n {
        for j in 0..q {
            input[(t * q + j, 0)] = shed;
        }
    }
    input
}

/// Sample per-step perturbations of size ε around the identified model and
/// record the largest open-loop deviation for each level.
pub fn deviation_bound_check(a: &DMatrix<f64>, b: &DMatrix<f64>, config: &DeviationConfig) -> Result<DeviationReport> {
    if config.levels.iter().any(|e| !(*e >= 0.0)) {
        return Err(KlsError::Config("epsilon levels must be non-negative".into()));
    }
    if config.levels.windows(2).any(|w| w[1] >= w[0]) {
        return Err(KlsError::Config("epsilon levels must be strictly decreasing".into()));
    }
    if config.samples == 0 || config.horizon == 0 {
        return Err(KlsError::Config("samples and horizon must be positive".into()));
    }
    let (p, q, horizon) = (a.nrows(), b.ncols(), config.horizon);
    let identified = build_stacked(a, b, horizon)?;
    let response = response_of(&identified, &one_shot_input(p, q, horizon, config.shed))?;
    let tbar = response.stacked();
    let future_norm = spectral_norm(&future_columns(&tbar, p));
    let n = identified.a.nrows();

    let mut rows = Vec::with_capacity(config.levels.len());
    for (li, &eps) in config.levels.iter().enumerate() {
        let results: Vec<(f64, f64)> = (0..config.samples)
            .into_par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream((li * config.samples + s) as u64);
                let a_blocks: Vec<_> = (0..horizon).map(|_| a + random_on_sphere(&mut rng, p, p, eps)).collect();
                let b_blocks: Vec<_> = (0..horizon).map(|_| b + random_on_sphere(&mut rng, p, q, eps)).collect();
                let truth = StackedSystem::from_blocks(&a_blocks, &b_blocks)?;
                let mut gamma = DVector::zeros(n);
                gamma.rows_mut(0, p).copy_from(&random_vector(&mut rng, p, 1.0));
                for t in 1..=horizon {
                    gamma
                        .rows_mut(t * p, p)
                        .copy_from(&random_vector(&mut rng, p, config.disturbance));
                }
                let delta = model_mismatch(&truth, &identified);
                let dev = open_loop_deviation(&response, &delta, &gamma, p, horizon).norm();
                let x = future_norm * 2.0 * eps;
                let bound = if x < 1.0 {
                    x / (1.0 - x) * (&tbar * &gamma).norm()
                } else {
                    f64::INFINITY
                };
                Ok((dev, bound))
            })
            .collect::<Result<_>>()?;
        let max_deviation = results.iter().map(|r| r.0).fold(0.0, f64::max);
        let bound = results.iter().map(|r| r.1).fold(0.0, f64::max);
        rows.push(DeviationRow {
            epsilon: eps,
            max_deviation,
            bound,
            neumann_converged: future_norm * 2.0 * eps < 1.0,
        });
    }
    let monotone = rows.windows(2).all(|w| w[1].max_deviation < w[0].max_deviation || w[0].max_deviation == 0.0);
    Ok(DeviationReport {
        horizon,
        samples: config.samples,
        rows,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| { let x: f64 = StandardNormal.sample(rng); scale * x })
    }

    fn causal_input(rng: &mut ChaCha8Rng, p: usize, q: usize, horizon: usize) -> DMatrix<f64> {
        let mut m = rand_matrix(rng, (horizon + 1) * q, (horizon + 1) * p, 0.1);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if j / p > i / q {
                    m[(i, j)] = 0.0;
                }
            }
        }
        m
    }

    /// Step-by-step simulation of `g⁺ = A_t g + B_t u + γ` under `u = K G`.
    fn simulate(a: &[DMatrix<f64>], b: &[DMatrix<f64>], k: &DMatrix<f64>, gamma: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (p, q, horizon) = (a[0].nrows(), b[0].ncols(), a.len());
        let mut g = DVector::zeros((horizon + 1) * p);
        let mut u = DVector::zeros((horizon + 1) * q);
        g.rows_mut(0, p).copy_from(&gamma.rows(0, p));
        for t in 0..=horizon {
            // u_t only sees g_0..g_t, later blocks are still zero
            let ut = k.rows(t * q, q) * &g;
            u.rows_mut(t * q, q).copy_from(&ut);
            if t < horizon {
                let next = &a[t] * g.rows(t * p, p) + &b[t] * &ut + gamma.rows((t + 1) * p, p);
                g.rows_mut((t + 1) * p, p).copy_from(&next);
            }
        }
        (g, u)
    }

    #[test]
    fn smallest_stack() {
        let a = DMatrix::from_element(1, 1, 0.7);
        let b = DMatrix::from_element(1, 1, 2.0);
        let s = build_stacked(&a, &b, 1).unwrap();
        assert_eq!(s.a, DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.0, 0.0]));
        assert_eq!(s.shift, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        let z = downshift(4, 2);
        let v = DVector::from_fn(8, |i, _| i as f64 + 1.0);
        let shifted = &z * v;
        assert_eq!(shifted.as_slice(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let ztz = z.transpose() * &z;
        let mut expect = DMatrix::identity(8, 8);
        expect[(6, 6)] = 0.0;
        expect[(7, 7)] = 0.0;
        assert_eq!(ztz, expect);
    }

    #[test]
    fn nilpotent_and_free_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = build_stacked(&rand_matrix(&mut rng, 3, 3, 1.0), &rand_matrix(&mut rng, 3, 2, 1.0), 4).unwrap();
        let za = &s.shift * &s.a;
        let mut pow = DMatrix::identity(za.nrows(), za.nrows());
        for _ in 0..=s.horizon {
            pow = &za * pow;
        }
        assert_eq!(pow.amax(), 0.0);
        let n = za.nrows();
        let inv = (DMatrix::identity(n, n) - za).try_inverse().unwrap();
        assert!((inv - s.free_response()).amax() < 1e-10);
    }

    #[test]
    fn scalar_two_step_by_hand() {
        // a = 0.5, b = 2, u_t = k γ_t (feed-forward on the disturbance)
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 2.0);
        let s = build_stacked(&a, &b, 2).unwrap();
        let k = 0.1;
        let input = DMatrix::from_row_slice(3, 3, &[k, 0.0, 0.0, 0.0, k, 0.0, 0.0, 0.0, k]);
        let r = response_of(&s, &input).unwrap();
        // g_1 = (a + bk) x_0 + γ_0, g_2 = a g_1 + bk γ_0 + γ_1
        let c = 0.5 + 2.0 * k;
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, c, 1.0, 0.0, 0.5 * c, c, 1.0]);
        assert!((r.state - expect).amax() < 1e-15);
    }

    #[test]
    fn response_residual_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, q, h) = (4, 2, 5);
        let s = build_stacked(&rand_matrix(&mut rng, p, p, 0.5), &rand_matrix(&mut rng, p, q, 0.5), h).unwrap();
        let r = response_of(&s, &causal_input(&mut rng, p, q, h)).unwrap();
        assert!(r.residual(&s) <= 1e-10);
        assert_eq!(causality_violation(&r.state, p, p), 0.0);
        let zero = response_of(&s, &DMatrix::zeros((h + 1) * q, (h + 1) * p)).unwrap();
        assert!((zero.state - s.free_response()).amax() == 0.0);
    }

    #[test]
    fn rejects_anticausal_input() {
        let s = build_stacked(&DMatrix::identity(1, 1), &DMatrix::identity(1, 1), 2).unwrap();
        let mut input = DMatrix::zeros(3, 3);
        input[(0, 2)] = 1.0;
        assert!(response_of(&s, &input).is_err());
    }

    #[test]
    fn formulas_match_double_simulation() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (p, q) = (1 + (seed as usize % 4), 1 + (seed as usize % 2));
            let h = 1 + (seed as usize % 5);
            let a = rand_matrix(&mut rng, p, p, 0.4);
            let b = rand_matrix(&mut rng, p, q, 0.4);
            let identified = build_stacked(&a, &b, h).unwrap();
            let resp = response_of(&identified, &causal_input(&mut rng, p, q, h)).unwrap();
            let a_true: Vec<_> = (0..h).map(|_| &a + rand_matrix(&mut rng, p, p, 0.02)).collect();
            let b_true: Vec<_> = (0..h).map(|_| &b + rand_matrix(&mut rng, p, q, 0.02)).collect();
            let truth = StackedSystem::from_blocks(&a_true, &b_true).unwrap();
            let gamma = DVector::from_fn((h + 1) * p, |_, _| StandardNormal.sample(&mut rng));

            let k = resp.controller().unwrap();
            let (g_true, u_true) = simulate(&a_true, &b_true, &k, &gamma);
            let (g_id, u_id) = simulate(&vec![a.clone(); h], &vec![b.clone(); h], &k, &gamma);

            let t = true_response(&truth, &identified, &resp).unwrap();
            assert!((&t.state * &gamma - &g_true).amax() <= 1e-9);
            assert!((&t.input * &gamma - &u_true).amax() <= 1e-9);
            assert!(t.residual(&truth) <= 1e-10);

            let delta = model_mismatch(&truth, &identified);
            let dev = open_loop_deviation(&resp, &delta, &gamma, p, h);
            let mut direct = DVector::zeros(dev.len());
            direct.rows_mut(0, g_id.len()).copy_from(&(&g_id - &g_true));
            direct.rows_mut(g_id.len(), u_id.len()).copy_from(&(&u_id - &u_true));
            assert!((dev - direct).amax() <= 1e-9);
        }
    }

    #[test]
    fn unperturbed_truth_reproduces_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = build_stacked(&rand_matrix(&mut rng, 2, 2, 0.5), &rand_matrix(&mut rng, 2, 1, 0.5), 3).unwrap();
        let r = response_of(&s, &causal_input(&mut rng, 2, 1, 3)).unwrap();
        let t = true_response(&s, &s, &r).unwrap();
        assert_eq!(t.stacked(), r.stacked());
        let delta = model_mismatch(&s, &s);
        let gamma = DVector::from_element(8, 1.0);
        assert_eq!(open_loop_deviation(&r, &delta, &gamma, 2, 3).amax(), 0.0);
        let other = build_stacked(&(s.a.view((0, 0), (2, 2)) * 1.1), &DMatrix::zeros(2, 1), 3).unwrap();
        let delta = model_mismatch(&other, &s);
        assert_eq!(open_loop_deviation(&r, &delta, &DVector::zeros(8), 2, 3).amax(), 0.0);
    }

    #[test]
    fn truncated_neumann_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, q, h) = (3, 2, 4);
        let a = rand_matrix(&mut rng, p, p, 0.5);
        let b = rand_matrix(&mut rng, p, q, 0.5);
        let id = build_stacked(&a, &b, h).unwrap();
        let truth = build_stacked(&(&a + rand_matrix(&mut rng, p, p, 0.3)), &(&b + rand_matrix(&mut rng, p, q, 0.3)), h).unwrap();
        let r = response_of(&id, &causal_input(&mut rng, p, q, h)).unwrap();
        let x = r.stacked() * model_mismatch(&truth, &id);
        let n = x.nrows();
        let exact = (DMatrix::identity(n, n) - &x).try_inverse().unwrap();
        assert!((exact - neumann_inverse(&x, h)).amax() < 1e-10);
    }

    #[test]
    fn large_mismatch_is_rejected() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let id = build_stacked(&a, &b, 3).unwrap();
        let truth = build_stacked(&(&a * 10.0), &b, 3).unwrap();
        let r = response_of(&id, &DMatrix::zeros(4, 4)).unwrap();
        assert!(matches!(true_response(&truth, &id, &r), Err(KlsError::BoundInapplicable { .. })));
    }

    #[test]
    fn deviation_shrinks_with_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_matrix(&mut rng, 4, 4, 0.2);
        let b = rand_matrix(&mut rng, 4, 2, 0.2);
        let config = DeviationConfig {
            samples: 20,
            horizon: 5,
            ..Default::default()
        };
        let report = deviation_bound_check(&a, &b, &config).unwrap();
        assert!(report.monotone);
        assert_eq!(report.rows.last().unwrap().max_deviation, 0.0);
        for r in &report.rows {
            assert!(r.max_deviation <= r.bound * (1.0 + 1e-12));
        }
        assert!(report.to_csv().starts_with("epsilon,"));
        assert!(deviation_bound_check(&a, &b, &DeviationConfig { levels: vec![0.01, 0.1], ..config }).is_err());
    }
}
