//! Delay-embedded Koopman predictor: observables `g = [ω; φ(window)]`
//! advanced by `g⁺ = A g + B u`, trained on the multi-step prediction loss.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_embedding, Record};
use crate::encoder::{Activation, Encoder, Mlp, Normalizer, ResConv};
use crate::error::{KlsError, Result};
use crate::grid::Trajectory;
use crate::matrix_io;
use crate::stats;

pub const MODEL_VERSION: u32 = 1;

/// How measurement windows are cut from a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub tau: f64,
    pub dt_embed: f64,
}

impl EmbeddingSpec {
    pub fn samples(&self) -> usize {
        (self.tau / self.dt_embed).round() as usize + 1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    /// Largest |ω̂_t − ω_t| over the training set, pu.
    pub max_pred_error: f64,
    /// The same maximum per coarse step (index 0 is the measured present).
    pub pred_error_by_step: Vec<f64>,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanModel {
    pub version: u32,
    pub method: String,
    #[serde(with = "matrix_io")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_io")]
    pub b: DMatrix<f64>,
    pub encoder: Encoder,
    pub embedding: EmbeddingSpec,
    pub meta: TrainingMeta,
}

/// One trajectory prepared for training: windows at every coarse point,
/// frequency deviations and inputs `u_t` applied between `t` and `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub windows: DMatrix<f64>,
    pub omega: Vec<f64>,
    pub inputs: DMatrix<f64>,
}

impl Sample {
    /// One-shot constant input over the whole horizon.
    pub fn from_trajectory(traj: &Trajectory, shed: &[f64], emb: &EmbeddingSpec) -> Result<Self> {
        let t = traj.omega.len();
        if t < 2 {
            return Err(KlsError::Argument("trajectory needs at least two points".into()));
        }
        let cols = (0..t)
            .map(|k| build_embedding(traj, emb.tau, emb.dt_embed, k).map(DVector::from_vec))
            .collect::<Result<Vec<_>>>()?;
        let u = DVector::from_column_slice(shed);
        Ok(Sample {
            windows: DMatrix::from_columns(&cols),
            omega: traj.omega.clone(),
            inputs: DMatrix::from_fn(shed.len(), t - 1, |i, _| u[i]),
        })
    }

    pub fn from_record(rec: &Record, emb: &EmbeddingSpec) -> Result<Self> {
        Sample::from_trajectory(&rec.trajectory, &rec.scenario.shed, emb)
    }

    pub fn horizon(&self) -> usize {
        self.omega.len()
    }
}

pub fn samples_from_records(records: &[Record], emb: &EmbeddingSpec) -> Result<Vec<Sample>> {
    records.iter().map(|r| Sample::from_record(r, emb)).collect()
}

/// `ĝ_{t+1} = A ĝ_t + B u_t` from `g1`; returns the `inputs.ncols()`
/// predicted states after `g1`.
pub fn rollout(a: &DMatrix<f64>, b: &DMatrix<f64>, g1: &DVector<f64>, inputs: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(inputs.ncols());
    let mut g = g1.clone();
    for u in inputs.column_iter() {
        g = a * &g + b * u;
        out.push(g.clone());
    }
    out
}

/// Architecture choice for a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    PassThrough,
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
    ResConv {
        kernels: Vec<usize>,
        width: usize,
        head_hidden: Vec<usize>,
        activation: Activation,
    },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Mlp {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64 },
    Momentum { momentum: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative step decay per epoch; 1 keeps the step constant.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub optimizer: Optimizer,
    /// Longest prediction span `t − s` in the loss; `None` uses every pair.
    pub max_span: Option<usize>,
    /// Weight of the frequency coordinate in the loss.
    pub omega_weight: f64,
    pub latent_dim: usize,
    pub encoder: EncoderSpec,
    pub method: String,
    /// Start `A`, `B` from the one-step least-squares fit on the initial
    /// features instead of a perturbed identity.
    pub init_linear: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            lr_decay: 1.0,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            tolerance: 1e-12,
            optimizer: Optimizer::default(),
            max_span: Some(20),
            omega_weight: 1.0,
            latent_dim: 16,
            encoder: EncoderSpec::default(),
            method: "kls".into(),
            init_linear: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(KlsError::Config("learning rate must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(KlsError::Config("loss tolerance must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(KlsError::Config("lr_decay must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(KlsError::Config("batch size must be positive".into()));
        }
        if self.max_span == Some(0) {
            return Err(KlsError::Config("max_span must be positive".into()));
        }
        if !(self.omega_weight > 0.0) {
            return Err(KlsError::Config("omega_weight must be positive".into()));
        }
        if self.latent_dim < 2 && self.encoder != EncoderSpec::PassThrough {
            return Err(KlsError::Config("latent dimension must be at least 2".into()));
        }
        Ok(())
    }
}

/// Loss shape shared by evaluation and training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub max_span: Option<usize>,
    pub omega_weight: f64,
}

impl From<&TrainConfig> for LossSpec {
    fn from(c: &TrainConfig) -> Self {
        LossSpec {
            max_span: c.max_span,
            omega_weight: c.omega_weight,
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            max_span: None,
            omega_weight: 1.0,
        }
    }
}

impl KoopmanModel {
    /// Fresh model for windows with `channels` signals stacked, sized from the
    /// config and standardised on the given samples.
    pub fn init(config: &TrainConfig, samples: &[Sample], emb: EmbeddingSpec, channels: usize) -> Result<Self> {
        config.validate()?;
        let first = samples
            .first()
            .ok_or_else(|| KlsError::Argument("empty training set".into()))?;
        let input_len = first.windows.nrows();
        let q = first.inputs.nrows();
        let window = emb.samples();
        if input_len != window * channels {
            return Err(KlsError::Argument(format!(
                "window length {input_len} is not {window} samples x {channels} channels"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pooled = || {
            let cols: Vec<_> = samples.iter().flat_map(|s| s.windows.column_iter()).collect();
            DMatrix::from_columns(&cols)
        };
        let latent = config.latent_dim.saturating_sub(1);
        let encoder = match &config.encoder {
            EncoderSpec::PassThrough => Encoder::PassThrough { window, channels },
            EncoderSpec::Mlp { hidden, activation } => {
                let mut sizes = vec![input_len];
                sizes.extend_from_slice(hidden);
                sizes.push(latent);
                Encoder::Mlp {
                    normalizer: Normalizer::fit(&pooled(), channels),
                    net: Mlp::new(&sizes, *activation, &mut rng),
                }
            }
            EncoderSpec::ResConv {
                kernels,
                width,
                head_hidden,
                activation,
            } => Encoder::ResConv(Box::new(ResConv::new(
                Normalizer::fit(&pooled(), channels),
                channels,
                window,
                kernels,
                *width,
                head_hidden,
                latent,
                *activation,
                &mut rng,
            )?)),
        };
        let p = 1 + encoder.output_len();
        let a = DMatrix::from_fn(p, p, |i, j| {
            let noise = rng.gen_range(-1e-3..1e-3);
            if i == j {
                0.99 + noise
            } else {
                noise
            }
        });
        let b = DMatrix::from_fn(p, q, |_, _| rng.gen_range(-1e-2..1e-2));
        Ok(KoopmanModel {
            version: MODEL_VERSION,
            method: config.method.clone(),
            a,
            b,
            encoder,
            embedding: emb,
            meta: TrainingMeta::default(),
        })
    }

    pub fn p(&self) -> usize {
        self.a.nrows()
    }

    pub fn q(&self) -> usize {
        self.b.ncols()
    }

    /// `g = [ω; φ(window)]`.
    pub fn encode(&self, window: &[f64], omega: f64) -> Result<DVector<f64>> {
        let x = DMatrix::from_column_slice(window.len(), 1, window);
        let phi = self.encoder.forward(&x)?;
        Ok(stack_observables(&[omega], &phi).column(0).into_owned())
    }

    /// Observables for windows stored as columns.
    pub fn encode_batch(&self, windows: &DMatrix<f64>, omega: &[f64]) -> Result<DMatrix<f64>> {
        if omega.len() != windows.ncols() {
            return Err(KlsError::Argument("one frequency per window required".into()));
        }
        Ok(stack_observables(omega, &self.encoder.forward(windows)?))
    }

    pub fn rollout(&self, g1: &DVector<f64>, inputs: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
        if g1.len() != self.p() || inputs.nrows() != self.q() {
            return Err(KlsError::Argument(format!(
                "rollout expects a {}-vector start and {} inputs per step",
                self.p(),
                self.q()
            )));
        }
        Ok(rollout(&self.a, &self.b, g1, inputs))
    }

    /// Predicted frequency at all `T` coarse points of a sample, starting
    /// from its first measured window.
    pub fn predict_sample(&self, sample: &Sample) -> Result<Vec<f64>> {
        let g1 = self.encode(sample.windows.column(0).as_slice(), sample.omega[0])?;
        let mut out = vec![sample.omega[0]];
        out.extend(self.rollout(&g1, &sample.inputs)?.iter().map(|g| g[0]));
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.a.len() + self.b.len()
    }

    /// Flat parameters: encoder, then `A` and `B` row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.encoder.params();
        out.reserve(self.a.len() + self.b.len());
        for m in [&self.a, &self.b] {
            for i in 0..m.nrows() {
                out.extend(m.row(i).iter());
            }
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(KlsError::Argument(format!(
                "{} parameters supplied, {} expected",
                flat.len(),
                self.num_params()
            )));
        }
        let ne = self.encoder.num_params();
        self.encoder.set_params(&flat[..ne])?;
        let mut rest = &flat[ne..];
        for m in [&mut self.a, &mut self.b] {
            let c = m.ncols();
            for i in 0..m.nrows() {
                for j in 0..c {
                    m[(i, j)] = rest[i * c + j];
                }
            }
            rest = &rest[m.len()..];
        }
        Ok(())
    }

    pub fn param_label(&self, index: usize) -> String {
        let ne = self.encoder.num_params();
        if index < ne {
            return self.encoder.param_label(index);
        }
        let k = index - ne;
        let p = self.p();
        if k < self.a.len() {
            format!("A[{}][{}]", k / p, k % p)
        } else {
            let k = k - self.a.len();
            format!("B[{}][{}]", k / self.q(), k % self.q())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("model serialises");
        fs::write(path, text).map_err(|e| KlsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KlsError::io(path, e))?;
        let model: KoopmanModel = serde_json::from_str(&text).map_err(|e| KlsError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if model.version != MODEL_VERSION {
            return Err(KlsError::Format {
                path: path.to_path_buf(),
                message: format!("unsupported model version {}", model.version),
            });
        }
        Ok(model)
    }
}

fn stack_observables(omega: &[f64], phi: &DMatrix<f64>) -> DMatrix<f64> {
    let p = 1 + phi.nrows();
    DMatrix::from_fn(p, omega.len(), |i, j| if i == 0 { omega[j] } else { phi[(i - 1, j)] })
}

/// Multi-step loss of one observable sequence `g` (p × T) plus, if
/// requested, its gradients with respect to `A`, `B` and `g`.
struct SequenceLoss {
    loss: f64,
    d_a: DMatrix<f64>,
    d_b: DMatrix<f64>,
    d_g: DMatrix<f64>,
}

fn sequence_loss(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    spec: &LossSpec,
    with_grad: bool,
) -> SequenceLoss {
    let (p, t) = g.shape();
    let span = spec.max_span.unwrap_or(t).min(t - 1);
    let weight = |i: usize| if i == 0 { spec.omega_weight } else { 1.0 };
    // preds[j][:, s] = ĝ_{s→s+j}
    let mut preds: Vec<DMatrix<f64>> = Vec::with_capacity(span + 1);
    preds.push(g.clone());
    let mut resid: Vec<DMatrix<f64>> = Vec::with_capacity(span);
    let mut loss = 0.0;
    for j in 1..=span {
        let n = t - j;
        let prev = preds[j - 1].columns(0, n);
        let next = a * prev + b * inputs.columns(j - 1, n);
        let r = &next - g.columns(j, n);
        for (idx, v) in r.iter().enumerate() {
            loss += weight(idx % p) * v * v;
        }
        preds.push(next);
        resid.push(r);
    }
    let mut out = SequenceLoss {
        loss,
        d_a: DMatrix::zeros(0, 0),
        d_b: DMatrix::zeros(0, 0),
        d_g: DMatrix::zeros(0, 0),
    };
    if !with_grad {
        return out;
    }
    let mut d_a = DMatrix::zeros(p, p);
    let mut d_b = DMatrix::zeros(p, b.ncols());
    let mut d_g = DMatrix::zeros(p, t);
    let mut lambda_next: Option<DMatrix<f64>> = None;
    for j in (1..=span).rev() {
        let n = t - j;
        let r = &resid[j - 1];
        let mut wr = r.clone();
        for (idx, v) in wr.iter_mut().enumerate() {
            *v *= 2.0 * weight(idx % p);
        }
        let mut lambda = wr.clone();
        if let Some(ln) = &lambda_next {
            let carried = a.transpose() * ln;
            let mut head = lambda.columns_mut(0, n - 1);
            head += carried;
        }
        d_a += &lambda * preds[j - 1].columns(0, n).transpose();
        d_b += &lambda * inputs.columns(j - 1, n).transpose();
        let mut tail = d_g.columns_mut(j, n);
        tail -= &wr;
        if j == 1 {
            let mut head = d_g.columns_mut(0, n);
            head += a.transpose() * &lambda;
        }
        lambda_next = Some(lambda);
    }
    out.d_a = d_a;
    out.d_b = d_b;
    out.d_g = d_g;
    out
}

/// Loss summed over samples.
pub fn loss(model: &KoopmanModel, batch: &[Sample], spec: &LossSpec) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let g = model.encode_batch(&s.windows, &s.omega)?;
        total += sequence_loss(&model.a, &model.b, &g, &s.inputs, spec, false).loss;
    }
    Ok(total)
}

/// Loss and flat gradient (same layout as [`KoopmanModel::params`]).
pub fn loss_and_gradient(model: &KoopmanModel, batch: &[Sample], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(KlsError::Argument("empty batch".into()));
    }
    let cols: Vec<_> = batch.iter().flat_map(|s| s.windows.column_iter()).collect();
    let windows = DMatrix::from_columns(&cols);
    let (phi, cache) = model.encoder.forward_cached(&windows)?;
    let p = model.p();
    let mut d_phi = DMatrix::zeros(phi.nrows(), phi.ncols());
    let mut d_a = DMatrix::zeros(p, p);
    let mut d_b = DMatrix::zeros(p, model.q());
    let mut total = 0.0;
    let mut offset = 0;
    for s in batch {
        let t = s.horizon();
        let g = stack_observables(&s.omega, &phi.columns(offset, t).into_owned());
        let sl = sequence_loss(&model.a, &model.b, &g, &s.inputs, spec, true);
        total += sl.loss;
        d_a += sl.d_a;
        d_b += sl.d_b;
        let mut dst = d_phi.columns_mut(offset, t);
        dst += sl.d_g.rows(1, p - 1);
        offset += t;
    }
    let mut grad = model.encoder.backward(&cache, &d_phi);
    for m in [&d_a, &d_b] {
        for i in 0..m.nrows() {
            grad.extend(m.row(i).iter());
        }
    }
    if let Some(bad) = grad.iter().position(|v| !v.is_finite()) {
        return Err(KlsError::NonFiniteGradient(model.param_label(bad)));
    }
    Ok((total, grad))
}

enum OptState {
    Adam { m: Vec<f64>, v: Vec<f64>, step: i32, beta1: f64, beta2: f64 },
    Momentum { vel: Vec<f64>, momentum: f64 },
}

impl OptState {
    fn new(opt: Optimizer, n: usize) -> Self {
        match opt {
            Optimizer::Adam { beta1, beta2 } => OptState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
                beta1,
                beta2,
            },
            Optimizer::Momentum { momentum } => OptState::Momentum {
                vel: vec![0.0; n],
                momentum,
            },
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            OptState::Adam { m, v, step, beta1, beta2 } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                }
            }
            OptState::Momentum { vel, momentum } => {
                for i in 0..params.len() {
                    vel[i] = *momentum * vel[i] - lr * grad[i];
                    params[i] += vel[i];
                }
            }
        }
    }
}

/// Train a freshly initialised model.
pub fn train(samples: &[Sample], config: &TrainConfig, emb: EmbeddingSpec, channels: usize) -> Result<KoopmanModel> {
    let mut model = KoopmanModel::init(config, samples, emb, channels)?;
    if config.init_linear {
        fit_linear_part(&mut model, samples)?;
    }
    train_from(model, samples, config)
}

/// Replace `A`, `B` by the one-step least-squares fit on the current features.
pub fn fit_linear_part(model: &mut KoopmanModel, samples: &[Sample]) -> Result<()> {
    let mut now = Vec::new();
    let mut next = Vec::new();
    let mut inputs = Vec::new();
    for s in samples {
        let g = model.encode_batch(&s.windows, &s.omega)?;
        for t in 0..s.horizon() - 1 {
            now.push(g.column(t).into_owned());
            next.push(g.column(t + 1).into_owned());
            inputs.push(s.inputs.column(t).into_owned());
        }
    }
    let (a, b) = crate::baselines::fit_dmdc(
        &DMatrix::from_columns(&now),
        &DMatrix::from_columns(&inputs),
        &DMatrix::from_columns(&next),
        Some(1e-10),
    )?;
    model.a = a;
    model.b = b;
    Ok(())
}

/// Continue optimising `model` on `samples`.
pub fn train_from(mut model: KoopmanModel, samples: &[Sample], config: &TrainConfig) -> Result<KoopmanModel> {
    config.validate()?;
    if samples.is_empty() {
        return Err(KlsError::Argument("empty training set".into()));
    }
    let spec = LossSpec::from(config);
    let initial = loss(&model, samples, &spec)?;
    let mut history = Vec::new();
    let mut params = model.params();
    let mut opt = OptState::new(config.optimizer, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut lr = config.learning_rate;
    let mut epochs = 0;
    let mut current = initial;
    for epoch in 0..config.epochs {
        if current < config.tolerance {
            break;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (l, g) = loss_and_gradient(&model, &batch, &spec)?;
            epoch_loss += l;
            opt.apply(&mut params, &g, lr);
            model.set_params(&params)?;
        }
        epochs = epoch + 1;
        current = loss(&model, samples, &spec)?;
        history.push(current);
        if !current.is_finite() || current > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Err(KlsError::TrainingDiverged {
                loss: current,
                initial,
            });
        }
        if epoch % 10 == 0 || epoch + 1 == config.epochs {
            log::info!(
                "epoch {epoch}: loss {current:.6e} (minibatch sum {epoch_loss:.6e}, step {lr:.2e})"
            );
        }
        lr *= config.lr_decay;
    }
    model.meta = TrainingMeta {
        initial_loss: initial,
        final_loss: current,
        epochs,
        loss_history: history,
        ..TrainingMeta::default()
    };
    record_prediction_error(&mut model, samples)?;
    Ok(model)
}

/// Store the largest training-set frequency prediction error in the metadata.
pub fn record_prediction_error(model: &mut KoopmanModel, samples: &[Sample]) -> Result<()> {
    let mut by_step: Vec<f64> = Vec::new();
    for s in samples {
        let pred = model.predict_sample(s)?;
        if by_step.len() < pred.len() {
            by_step.resize(pred.len(), 0.0);
        }
        for (k, (p, w)) in pred.iter().zip(&s.omega).enumerate() {
            by_step[k] = by_step[k].max((p - w).abs());
        }
    }
    model.meta.max_pred_error = by_step.iter().copied().fold(0.0, f64::max);
    model.meta.pred_error_by_step = by_step;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCorrelation {
    /// Latent index `j` refers to observable `g[j + 1]`.
    pub dim: usize,
    pub inertia: f64,
    pub imbalance: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<LatentCorrelation>,
    pub best_inertia: usize,
    pub best_imbalance: usize,
}

impl CorrelationTable {
    pub fn max_abs_inertia(&self) -> f64 {
        self.rows[self.best_inertia].inertia.abs()
    }

    pub fn max_abs_imbalance(&self) -> f64 {
        self.rows[self.best_imbalance].imbalance.abs()
    }
}

/// Pearson correlation of each latent with the labels on the first
/// post-fault window of every sample.
pub fn latent_correlation(
    model: &KoopmanModel,
    samples: &[Sample],
    inertia: &[f64],
    imbalance: &[f64],
) -> Result<CorrelationTable> {
    if samples.len() < 3 {
        return Err(KlsError::Argument("need at least three scenarios".into()));
    }
    if inertia.len() != samples.len() || imbalance.len() != samples.len() {
        return Err(KlsError::Argument("one label per scenario required".into()));
    }
    let cols: Vec<_> = samples.iter().map(|s| s.windows.column(0)).collect();
    let latent = model.encoder.forward(&DMatrix::from_columns(&cols))?;
    Ok(correlation_table(&latent, inertia, imbalance))
}

/// Correlation table for latents stored as rows.
pub fn correlation_table(latent: &DMatrix<f64>, inertia: &[f64], imbalance: &[f64]) -> CorrelationTable {
    let rows: Vec<LatentCorrelation> = (0..latent.nrows())
        .map(|j| {
            let z: Vec<f64> = latent.row(j).iter().copied().collect();
            let ri = stats::pearson(&z, inertia);
            let rp = stats::pearson(&z, imbalance);
            LatentCorrelation {
                dim: j,
                inertia: ri.unwrap_or(0.0),
                imbalance: rp.unwrap_or(0.0),
                degenerate: ri.is_none() || rp.is_none(),
            }
        })
        .collect();
    let argmax = |f: fn(&LatentCorrelation) -> f64| {
        rows.iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, r)| if f(r).abs() > best.1 { (i, f(r).abs()) } else { best })
            .0
    };
    CorrelationTable {
        best_inertia: argmax(|r| r.inertia),
        best_imbalance: argmax(|r| r.imbalance),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(a: f64, b: f64) -> KoopmanModel {
        KoopmanModel {
            version: MODEL_VERSION,
            method: "kls".into(),
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            encoder: Encoder::PassThrough { window: 1, channels: 1 },
            embedding: EmbeddingSpec { tau: 0.0, dt_embed: 0.01 },
            meta: TrainingMeta::default(),
        }
    }

    fn scalar_sample(omega: &[f64], u: f64) -> Sample {
        Sample {
            windows: DMatrix::from_row_slice(1, omega.len(), omega),
            omega: omega.to_vec(),
            inputs: DMatrix::from_element(1, omega.len() - 1, u),
        }
    }

    #[test]
    fn geometric_rollout() {
        let m = scalar_model(0.5, 1.0);
        let g = m.rollout(&DVector::from_element(1, 1.0), &DMatrix::zeros(1, 3)).unwrap();
        let v: Vec<f64> = g.iter().map(|x| x[0]).collect();
        assert_eq!(v, vec![0.5, 0.25, 0.125]);
    }

    #[test]
    fn identity_rollout_is_constant() {
        let a = DMatrix::identity(3, 3);
        let b = DMatrix::zeros(3, 2);
        let g1 = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        for g in rollout(&a, &b, &g1, &DMatrix::from_element(2, 4, 0.7)) {
            assert_eq!(g, g1);
        }
    }

    #[test]
    fn hand_computed_loss_p1_t3() {
        // a = 0.5, b = 1, g = [1, 2, 0], u = [0.5, -1]
        // ĝ1→2 = 1.0 (r = −1), ĝ2→3 = 0 (r = 0), ĝ1→3 = −0.5 (r = −0.5)
        let m = scalar_model(0.5, 1.0);
        let s = Sample {
            windows: DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 0.0]),
            omega: vec![1.0, 2.0, 0.0],
            inputs: DMatrix::from_row_slice(1, 2, &[0.5, -1.0]),
        };
        let l = loss(&m, &[s.clone()], &LossSpec::default()).unwrap();
        assert!((l - 1.25).abs() < 1e-15);
        let short = LossSpec { max_span: Some(1), ..LossSpec::default() };
        assert!((loss(&m, &[s], &short).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_two_step_gradient_by_hand() {
        // L = (a g1 + b u − g2)² + (a g2 + b u − g3)² + (a² g1 + a b u + b u − g3)²
        let (a, b) = (0.8, 0.3);
        let (g1, g2, g3, u) = (1.0, 0.5, 0.2, 0.4);
        let r1 = a * g1 + b * u - g2;
        let r2 = a * g2 + b * u - g3;
        let r3 = a * a * g1 + a * b * u + b * u - g3;
        let d_a = 2.0 * r1 * g1 + 2.0 * r2 * g2 + 2.0 * r3 * (2.0 * a * g1 + b * u);
        let m = scalar_model(a, b);
        let s = Sample {
            windows: DMatrix::from_row_slice(1, 3, &[g1, g2, g3]),
            omega: vec![g1, g2, g3],
            inputs: DMatrix::from_element(1, 2, u),
        };
        let (_, grad) = loss_and_gradient(&m, &[s], &LossSpec::default()).unwrap();
        assert!((grad[0] - d_a).abs() < 1e-14, "{} vs {d_a}", grad[0]);
    }

    #[test]
    fn zero_data_has_zero_input_gradient() {
        let mut m = scalar_model(0.9, 0.0);
        m.b = DMatrix::zeros(1, 1);
        let s = scalar_sample(&[0.0; 5], 0.3);
        let (l, g) = loss_and_gradient(&m, &[s], &LossSpec::default()).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn loss_is_additive_over_samples() {
        let m = scalar_model(0.7, 0.2);
        let s1 = scalar_sample(&[1.0, 0.3, -0.2, 0.1], 0.5);
        let s2 = scalar_sample(&[0.4, 0.9, 0.0, 0.2], 0.1);
        let spec = LossSpec::default();
        let both = loss(&m, &[s1.clone(), s2.clone()], &spec).unwrap();
        let sep = loss(&m, &[s1], &spec).unwrap() + loss(&m, &[s2], &spec).unwrap();
        assert!((both - sep).abs() < 1e-14);
    }

    #[test]
    fn encode_anchors_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = scalar_model(1.0, 0.0);
        m.encoder = Encoder::Mlp {
            normalizer: Normalizer::identity(4),
            net: Mlp::new(&[4, 3, 2], Activation::Tanh, &mut rng),
        };
        m.a = DMatrix::identity(3, 3);
        m.b = DMatrix::zeros(3, 1);
        let g = m.encode(&[0.1, 0.2, 0.3, 0.4], -0.0123).unwrap();
        assert_eq!(g[0], -0.0123);
        assert_eq!(g.len(), 3);
        assert!(m.encode(&[0.1, 0.2], 0.0).is_err());
    }

    #[test]
    fn correlation_of_label_copies() {
        let labels: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let other: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64).collect();
        let latent = DMatrix::from_fn(3, 20, |j, i| match j {
            0 => labels[i],
            1 => -labels[i],
            _ => 1.0,
        });
        let t = correlation_table(&latent, &labels, &other);
        assert!((t.rows[0].inertia - 1.0).abs() < 1e-12);
        assert!((t.rows[1].inertia + 1.0).abs() < 1e-12);
        assert!(t.rows[2].degenerate);
        assert_eq!(t.rows[2].inertia, 0.0);
        assert!(t.max_abs_inertia() > 0.999);
    }
}
