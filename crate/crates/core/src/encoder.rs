//! Learned lifting of delay windows into Koopman observables.
//!
//! Every encoder maps a batch of flattened windows (one per column) to a batch
//! of latent vectors and can back-propagate a gradient on its outputs to its
//! parameters. Parameters are exchanged as one flat vector in a fixed order.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KlsError, Result};
use crate::matrix_io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative given pre-activation `z` and output `a`.
    fn slope(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => 1.0,
        }
    }

    fn map(self, z: &DMatrix<f64>) -> DMatrix<f64> {
        z.map(|v| self.apply(v))
    }

    /// `grad ⊙ σ'(z)` in place.
    fn gate(self, grad: &mut DMatrix<f64>, z: &DMatrix<f64>, a: &DMatrix<f64>) {
        for ((g, &zi), &ai) in grad.iter_mut().zip(z.iter()).zip(a.iter()) {
            *g *= self.slope(zi, ai);
        }
    }
}

/// Per-channel affine standardisation of the input window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(len: usize) -> Self {
        Normalizer {
            shift: vec![0.0; len],
            scale: vec![1.0; len],
        }
    }

    /// Statistics pooled over each of `channels` equal contiguous blocks of
    /// rows, across all columns.
    pub fn fit(data: &DMatrix<f64>, channels: usize) -> Self {
        let len = data.nrows();
        let mut out = Normalizer::identity(len);
        if channels == 0 || len % channels != 0 || data.ncols() == 0 {
            return out;
        }
        let block = len / channels;
        for c in 0..channels {
            let rows = data.rows(c * block, block);
            let n = rows.len() as f64;
            let mean = rows.iter().sum::<f64>() / n;
            let var = rows.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            let std = if std > 1e-12 { std } else { 1.0 };
            for r in c * block..(c + 1) * block {
                out.shift[r] = mean;
                out.scale[r] = std;
            }
        }
        out
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x.clone();
        for mut col in y.column_iter_mut() {
            for ((v, s), k) in col.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) / k;
            }
        }
        y
    }
}

/// Fully connected layer `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    #[serde(with = "matrix_io")]
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            weight: DMatrix::from_fn(outputs, inputs, |_, _| rng.gen_range(-limit..=limit)),
            bias: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weight * x;
        add_bias(&mut z, &self.bias);
        z
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn write(&self, out: &mut Vec<f64>) {
        push_row_major(out, &self.weight);
        out.extend_from_slice(&self.bias);
    }

    fn read(&mut self, src: &mut &[f64]) {
        read_row_major(src, &mut self.weight);
        take_into(src, &mut self.bias);
    }
}

fn add_bias(z: &mut DMatrix<f64>, bias: &[f64]) {
    for mut col in z.column_iter_mut() {
        for (v, b) in col.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn read_row_major(src: &mut &[f64], m: &mut DMatrix<f64>) {
    let (r, c) = m.shape();
    for i in 0..r {
        for j in 0..c {
            m[(i, j)] = src[i * c + j];
        }
    }
    *src = &src[r * c..];
}

fn take_into(src: &mut &[f64], dst: &mut [f64]) {
    let n = dst.len();
    dst.copy_from_slice(&src[..n]);
    *src = &src[n..];
}

fn row_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m.row(i).sum()).collect()
}

/// Multi-layer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to every layer.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// `sizes = [input, hidden…, output]`.
    pub fn new<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.affine(&h);
            if k < last {
                h = self.activation.map(&h);
            }
        }
        h
    }

    fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&h);
            cache.inputs.push(h);
            if k < last {
                h = self.activation.map(&z);
                cache.pre.push(z);
            } else {
                h = z;
            }
        }
        (h, cache)
    }

    /// Parameter gradient (flat, in `write` order) and the gradient on the input.
    fn backward(&self, cache: &MlpCache, d_out: &DMatrix<f64>, want_input: bool) -> (Vec<f64>, Option<DMatrix<f64>>) {
        let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        let mut delta = d_out.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let dw = &delta * cache.inputs[k].transpose();
            let mut g = Vec::with_capacity(layer.num_params());
            push_row_major(&mut g, &dw);
            g.extend(row_sums(&delta));
            per_layer[k] = g;
            if k > 0 || want_input {
                let mut back = layer.weight.transpose() * &delta;
                if k > 0 {
                    self.activation
                        .gate(&mut back, &cache.pre[k - 1], &cache.inputs[k]);
                }
                delta = back;
            }
        }
        let grad = per_layer.concat();
        (grad, want_input.then_some(delta))
    }

    fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    fn write(&self, out: &mut Vec<f64>) {
        self.layers.iter().for_each(|l| l.write(out));
    }

    fn read(&mut self, src: &mut &[f64]) {
        self.layers.iter_mut().for_each(|l| l.read(src));
    }

    fn label(&self, mut index: usize, prefix: &str) -> String {
        for (k, l) in self.layers.iter().enumerate() {
            if index < l.weight.len() {
                let c = l.weight.ncols();
                return format!("{prefix}layers[{k}].weight[{}][{}]", index / c, index % c);
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return format!("{prefix}layers[{k}].bias[{index}]");
            }
            index -= l.bias.len();
        }
        format!("{prefix}<out of range>")
    }
}

/// Valid (unpadded) 1-D convolution over a batch laid out as
/// `channels × (samples · length)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out × (in · kernel)`, column index `c · kernel + j`.
    #[serde(with = "matrix_io")]
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    fn glorot<R: Rng>(inp: usize, out: usize, kernel: usize, rng: &mut R) -> Self {
        let d = Dense::glorot(inp * kernel, out, rng);
        Conv1d {
            in_channels: inp,
            out_channels: out,
            kernel,
            weight: d.weight,
            bias: d.bias,
        }
    }

    fn im2col(&self, x: &DMatrix<f64>, len: usize) -> DMatrix<f64> {
        let samples = x.ncols() / len;
        let out_len = len + 1 - self.kernel;
        DMatrix::from_fn(self.in_channels * self.kernel, samples * out_len, |r, col| {
            let (c, j) = (r / self.kernel, r % self.kernel);
            let (n, pos) = (col / out_len, col % out_len);
            x[(c, n * len + pos + j)]
        })
    }

    fn forward(&self, x: &DMatrix<f64>, len: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let cols = self.im2col(x, len);
        let mut z = &self.weight * &cols;
        add_bias(&mut z, &self.bias);
        (z, cols)
    }

    /// Parameter gradient and gradient on the input batch.
    fn backward(&self, cols: &DMatrix<f64>, dz: &DMatrix<f64>, len: usize) -> (Vec<f64>, DMatrix<f64>) {
        let mut g = Vec::with_capacity(self.weight.len() + self.bias.len());
        push_row_major(&mut g, &(dz * cols.transpose()));
        g.extend(row_sums(dz));
        let dcols = self.weight.transpose() * dz;
        let out_len = len + 1 - self.kernel;
        let samples = dz.ncols() / out_len;
        let mut dx = DMatrix::zeros(self.in_channels, samples * len);
        for col in 0..dcols.ncols() {
            let (n, pos) = (col / out_len, col % out_len);
            for r in 0..dcols.nrows() {
                let (c, j) = (r / self.kernel, r % self.kernel);
                dx[(c, n * len + pos + j)] += dcols[(r, col)];
            }
        }
        (g, dx)
    }
}

/// Convolutional encoder with a 1×1 residual branch, temporal averaging and
/// a fully connected head that also sees the latest raw sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResConv {
    pub normalizer: Normalizer,
    pub channels: usize,
    pub length: usize,
    pub convs: Vec<Conv1d>,
    pub residual: Conv1d,
    /// Per-channel gain on the residual branch (inference-form batch norm).
    pub residual_gain: Vec<f64>,
    pub activation: Activation,
    pub head: Mlp,
}

#[derive(Debug, Clone)]
pub struct ResConvCache {
    cols: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
    res_cols: DMatrix<f64>,
    res_lin: DMatrix<f64>,
    sum: DMatrix<f64>,
    head: MlpCache,
}

impl ResConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        normalizer: Normalizer,
        channels: usize,
        length: usize,
        kernels: &[usize],
        width: usize,
        head_hidden: &[usize],
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let shrink: usize = kernels.iter().map(|k| k - 1).sum();
        if kernels.is_empty() || kernels.contains(&0) || shrink >= length {
            return Err(KlsError::Config(format!(
                "kernels {kernels:?} do not fit a window of {length} samples"
            )));
        }
        let mut convs = Vec::new();
        let mut inp = channels;
        for &k in kernels {
            convs.push(Conv1d::glorot(inp, width, k, rng));
            inp = width;
        }
        let mut sizes = vec![width + channels];
        sizes.extend_from_slice(head_hidden);
        sizes.push(output);
        Ok(ResConv {
            normalizer,
            channels,
            length,
            convs,
            residual: Conv1d::glorot(channels, width, 1, rng),
            residual_gain: vec![1.0; width],
            activation,
            head: Mlp::new(&sizes, activation, rng),
        })
    }

    fn out_length(&self) -> usize {
        self.length - self.convs.iter().map(|c| c.kernel - 1).sum::<usize>()
    }

    /// `(channels · length) × N` → `channels × (N · length)`.
    fn unfold(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let len = self.length;
        DMatrix::from_fn(self.channels, x.ncols() * len, |c, col| {
            x[(c * len + col % len, col / len)]
        })
    }

    fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, ResConvCache) {
        let x = self.normalizer.apply(x);
        let n = x.ncols();
        let x0 = self.unfold(&x);
        let mut h = x0.clone();
        let mut len = self.length;
        let (mut cols, mut pre, mut post) = (Vec::new(), Vec::new(), Vec::new());
        let last = self.convs.len() - 1;
        for (k, conv) in self.convs.iter().enumerate() {
            let (z, c) = conv.forward(&h, len);
            len = len + 1 - conv.kernel;
            cols.push(c);
            if k < last {
                h = self.activation.map(&z);
                post.push(h.clone());
            } else {
                h = z.clone();
            }
            pre.push(z);
        }
        let (res_lin, res_cols) = self.residual.forward(&x0, self.length);
        let offset = (self.length - len) / 2;
        let width = self.residual_gain.len();
        let sum = DMatrix::from_fn(width, n * len, |c, col| {
            let (s, j) = (col / len, col % len);
            h[(c, col)] + self.residual_gain[c] * res_lin[(c, s * self.length + offset + j)]
        });
        let act = self.activation.map(&sum);
        let mut merged = DMatrix::zeros(width + self.channels, n);
        for s in 0..n {
            for c in 0..width {
                merged[(c, s)] = act.row(c).columns(s * len, len).sum() / len as f64;
            }
            for c in 0..self.channels {
                merged[(width + c, s)] = x[(c * self.length + self.length - 1, s)];
            }
        }
        post.push(act);
        let (out, head) = self.head.forward_cached(&merged);
        (
            out,
            ResConvCache {
                cols,
                pre,
                post,
                res_cols,
                res_lin,
                sum,
                head,
            },
        )
    }

    fn backward(&self, cache: &ResConvCache, d_out: &DMatrix<f64>) -> Vec<f64> {
        let n = d_out.ncols();
        let (head_grad, d_merged) = self.head.backward(&cache.head, d_out, true);
        let d_merged = d_merged.expect("input gradient requested");
        let len = self.out_length();
        let width = self.residual_gain.len();
        let act = cache.post.last().expect("activation cached");
        let mut d_sum = DMatrix::from_fn(width, n * len, |c, col| d_merged[(c, col / len)] / len as f64);
        self.activation.gate(&mut d_sum, &cache.sum, act);

        let offset = (self.length - len) / 2;
        let mut d_res = DMatrix::zeros(width, n * self.length);
        let mut d_gain = vec![0.0; width];
        for col in 0..n * len {
            let (s, j) = (col / len, col % len);
            let rc = s * self.length + offset + j;
            for c in 0..width {
                d_gain[c] += d_sum[(c, col)] * cache.res_lin[(c, rc)];
                d_res[(c, rc)] = d_sum[(c, col)] * self.residual_gain[c];
            }
        }
        let (res_grad, _) = self.residual.backward(&cache.res_cols, &d_res, self.length);

        let mut lens = vec![self.length];
        for conv in &self.convs {
            lens.push(lens.last().unwrap() + 1 - conv.kernel);
        }
        let mut conv_grads = vec![Vec::new(); self.convs.len()];
        let mut delta = d_sum;
        for k in (0..self.convs.len()).rev() {
            let (g, dx) = self.convs[k].backward(&cache.cols[k], &delta, lens[k]);
            conv_grads[k] = g;
            if k > 0 {
                delta = dx;
                self.activation
                    .gate(&mut delta, &cache.pre[k - 1], &cache.post[k - 1]);
            }
        }
        let mut grad = conv_grads.concat();
        grad.extend(res_grad);
        grad.extend(d_gain);
        grad.extend(head_grad);
        grad
    }

    fn num_params(&self) -> usize {
        self.convs
            .iter()
            .chain(std::iter::once(&self.residual))
            .map(|c| c.weight.len() + c.bias.len())
            .sum::<usize>()
            + self.residual_gain.len()
            + self.head.num_params()
    }

    fn write(&self, out: &mut Vec<f64>) {
        for c in self.convs.iter().chain(std::iter::once(&self.residual)) {
            push_row_major(out, &c.weight);
            out.extend_from_slice(&c.bias);
        }
        out.extend_from_slice(&self.residual_gain);
        self.head.write(out);
    }

    fn read(&mut self, src: &mut &[f64]) {
        for c in self.convs.iter_mut().chain(std::iter::once(&mut self.residual)) {
            read_row_major(src, &mut c.weight);
            take_into(src, &mut c.bias);
        }
        take_into(src, &mut self.residual_gain);
        self.head.read(src);
    }

    fn label(&self, mut index: usize) -> String {
        for (k, c) in self.convs.iter().enumerate() {
            let size = c.weight.len() + c.bias.len();
            if index < size {
                return format!("encoder.convs[{k}][{index}]");
            }
            index -= size;
        }
        let size = self.residual.weight.len() + self.residual.bias.len();
        if index < size {
            return format!("encoder.residual[{index}]");
        }
        index -= size;
        if index < self.residual_gain.len() {
            return format!("encoder.residual_gain[{index}]");
        }
        index -= self.residual_gain.len();
        self.head.label(index, "encoder.head.")
    }
}

/// Encoder architectures behind one interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoder {
    /// No parameters: returns the latest sample of every non-frequency channel.
    PassThrough { window: usize, channels: usize },
    Mlp { normalizer: Normalizer, net: Mlp },
    ResConv(Box<ResConv>),
}

#[derive(Debug, Clone)]
pub enum EncoderCache {
    None,
    Mlp(MlpCache),
    ResConv(Box<ResConvCache>),
}

impl Encoder {
    pub fn input_len(&self) -> usize {
        match self {
            Encoder::PassThrough { window, channels } => window * channels,
            Encoder::Mlp { net, .. } => net.input_len(),
            Encoder::ResConv(r) => r.channels * r.length,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Encoder::PassThrough { channels, .. } => channels - 1,
            Encoder::Mlp { net, .. } => net.output_len(),
            Encoder::ResConv(r) => r.head.output_len(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Encoder::PassThrough { .. } => 0,
            Encoder::Mlp { net, .. } => net.num_params(),
            Encoder::ResConv(r) => r.num_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        match self {
            Encoder::PassThrough { .. } => {}
            Encoder::Mlp { net, .. } => net.write(&mut out),
            Encoder::ResConv(r) => r.write(&mut out),
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(KlsError::Argument(format!(
                "{} encoder parameters supplied, {} expected",
                flat.len(),
                self.num_params()
            )));
        }
        let mut src = flat;
        match self {
            Encoder::PassThrough { .. } => {}
            Encoder::Mlp { net, .. } => net.read(&mut src),
            Encoder::ResConv(r) => r.read(&mut src),
        }
        Ok(())
    }

    pub fn param_label(&self, index: usize) -> String {
        match self {
            Encoder::PassThrough { .. } => "encoder.<none>".into(),
            Encoder::Mlp { net, .. } => net.label(index, "encoder."),
            Encoder::ResConv(r) => r.label(index),
        }
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.input_len() {
            return Err(KlsError::Argument(format!(
                "window length {} does not match encoder input {}",
                x.nrows(),
                self.input_len()
            )));
        }
        Ok(())
    }

    /// Encode windows stored as columns.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(match self {
            Encoder::PassThrough { window, channels } => pass_through(x, *window, *channels),
            Encoder::Mlp { normalizer, net } => net.forward(&normalizer.apply(x)),
            Encoder::ResConv(r) => r.forward_cached(x).0,
        })
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, EncoderCache)> {
        self.check_input(x)?;
        Ok(match self {
            Encoder::PassThrough { window, channels } => {
                (pass_through(x, *window, *channels), EncoderCache::None)
            }
            Encoder::Mlp { normalizer, net } => {
                let (out, cache) = net.forward_cached(&normalizer.apply(x));
                (out, EncoderCache::Mlp(cache))
            }
            Encoder::ResConv(r) => {
                let (out, cache) = r.forward_cached(x);
                (out, EncoderCache::ResConv(Box::new(cache)))
            }
        })
    }

    /// Flat parameter gradient given the gradient on the outputs.
    pub fn backward(&self, cache: &EncoderCache, d_out: &DMatrix<f64>) -> Vec<f64> {
        match (self, cache) {
            (Encoder::Mlp { net, .. }, EncoderCache::Mlp(c)) => net.backward(c, d_out, false).0,
            (Encoder::ResConv(r), EncoderCache::ResConv(c)) => r.backward(c, d_out),
            _ => Vec::new(),
        }
    }
}

fn pass_through(x: &DMatrix<f64>, window: usize, channels: usize) -> DMatrix<f64> {
    DMatrix::from_fn(channels - 1, x.ncols(), |c, s| x[((c + 2) * window - 1, s)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sum_sq(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>() / 2.0
    }

    fn fd_check(enc: &mut Encoder, x: &DMatrix<f64>, seed: u64) {
        let (out, cache) = enc.forward_cached(x).unwrap();
        let grad = enc.backward(&cache, &out);
        let base = enc.params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let i = rng.gen_range(0..base.len());
            let h = 1e-5;
            let mut p = base.clone();
            p[i] += h;
            enc.set_params(&p).unwrap();
            let up = sum_sq(&enc.forward(x).unwrap());
            p[i] -= 2.0 * h;
            enc.set_params(&p).unwrap();
            let down = sum_sq(&enc.forward(x).unwrap());
            enc.set_params(&base).unwrap();
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-5, "{}: fd {fd} analytic {}", enc.param_label(i), grad[i]);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(12, 7, |_, _| rng.gen_range(-1.0..1.0));
        for act in [Activation::Tanh, Activation::Softplus] {
            let net = Mlp::new(&[12, 8, 6, 3], act, &mut rng);
            let mut enc = Encoder::Mlp {
                normalizer: Normalizer::fit(&x, 3),
                net,
            };
            fd_check(&mut enc, &x, 2);
        }
    }

    #[test]
    fn resconv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (channels, length) = (3, 13);
        let x = DMatrix::from_fn(channels * length, 4, |_, _| rng.gen_range(-1.0..1.0));
        let r = ResConv::new(
            Normalizer::fit(&x, channels),
            channels,
            length,
            &[5, 3, 3],
            4,
            &[6, 6],
            3,
            Activation::Tanh,
            &mut rng,
        )
        .unwrap();
        let mut enc = Encoder::ResConv(Box::new(r));
        fd_check(&mut enc, &x, 4);
    }

    #[test]
    fn linear_layer_is_matrix_vector_product() {
        let net = Mlp {
            layers: vec![Dense {
                weight: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.5]),
                bias: vec![0.1, -0.2],
            }],
            activation: Activation::Tanh,
        };
        let enc = Encoder::Mlp {
            normalizer: Normalizer::identity(3),
            net,
        };
        let x = DMatrix::from_column_slice(3, 1, &[3.0, 4.0, 5.0]);
        let y = enc.forward(&x).unwrap();
        assert_eq!(y[(0, 0)], 3.0 + 10.0 + 0.1);
        assert_eq!(y[(1, 0)], -4.0 + 2.5 - 0.2);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = Encoder::Mlp {
            normalizer: Normalizer::identity(6),
            net: Mlp::new(&[6, 4, 4, 2], Activation::Tanh, &mut rng),
        };
        enc.set_params(&vec![0.0; enc.num_params()]).unwrap();
        let x = DMatrix::from_fn(6, 3, |i, j| (i * j) as f64);
        assert!(enc.forward(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pass_through_picks_latest_samples() {
        let enc = Encoder::PassThrough {
            window: 2,
            channels: 3,
        };
        let x = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = enc.forward(&x).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 5.0]);
        assert!(enc.forward(&DMatrix::zeros(5, 1)).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut enc = Encoder::Mlp {
            normalizer: Normalizer::identity(4),
            net: Mlp::new(&[4, 3, 2], Activation::Tanh, &mut rng),
        };
        let p: Vec<f64> = (0..enc.num_params()).map(|i| i as f64).collect();
        enc.set_params(&p).unwrap();
        assert_eq!(enc.params(), p);
        let json = serde_json::to_string(&enc).unwrap();
        let back: Encoder = serde_json::from_str(&json).unwrap();
        assert_eq!(back, enc);
    }
}
