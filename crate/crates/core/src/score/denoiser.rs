//! A small fully connected noise predictor.
//!
//! Layout: `eps = W4 act(W3 act(W2 act(W1 (x_t + e_t)))) + g_t x_t` (biases
//! omitted), where `e_t` is a learned per-level embedding added at the input
//! and `g_t` a learned per-level gain on a linear skip path. The skip path
//! lets narrow hidden layers pass the noise through in every direction.
//! Gradients are computed by explicit backpropagation over a column batch.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ScoreModel;
use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;

pub const MAX_PARAMETERS: usize = 200_000;

const MAGIC: &[u8; 8] = b"SDTINYDN";
const FORMAT_VERSION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Tanh),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    /// `dim x steps`; column `t` is the embedding of level `t`.
    embedding: DMatrix<f64>,
    /// Per-level gain of the linear input-to-output path.
    skip: DVector<f64>,
    activation: Activation,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 0.3,
            batch_size: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: TinyDenoiser,
    pub losses: Vec<f64>,
}

struct Forward {
    inputs: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl TinyDenoiser {
    /// All-zero parameters.
    pub fn zeros(dim: usize, hidden: [usize; 3], steps: usize, activation: Activation) -> Result<Self> {
        if dim == 0 || steps == 0 || hidden.contains(&0) {
            return Err(Error::InvalidParameter("denoiser widths and steps must be positive".into()));
        }
        let widths = vec![dim, hidden[0], hidden[1], hidden[2], dim];
        let weights: Vec<_> = widths.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect();
        let biases: Vec<_> = widths[1..].iter().map(|&w| DVector::zeros(w)).collect();
        let model = Self {
            widths,
            weights,
            biases,
            embedding: DMatrix::zeros(dim, steps),
            skip: DVector::zeros(steps),
            activation,
        };
        let n = model.num_parameters();
        if n > MAX_PARAMETERS {
            return Err(Error::InvalidParameter(format!(
                "denoiser would have {n} parameters, above the {MAX_PARAMETERS} bound"
            )));
        }
        Ok(model)
    }

    /// Random initialization: weights `N(0, 1/fan_in)`, zero biases, small
    /// random level embeddings.
    pub fn new(dim: usize, hidden: [usize; 3], steps: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dim, hidden, steps, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut model.weights {
            let scale = (1.0 / w.ncols() as f64).sqrt();
            for v in w.iter_mut() {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for v in model.embedding.iter_mut() {
            *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(model)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_steps(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_parameters(&self) -> usize {
        self.embedding.len()
            + self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
            + self.skip.len()
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        std::iter::once(self.embedding.as_slice()).chain(
            self.weights
                .iter()
                .zip(&self.biases)
                .flat_map(|(w, b)| [w.as_slice(), b.as_slice()]),
        )
        .chain(std::iter::once(self.skip.as_slice()))
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        std::iter::once(self.embedding.as_mut_slice()).chain(
            self.weights
                .iter_mut()
                .zip(self.biases.iter_mut())
                .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()]),
        )
        .chain(std::iter::once(self.skip.as_mut_slice()))
    }

    /// Flat copy of every parameter: embedding, each layer's weights and
    /// bias, then the skip gains.
    pub fn parameters(&self) -> Vec<f64> {
        self.slices().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        check_dim(self.num_parameters(), values.len())?;
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    fn check_level(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.num_steps(),
            });
        }
        Ok(())
    }

    fn forward_batch(&self, x_t: &DMatrix<f64>, ts: &[usize]) -> Forward {
        let mut h = x_t.clone();
        for (b, &t) in ts.iter().enumerate() {
            let mut col = h.column_mut(b);
            col += self.embedding.column(t);
        }
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre_activations = Vec::with_capacity(layers - 1);
        for (l, (w, bias)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &h;
            for mut col in z.column_iter_mut() {
                col += bias;
            }
            inputs.push(h);
            if l + 1 == layers {
                for (b, &t) in ts.iter().enumerate() {
                    let mut col = z.column_mut(b);
                    col.axpy(self.skip[t], &x_t.column(b), 1.0);
                }
                return Forward {
                    inputs,
                    pre_activations,
                    output: z,
                };
            }
            h = z.map(|v| self.activation.apply(v));
            pre_activations.push(z);
        }
        unreachable!("denoiser has at least one layer")
    }

    fn to_columns(&self, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let d = self.widths[0];
        let mut m = DMatrix::zeros(d, rows.len());
        for (j, r) in rows.iter().enumerate() {
            check_dim(d, r.len())?;
            m.column_mut(j).copy_from_slice(r);
        }
        Ok(m)
    }

    fn check_batch(&self, x_t: &[Vec<f64>], ts: &[usize], eps: &[Vec<f64>]) -> Result<()> {
        if x_t.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        check_dim(x_t.len(), ts.len())?;
        check_dim(x_t.len(), eps.len())?;
        ts.iter().try_for_each(|&t| self.check_level(t))
    }

    /// Mean squared noise-prediction error over a batch.
    pub fn batch_loss(&self, x_t: &[Vec<f64>], ts: &[usize], eps: &[Vec<f64>]) -> Result<f64> {
        self.check_batch(x_t, ts, eps)?;
        let xm = self.to_columns(x_t)?;
        let em = self.to_columns(eps)?;
        let out = self.forward_batch(&xm, ts).output;
        Ok((out - em).norm_squared() / (x_t.len() * self.widths[0]) as f64)
    }

    /// Loss and its exact gradient, flattened in `parameters()` order.
    pub fn batch_loss_and_gradient(
        &self,
        x_t: &[Vec<f64>],
        ts: &[usize],
        eps: &[Vec<f64>],
    ) -> Result<(f64, Vec<f64>)> {
        self.check_batch(x_t, ts, eps)?;
        let xm = self.to_columns(x_t)?;
        let em = self.to_columns(eps)?;
        let (loss, grad) = self.loss_and_gradient_columns(&xm, ts, &em);
        Ok((loss, grad.parameters()))
    }

    fn loss_and_gradient_columns(&self, x_t: &DMatrix<f64>, ts: &[usize], eps: &DMatrix<f64>) -> (f64, TinyDenoiser) {
        let fwd = self.forward_batch(x_t, ts);
        let count = (x_t.ncols() * self.widths[0]) as f64;
        let residual = &fwd.output - eps;
        let loss = residual.norm_squared() / count;

        let mut grad = TinyDenoiser {
            widths: self.widths.clone(),
            weights: Vec::with_capacity(self.weights.len()),
            biases: Vec::with_capacity(self.biases.len()),
            embedding: DMatrix::zeros(self.embedding.nrows(), self.embedding.ncols()),
            skip: DVector::zeros(self.skip.len()),
            activation: self.activation,
        };
        let mut g = residual * (2.0 / count);
        for (b, &t) in ts.iter().enumerate() {
            grad.skip[t] += g.column(b).dot(&x_t.column(b));
        }
        let layers = self.weights.len();
        let mut weight_grads = vec![DMatrix::zeros(0, 0); layers];
        let mut bias_grads = vec![DVector::zeros(0); layers];
        for l in (0..layers).rev() {
            weight_grads[l] = &g * fwd.inputs[l].transpose();
            bias_grads[l] = g.column_sum();
            let back = self.weights[l].transpose() * &g;
            g = if l > 0 {
                let act = self.activation;
                back.zip_map(&fwd.pre_activations[l - 1], |gv, z| gv * act.derivative(z))
            } else {
                back
            };
        }
        for (b, &t) in ts.iter().enumerate() {
            let mut col = grad.embedding.column_mut(t);
            col += g.column(b);
        }
        grad.weights = weight_grads;
        grad.biases = bias_grads;
        (loss, grad)
    }

    fn sgd_update(&mut self, grad: &TinyDenoiser, learning_rate: f64) {
        for (p, g) in self.slices_mut().zip(grad.slices()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= learning_rate * gv;
            }
        }
    }

    /// Plain SGD on `||eps - eps_hat(sqrt(ab) x0 + sqrt(1 - ab) eps, t)||^2`
    /// with `x0` drawn from `dataset`. Levels are spread evenly over each
    /// batch behind a random offset, so every `t` is marginally uniform.
    pub fn train(mut self, dataset: &[Vec<f64>], schedule: &NoiseSchedule, config: &TrainConfig) -> Result<TrainReport> {
        if dataset.is_empty() {
            return Err(Error::InvalidParameter("training dataset is empty".into()));
        }
        let d = self.widths[0];
        for x in dataset {
            check_dim(d, x.len())?;
        }
        if schedule.num_steps() != self.num_steps() {
            return Err(Error::InvalidParameter(format!(
                "denoiser embeds {} levels but the schedule has {}",
                self.num_steps(),
                schedule.num_steps()
            )));
        }
        if config.batch_size == 0 || !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("batch size and learning rate must be positive".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut losses = Vec::with_capacity(config.steps);
        let b = config.batch_size;
        let mut x_t = DMatrix::zeros(d, b);
        let mut eps = DMatrix::zeros(d, b);
        let mut ts = vec![0usize; b];
        let levels = schedule.num_steps();
        for step in 0..config.steps {
            // stratified levels: one shared offset, so each t is still uniform
            let offset: f64 = rng.random();
            for j in 0..b {
                let x0 = &dataset[rng.random_range(0..dataset.len())];
                let t = (((j as f64 + offset) * levels as f64 / b as f64) as usize).min(levels - 1);
                let ab = schedule.alpha_bars()[t];
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                ts[j] = t;
                for i in 0..d {
                    let e: f64 = rng.sample(StandardNormal);
                    eps[(i, j)] = e;
                    x_t[(i, j)] = sa * x0[i] + sn * e;
                }
            }
            let (loss, grad) = self.loss_and_gradient_columns(&x_t, &ts, &eps);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss });
            }
            losses.push(loss);
            self.sgd_update(&grad, config.learning_rate);
        }
        Ok(TrainReport { model: self, losses })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.activation.code().to_le_bytes());
        out.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for w in &self.widths {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.num_steps() as u32).to_le_bytes());
        let mut push = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        // Row-major on disk: one embedding row per level, then each weight
        // matrix row by row followed by its bias.
        for t in 0..self.num_steps() {
            self.embedding.column(t).iter().for_each(|&v| push(v));
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                w.row(r).iter().for_each(|&v| push(v));
            }
            b.iter().for_each(|&v| push(v));
        }
        self.skip.iter().for_each(|&v| push(v));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.take(8)? != MAGIC {
            return Err(Error::Format("not a denoiser weight file (bad magic)".into()));
        }
        let version = cursor.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let activation = Activation::from_code(cursor.u32()?)?;
        let n_widths = cursor.u32()? as usize;
        if n_widths != 5 {
            return Err(Error::Format(format!("expected 5 layer widths, found {n_widths}")));
        }
        let widths = (0..n_widths).map(|_| cursor.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if widths[0] != widths[4] {
            return Err(Error::Format("input and output widths differ".into()));
        }
        let steps = cursor.u32()? as usize;
        let mut model = Self::zeros(widths[0], [widths[1], widths[2], widths[3]], steps, activation)?;
        for t in 0..steps {
            for i in 0..widths[0] {
                model.embedding[(i, t)] = cursor.f64()?;
            }
        }
        for (w, b) in model.weights.iter_mut().zip(model.biases.iter_mut()) {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    w[(r, c)] = cursor.f64()?;
                }
            }
            for v in b.iter_mut() {
                *v = cursor.f64()?;
            }
        }
        for v in model.skip.iter_mut() {
            *v = cursor.f64()?;
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after weights",
                bytes.len() - cursor.pos
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("weight file is truncated".into()))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl ScoreModel for TinyDenoiser {
    fn dim(&self) -> usize {
        self.widths[0]
    }

    fn predict_epsilon(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        check_dim(self.widths[0], x_t.len())?;
        self.check_level(t)?;
        let x = DMatrix::from_column_slice(x_t.len(), 1, x_t);
        Ok(self.forward_batch(&x, &[t]).output.as_slice().to_vec())
    }
}
