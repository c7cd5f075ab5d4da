//! Feedforward networks with tanh hidden layers and a single sigmoid output,
//! trained on cross-entropy with scaled conjugate gradients and early
//! validation stopping.

use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Layer sizes including the input and the single output, e.g. `[176, 100, 14, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Outputs of a batch forward pass.
pub struct BatchOutput {
    pub prelogits: Array1<f64>,
    /// Activations of every hidden layer, `examples x units`.
    pub hidden: Vec<Array2<f64>>,
}

impl Network {
    /// Symmetric uniform initialisation scaled by fan-in.
    pub fn seeded(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || *sizes.last().unwrap() != 1 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Network {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_count(sizes) {
            return Err(Error::DimensionMismatch {
                expected: Self::param_count(sizes),
                got: params.len(),
            });
        }
        Ok(Network {
            sizes: sizes.to_vec(),
            params,
        })
    }

    fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .take(layer)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Weight matrix (`out x in`) and bias of layer `layer` (0-based, counting from the input).
    pub fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        Self::layer_of(&self.sizes, &self.params, layer, self.offset(layer))
    }

    fn layer_of<'a>(
        sizes: &[usize],
        params: &'a [f64],
        layer: usize,
        offset: usize,
    ) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (fan_in, fan_out) = (sizes[layer], sizes[layer + 1]);
        let w = ArrayView2::from_shape((fan_out, fan_in), &params[offset..offset + fan_in * fan_out])
            .expect("layer shape");
        let b = ArrayView1::from(&params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out]);
        (w, b)
    }

    fn check_width(&self, got: usize) -> Result<()> {
        if got != self.input_size() {
            return Err(Error::DimensionMismatch {
                expected: self.input_size(),
                got,
            });
        }
        Ok(())
    }

    /// Forward pass over a batch (`examples x inputs`).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<BatchOutput> {
        self.check_width(x.ncols())?;
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(self.n_layers() - 1);
        let mut offset = 0;
        let mut prelogits = None;
        for l in 0..self.n_layers() {
            let (w, b) = Self::layer_of(&self.sizes, &self.params, l, offset);
            offset += w.len() + b.len();
            let input = if l == 0 { x } else { hidden[l - 1].view() };
            let mut z = input.dot(&w.t());
            z += &b;
            if l + 1 < self.n_layers() {
                z.mapv_inplace(f64::tanh);
                hidden.push(z);
            } else {
                prelogits = Some(z.index_axis(Axis(1), 0).to_owned());
            }
        }
        Ok(BatchOutput {
            prelogits: prelogits.expect("at least one layer"),
            hidden,
        })
    }

    pub fn infer_prelogit(&self, x: &[f64]) -> Result<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.forward(view)?.prelogits[0])
    }

    pub fn infer(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.infer_prelogit(x)?))
    }

    /// Activations of hidden layer `layer` (1-based: 1 is the first hidden layer).
    pub fn hidden_activations(&self, x: &[f64], layer: usize) -> Result<Vec<f64>> {
        if layer == 0 || layer >= self.n_layers() {
            return Err(Error::InvalidArgument(format!(
                "network has {} hidden layers, asked for {layer}",
                self.n_layers() - 1
            )));
        }
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let out = self.forward(view)?;
        Ok(out.hidden[layer - 1].row(0).to_vec())
    }

    /// Mean cross-entropy over a batch; targets may be soft (in `[0, 1]`).
    pub fn loss(&self, x: ArrayView2<f64>, y: &[f64]) -> Result<f64> {
        let out = self.forward(x)?;
        Ok(mean_cross_entropy(out.prelogits.view(), y))
    }

    /// Mean cross-entropy and its gradient with respect to all parameters.
    pub fn loss_and_gradient(&self, x: ArrayView2<f64>, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        let out = self.forward(x)?;
        let n = x.nrows().max(1) as f64;
        let loss = mean_cross_entropy(out.prelogits.view(), y);
        let mut grad = vec![0.0; self.params.len()];
        let mut delta: Array2<f64> = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| {
            (sigmoid(out.prelogits[i]) - y[i]) / n
        });
        for l in (0..self.n_layers()).rev() {
            let offset = self.offset(l);
            let (w, _) = self.layer(l);
            let input = if l == 0 { x } else { out.hidden[l - 1].view() };
            let gw = delta.t().dot(&input);
            let gb = delta.sum_axis(Axis(0));
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            grad[offset..offset + fan_in * fan_out].copy_from_slice(gw.as_slice().expect("contiguous"));
            grad[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out]
                .copy_from_slice(gb.as_slice().expect("contiguous"));
            if l > 0 {
                let mut back = delta.dot(&w);
                let act = &out.hidden[l - 1];
                ndarray::Zip::from(&mut back).and(act).for_each(|d, &a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        Ok((loss, grad))
    }
}

fn mean_cross_entropy(z: ArrayView1<f64>, y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    z.iter().zip(y).map(|(&z, &t)| softplus(z) - t * z).sum::<f64>() / y.len() as f64
}

/// Per-feature min/max affine map onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationSpec {
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyInput("normalization data"));
        }
        let mut min = vec![f64::INFINITY; x.ncols()];
        let mut max = vec![f64::NEG_INFINITY; x.ncols()];
        for row in x.axis_iter(Axis(0)) {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        let constant = min.iter().zip(&max).filter(|(a, b)| a >= b).count();
        if constant > 0 {
            warn!("{constant} constant feature(s) mapped to 0");
        }
        Ok(NormalizationSpec { min, max })
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    #[inline]
    fn map(&self, j: usize, v: f64) -> f64 {
        let span = self.max[j] - self.min[j];
        if span > 0.0 {
            2.0 * (v - self.min[j]) / span - 1.0
        } else {
            0.0
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: x.len(),
            });
        }
        Ok(x.iter().enumerate().map(|(j, &v)| self.map(j, v)).collect())
    }

    pub fn apply_inplace(&self, x: &mut Array2<f64>) -> Result<()> {
        if x.ncols() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: x.ncols(),
            });
        }
        for mut row in x.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.map(j, *v);
            }
        }
        Ok(())
    }

    /// Inverse map; constant features come back as their training value.
    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                let span = self.max[j] - self.min[j];
                if span > 0.0 {
                    (v + 1.0) / 2.0 * span + self.min[j]
                } else {
                    self.min[j]
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Scaled conjugate gradient on the full batch.
    Scg,
    /// Full-batch gradient descent with a bold-driver step size.
    GradientDescent { initial_step: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn new(max_epochs: usize, patience: usize, seed: u64) -> Self {
        TrainConfig {
            max_epochs,
            patience,
            seed,
            optimizer: Optimizer::Scg,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: String,
}

/// Initializes a network from `cfg.seed` and trains it.
pub fn fit(
    sizes: &[usize],
    x: ArrayView2<f64>,
    y: &[f64],
    val_x: ArrayView2<f64>,
    val_y: &[f64],
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog)> {
    train(Network::seeded(sizes, cfg.seed)?, x, y, val_x, val_y, cfg)
}

/// Trains `net` and returns the parameters of the epoch with the lowest validation loss.
pub fn train(
    net: Network,
    x: ArrayView2<f64>,
    y: &[f64],
    val_x: ArrayView2<f64>,
    val_y: &[f64],
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog)> {
    if val_x.nrows() == 0 || val_y.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("training set"));
    }
    if cfg.patience == 0 {
        return Err(Error::InvalidArgument("patience must be at least 1".into()));
    }
    if val_y.len() != val_x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: val_x.nrows(),
            got: val_y.len(),
        });
    }
    let sizes = net.sizes.clone();
    let mut state = EarlyStopping::new(net.clone(), val_x, val_y, cfg.patience)?;
    let mut objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let candidate = Network {
            sizes: sizes.clone(),
            params: p.to_vec(),
        };
        let (loss, grad) = candidate.loss_and_gradient(x, y)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss(format!(
                "loss {loss} with {} parameters",
                p.len()
            )));
        }
        Ok((loss, grad))
    };
    let reason = match cfg.optimizer {
        Optimizer::Scg => scg(net.params, cfg.max_epochs, &mut objective, &mut |epoch, p, loss| {
            state.observe(epoch, &sizes, p, loss)
        })?,
        Optimizer::GradientDescent { initial_step } => gradient_descent(
            net.params,
            initial_step,
            cfg.max_epochs,
            &mut objective,
            &mut |epoch, p, loss| state.observe(epoch, &sizes, p, loss),
        )?,
    };
    Ok(state.finish(reason))
}

struct EarlyStopping<'a> {
    val_x: ArrayView2<'a, f64>,
    val_y: &'a [f64],
    best: Network,
    best_val: f64,
    best_epoch: usize,
    fails: usize,
    patience: usize,
    log: Vec<EpochRecord>,
}

impl<'a> EarlyStopping<'a> {
    fn new(initial: Network, val_x: ArrayView2<'a, f64>, val_y: &'a [f64], patience: usize) -> Result<Self> {
        let val = initial.loss(val_x, val_y)?;
        Ok(EarlyStopping {
            val_x,
            val_y,
            best: initial,
            best_val: val,
            best_epoch: 0,
            fails: 0,
            patience,
            log: Vec::new(),
        })
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, sizes: &[usize], params: &[f64], train_loss: f64) -> Result<bool> {
        let net = Network {
            sizes: sizes.to_vec(),
            params: params.to_vec(),
        };
        let val = net.loss(self.val_x, self.val_y)?;
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss(format!("validation loss {val} at epoch {epoch}")));
        }
        if val < self.best_val {
            self.best_val = val;
            self.best = net;
            self.best_epoch = epoch;
            self.fails = 0;
        } else {
            self.fails += 1;
        }
        self.log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val,
            best_val_loss: self.best_val,
        });
        Ok(self.fails >= self.patience)
    }

    fn finish(self, reason: &'static str) -> (Network, TrainLog) {
        let reason = if self.fails >= self.patience {
            "validation patience exhausted"
        } else {
            reason
        };
        (
            self.best,
            TrainLog {
                epochs: self.log,
                best_epoch: self.best_epoch,
                stop_reason: reason.to_string(),
            },
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(w: &[f64], a: f64, p: &[f64]) -> Vec<f64> {
    w.iter().zip(p).map(|(x, y)| x + a * y).collect()
}

type Objective<'o> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'o;
type Observer<'o> = dyn FnMut(usize, &[f64], f64) -> Result<bool> + 'o;

/// Moller's scaled conjugate gradient. `observe` is called after every
/// iteration with the current parameters and returns true to stop.
fn scg(
    mut w: Vec<f64>,
    max_epochs: usize,
    f: &mut Objective<'_>,
    observe: &mut Observer<'_>,
) -> Result<&'static str> {
    const SIGMA: f64 = 5e-5;
    const LAMBDA_MIN: f64 = 1e-15;
    const LAMBDA_MAX: f64 = 1e100;
    let n = w.len();
    let (mut e, mut g) = f(&w)?;
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut p = r.clone();
    let mut lambda = 5e-7;
    let mut lambda_bar = 0.0;
    let mut success = true;
    let mut delta = 0.0;
    for epoch in 1..=max_epochs {
        let p2 = dot(&p, &p);
        if p2 == 0.0 {
            return Ok("zero gradient");
        }
        if success {
            let sigma = SIGMA / p2.sqrt();
            let (_, g_s) = f(&axpy(&w, sigma, &p))?;
            delta = g_s.iter().zip(&g).zip(&p).map(|((a, b), pk)| pk * (a - b) / sigma).sum();
        }
        delta += (lambda - lambda_bar) * p2;
        if delta <= 0.0 {
            lambda_bar = 2.0 * (lambda - delta / p2);
            delta = -delta + lambda * p2;
            lambda = lambda_bar;
        }
        let mut mu = dot(&p, &r);
        if mu <= 0.0 {
            p = r.clone();
            mu = dot(&p, &r);
            if mu == 0.0 {
                return Ok("zero gradient");
            }
        }
        let alpha = mu / delta;
        let w_new = axpy(&w, alpha, &p);
        let (e_new, g_new) = f(&w_new)?;
        let comparison = 2.0 * delta * (e - e_new) / (mu * mu);
        if comparison >= 0.0 {
            w = w_new;
            e = e_new;
            let r_new: Vec<f64> = g_new.iter().map(|v| -v).collect();
            g = g_new;
            lambda_bar = 0.0;
            success = true;
            if epoch % n == 0 {
                p = r_new.clone();
            } else {
                let beta = (dot(&r_new, &r_new) - dot(&r_new, &r)) / mu;
                p = r_new.iter().zip(&p).map(|(rv, pv)| rv + beta * pv).collect();
            }
            r = r_new;
            if comparison >= 0.75 {
                lambda = (lambda / 4.0).max(LAMBDA_MIN);
            }
        } else {
            lambda_bar = lambda;
            success = false;
        }
        if comparison < 0.25 {
            lambda = (lambda + delta * (1.0 - comparison) / p2).min(LAMBDA_MAX);
        }
        if observe(epoch, &w, e)? {
            return Ok("validation patience exhausted");
        }
        if dot(&r, &r) < 1e-24 {
            return Ok("gradient vanished");
        }
    }
    Ok("epoch budget reached")
}

fn gradient_descent(
    mut w: Vec<f64>,
    initial_step: f64,
    max_epochs: usize,
    f: &mut Objective<'_>,
    observe: &mut Observer<'_>,
) -> Result<&'static str> {
    let mut step = initial_step;
    let (mut e, mut g) = f(&w)?;
    for epoch in 1..=max_epochs {
        let trial = axpy(&w, -step, &g);
        let (e_new, g_new) = f(&trial)?;
        if e_new <= e {
            w = trial;
            e = e_new;
            g = g_new;
            step *= 1.1;
        } else {
            step *= 0.5;
        }
        if observe(epoch, &w, e)? {
            return Ok("validation patience exhausted");
        }
        if step < 1e-16 {
            return Ok("step size vanished");
        }
    }
    Ok("epoch budget reached")
}

/// A trained network bundled with its input normalization and feature-layout tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub network: Network,
    pub normalization: Option<NormalizationSpec>,
    pub layout: String,
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    layout: String,
    sizes: Vec<usize>,
    params: Vec<f64>,
    normalization: Option<NormalizationSpec>,
}

impl Model {
    pub fn new(network: Network, normalization: Option<NormalizationSpec>, layout: impl Into<String>) -> Self {
        Model {
            network,
            normalization,
            layout: layout.into(),
        }
    }

    fn normalized(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.normalization {
            Some(n) => n.apply(x),
            None => Ok(x.to_vec()),
        }
    }

    pub fn prelogit(&self, x: &[f64]) -> Result<f64> {
        self.network.infer_prelogit(&self.normalized(x)?)
    }

    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        self.network.infer(&self.normalized(x)?)
    }

    /// Normalizes a batch in place and runs it through the network.
    pub fn forward_batch(&self, mut x: Array2<f64>) -> Result<BatchOutput> {
        if let Some(n) = &self.normalization {
            n.apply_inplace(&mut x)?;
        }
        self.network.forward(x.view())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            layout: self.layout.clone(),
            sizes: self.network.sizes.clone(),
            params: self.network.params.clone(),
            normalization: self.normalization.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: ModelFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("unsupported model format {}", file.format_version),
            });
        }
        let network = Network::from_params(&file.sizes, file.params)?;
        if let Some(n) = &file.normalization {
            if n.len() != network.input_size() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: "normalization width differs from the input layer".into(),
                });
            }
        }
        Ok(Model {
            network,
            normalization: file.normalization,
            layout: file.layout,
        })
    }

    /// Loads a model and rejects it unless its layout tag equals `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &str) -> Result<Self> {
        let path = path.as_ref();
        let model = Self::load(path)?;
        if model.layout != expected {
            return Err(Error::LayoutMismatch {
                model: path.display().to_string(),
                found: model.layout,
                expected: expected.to_string(),
            });
        }
        Ok(model)
    }
}
