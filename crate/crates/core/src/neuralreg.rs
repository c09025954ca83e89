//! Feedforward regression network producing the `(𝒴, 𝒵)` pair of one backward
//! time step, with hand-written backpropagation and Adam.
//!
//! Shapes: input `d`, tanh hidden layers, identity output of width
//! `(d + 1)·J`. The first `J` outputs form the `𝒴` head; output `J + j·d + l`
//! is `𝒵[j][l]`. Inputs pass through a fixed affine standardization before the
//! first layer.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Hidden width used by the schemes: `20·d + 10`.
pub fn default_hidden_width(d: usize) -> usize {
    20 * d + 10
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionNet {
    dim: usize,
    outputs: usize,
    layers: Vec<Layer>,
    shift: Array1<f64>,
    scale: Array1<f64>,
}

/// Gradient of the loss, shaped like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl RegressionNet {
    /// Zero-initialized net `d → hidden[0] → … → (d+1)·outputs`.
    pub fn new(dim: usize, outputs: usize, hidden: &[usize]) -> Result<Self> {
        if dim == 0 || outputs == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParameter("network sizes must be positive".into()));
        }
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push((dim + 1) * outputs);
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self {
            dim,
            outputs,
            layers,
            shift: Array1::zeros(dim),
            scale: Array1::ones(dim),
        })
    }

    /// The scheme's architecture: two hidden layers of width `20·d + 10`.
    pub fn for_scheme(dim: usize, outputs: usize) -> Result<Self> {
        let m = default_hidden_width(dim);
        Self::new(dim, outputs, &[m, m])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `J`, the number of e-grid nodes.
    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Number of trainable scalars (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Inputs are mapped to `(p − shift) / scale`; zero scales become 1.
    pub fn set_standardization(&mut self, shift: &[f64], scale: &[f64]) {
        assert_eq!(shift.len(), self.dim);
        assert_eq!(scale.len(), self.dim);
        self.shift = Array1::from(shift.to_vec());
        self.scale = scale.iter().map(|&s| if s > 0.0 && s.is_finite() { s } else { 1.0 }).collect();
    }

    /// Standardization from the sample mean and deviation of `samples` (rows).
    pub fn fit_standardization(&mut self, samples: ArrayView2<f64>) {
        let n = samples.nrows().max(1) as f64;
        let mean = samples.sum_axis(Axis(0)) / n;
        let mut var = Array1::<f64>::zeros(self.dim);
        for row in samples.rows() {
            Zip::from(&mut var).and(&row).and(&mean).for_each(|v, &x, &m| *v += (x - m) * (x - m));
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        self.set_standardization(mean.as_slice().unwrap(), &std);
    }

    fn standardize(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let mut x = inputs.to_owned();
        for mut row in x.rows_mut() {
            Zip::from(&mut row).and(&self.shift).and(&self.scale).for_each(|x, &m, &s| *x = (*x - m) / s);
        }
        x
    }

    /// Activations of every layer: `acts[0]` is the standardized input,
    /// `acts.last()` the raw output.
    fn activations(&self, inputs: ArrayView2<f64>) -> Vec<Array2<f64>> {
        assert_eq!(inputs.ncols(), self.dim);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.standardize(inputs));
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut a = acts[k].dot(&layer.weight.t()) + &layer.bias;
            if k < last {
                a.mapv_inplace(f64::tanh);
            }
            acts.push(a);
        }
        acts
    }

    /// Raw outputs for a batch (rows are samples): `B × (d+1)J`.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        self.activations(inputs).pop().unwrap()
    }

    /// `𝒴` head for a batch: `B × J`.
    pub fn predict_y(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        self.forward_batch(inputs).slice(s![.., ..self.outputs]).to_owned()
    }

    /// `(𝒴, 𝒵)` at one point; `𝒵` is `J × d`.
    pub fn forward(&self, p: &[f64]) -> (Vec<f64>, Array2<f64>) {
        let x = ArrayView2::from_shape((1, self.dim), p).expect("input length equals net dimension");
        let out = self.forward_batch(x);
        let row = out.row(0);
        let y = row.slice(s![..self.outputs]).to_vec();
        let z = Array2::from_shape_vec((self.outputs, self.dim), row.slice(s![self.outputs..]).to_vec()).unwrap();
        (y, z)
    }
}

/// A regression sample set: rows of `P̂_{t_n}`, `ΔW_n` and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub dw: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, dw: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        let n = inputs.nrows();
        for (rows, cols_ok) in [
            (dw.nrows(), dw.ncols() == inputs.ncols()),
            (targets.nrows(), true),
        ] {
            if rows != n {
                return Err(Error::LengthMismatch { expected: n, actual: rows });
            }
            if !cols_ok {
                return Err(Error::LengthMismatch {
                    expected: inputs.ncols(),
                    actual: dw.ncols(),
                });
            }
        }
        Ok(Self { inputs, dw, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), rows),
            dw: self.dw.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
        }
    }
}

fn check_shapes(net: &RegressionNet, batch: &Batch) -> Result<()> {
    if batch.inputs.ncols() != net.dim || batch.dw.ncols() != net.dim {
        return Err(Error::LengthMismatch {
            expected: net.dim,
            actual: batch.inputs.ncols(),
        });
    }
    if batch.targets.ncols() != net.outputs {
        return Err(Error::LengthMismatch {
            expected: net.outputs,
            actual: batch.targets.ncols(),
        });
    }
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    Ok(())
}

/// Residuals `target − 𝒴 − 𝒵·ΔW`, `B × J`.
fn residuals(net: &RegressionNet, out: &Array2<f64>, batch: &Batch) -> Array2<f64> {
    let (j_count, d) = (net.outputs, net.dim);
    let mut r = &batch.targets - &out.slice(s![.., ..j_count]);
    for b in 0..batch.len() {
        let z = out.slice(s![b, j_count..]);
        let dw = batch.dw.row(b);
        for j in 0..j_count {
            let mut acc = 0.0;
            for l in 0..d {
                acc += z[j * d + l] * dw[l];
            }
            r[[b, j]] -= acc;
        }
    }
    r
}

/// Mean over the batch of `Σ_j (target_j − 𝒴_j − (𝒵·ΔW)_j)²`.
pub fn loss_batch(net: &RegressionNet, batch: &Batch) -> Result<f64> {
    check_shapes(net, batch)?;
    let out = net.forward_batch(batch.inputs.view());
    let r = residuals(net, &out, batch);
    Ok(r.iter().map(|x| x * x).sum::<f64>() / batch.len() as f64)
}

/// Loss and its gradient with respect to every weight and bias.
pub fn loss_and_gradient(net: &RegressionNet, batch: &Batch) -> Result<(f64, Gradient)> {
    check_shapes(net, batch)?;
    let acts = net.activations(batch.inputs.view());
    let out = acts.last().unwrap();
    let r = residuals(net, out, batch);
    let n = batch.len() as f64;
    let loss = r.iter().map(|x| x * x).sum::<f64>() / n;

    let (j_count, d) = (net.outputs, net.dim);
    let mut delta = Array2::<f64>::zeros(out.raw_dim());
    for b in 0..batch.len() {
        for j in 0..j_count {
            let g = -2.0 * r[[b, j]] / n;
            delta[[b, j]] = g;
            for l in 0..d {
                delta[[b, j_count + j * d + l]] = g * batch.dw[[b, l]];
            }
        }
    }

    let mut grads: Vec<Layer> = Vec::with_capacity(net.layers.len());
    for k in (0..net.layers.len()).rev() {
        let weight = delta.t().dot(&acts[k]);
        let bias = delta.sum_axis(Axis(0));
        if k > 0 {
            let mut back = delta.dot(&net.layers[k].weight);
            Zip::from(&mut back).and(&acts[k]).for_each(|g, &a| *g *= 1.0 - a * a);
            delta = back;
        }
        grads.push(Layer { weight, bias });
    }
    grads.reverse();
    Ok((loss, Gradient { layers: grads }))
}

/// Layer-wise `U(−1/√fan_in, 1/√fan_in)` weights, zero biases.
pub fn xavier_init(net: &mut RegressionNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut net.layers {
        let a = 1.0 / (layer.weight.ncols() as f64).sqrt();
        layer.weight.mapv_inplace(|_| rng.gen_range(-a..a));
        layer.bias.fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl AdamState {
    pub fn new(net: &RegressionNet, lr: f64) -> Self {
        let zeros: Vec<Layer> = net
            .layers
            .iter()
            .map(|l| Layer::zeros(l.weight.ncols(), l.weight.nrows()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(net: &mut RegressionNet, state: &mut AdamState, grad: &Gradient) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    };
    for (k, layer) in net.layers.iter_mut().enumerate() {
        Zip::from(&mut layer.weight)
            .and(&mut state.first[k].weight)
            .and(&mut state.second[k].weight)
            .and(&grad.layers[k].weight)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut layer.bias)
            .and(&mut state.first[k].bias)
            .and(&mut state.second[k].bias)
            .and(&grad.layers[k].bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub val_size: usize,
    pub val_every: usize,
    pub patience: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 50,
            batches_per_epoch: 100,
            val_size: 500,
            val_every: 30,
            patience: 5,
            max_iters: 3000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Training pool size: one epoch of minibatches.
    pub fn pool_size(&self) -> usize {
        self.batch_size * self.batches_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("batches_per_epoch", self.batches_per_epoch),
            ("val_size", self.val_size),
            ("val_every", self.val_every),
            ("patience", self.patience),
            ("max_iters", self.max_iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: RegressionNet,
    pub best_val_loss: f64,
    pub iterations: usize,
}

/// Minibatch Adam from `init` on `train`, validating on `val` every
/// `val_every` iterations; returns the best-validation snapshot. Stops after
/// `patience` checks without improvement or at `max_iters`.
///
/// `step` only labels diagnostics.
pub fn train_time_step(init: RegressionNet, train: &Batch, val: &Batch, cfg: &TrainConfig, step: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_shapes(&init, train)?;
    check_shapes(&init, val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let mut net = init;
    let mut adam = AdamState::new(&net, cfg.lr);
    let mut best_loss = loss_batch(&net, val)?;
    if !best_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            iteration: 0,
            loss: best_loss,
        });
    }
    let mut best = net.clone();
    let mut stale = 0;
    let mut iteration = 0;
    let bs = cfg.batch_size.min(train.len());
    while iteration < cfg.max_iters {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mb = train.select(&order[cursor..cursor + bs]);
        cursor += bs;
        let (loss, grad) = loss_and_gradient(&net, &mb)?;
        iteration += 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, iteration, loss });
        }
        adam_step(&mut net, &mut adam, &grad);
        if iteration % cfg.val_every == 0 {
            let v = loss_batch(&net, val)?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    iteration,
                    loss: v,
                });
            }
            if v < best_loss {
                best_loss = v;
                best = net.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    log::debug!("step {step}: {iteration} iterations, best validation loss {best_loss:.3e}");
    Ok(TrainOutcome {
        net: best,
        best_val_loss: best_loss,
        iterations: iteration,
    })
}
