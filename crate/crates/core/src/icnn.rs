//! Input convex neural networks with Softplus activations.
//!
//! Architecture: `m` Softplus hidden layers plus an affine output layer,
//! every layer seeing the raw input through a passthrough matrix:
//!
//! ```text
//! y_1     = softplus(W_x[0] x + b[0])
//! y_{i+1} = softplus(W_y[i-1] y_i + W_x[i] x + b[i])   i = 1..m-1
//! out     = W_y[m-1] y_m + W_x[m] x + b[m]
//! ```
//!
//! With all inter-layer weights `W_y` nonnegative and Softplus (convex,
//! nondecreasing) activations, every output coordinate is a convex
//! function of the input. Training enforces nonnegativity by clamping
//! after each gradient step; `convex_mode = false` skips the clamp and
//! yields the plain-MLP baseline with identical architecture.
//!
//! The model input may be an augmented control vector `[x~; -x~]`
//! optionally followed by fixed context features; `control_dim` and
//! `augmented` record the layout so the reduced Jacobian with respect to
//! `x~` can be formed by the chain rule.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IcnnError {
    #[error("input dimension {got} does not match model input {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss: training diverged")]
    Diverged,
    #[error("checkpoint version {got}, expected {expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("convex_mode checkpoint has negative W_y entry {value} in layer {layer}")]
    ConvexityViolated { layer: usize, value: f64 },
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Numerically stable Softplus `(1/beta) ln(1 + exp(beta t))`.
pub fn softplus(t: f64, beta: f64) -> f64 {
    let bt = beta * t;
    if bt > 30.0 {
        t + (-bt).exp().ln_1p() / beta
    } else {
        bt.exp().ln_1p() / beta
    }
}

/// Derivative of [`softplus`] in `t`: the sigmoid `1/(1 + exp(-beta t))`.
pub fn softplus_grad(t: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (-beta * t).exp())
}

/// Per-feature input shift/scale and per-target output scale. Affine, so
/// it preserves convexity in the original coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_scale: Vec<f64>,
}

impl NormStats {
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        NormStats {
            input_shift: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            target_scale: vec![1.0; output_dim],
        }
    }

    /// Zero-mean unit-variance per input feature, max-abs per target,
    /// computed over columns of sample matrices (one sample per column).
    pub fn fit(inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Self {
        let n = inputs.ncols().max(1) as f64;
        let mut input_shift = Vec::with_capacity(inputs.nrows());
        let mut input_scale = Vec::with_capacity(inputs.nrows());
        for r in 0..inputs.nrows() {
            let row = inputs.row(r);
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            input_shift.push(mean);
            input_scale.push(var.sqrt().max(1e-8));
        }
        let target_scale = (0..targets.nrows())
            .map(|r| {
                targets
                    .row(r)
                    .iter()
                    .fold(0.0f64, |acc, v| acc.max(v.abs()))
                    .max(1e-8)
            })
            .collect();
        NormStats {
            input_shift,
            input_scale,
            target_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnModel {
    /// `[input, hidden..., output]` widths.
    pub layer_widths: Vec<usize>,
    /// Inter-layer matrices for layers `1..m`; clamped nonnegative in
    /// convex mode. Empty for an affine (no-hidden-layer) model.
    pub w_y: Vec<DMatrix<f64>>,
    /// Input passthrough matrices for layers `0..m`.
    pub w_x: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    pub beta: f64,
    pub convex_mode: bool,
    /// Length of the control block `x~`. The input layout is
    /// `[x~; -x~; context]` when `augmented`, `[x~; context]` otherwise.
    pub control_dim: usize,
    pub augmented: bool,
    pub norm: NormStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative per-epoch learning-rate decay (1.0 = constant).
    pub lr_decay: f64,
    /// Heavy-ball momentum coefficient in `[0,1)`; 0 is plain descent.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            lr_decay: 1.0,
            momentum: 0.0,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

/// Gradient of the batch MSE with respect to every parameter; layout
/// mirrors the model.
pub struct ParamGrads {
    pub w_y: Vec<DMatrix<f64>>,
    pub w_x: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

/// `[x~; -x~]`.
pub fn augment_input(x_tilde: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * x_tilde.len());
    out.extend_from_slice(x_tilde);
    out.extend(x_tilde.iter().map(|v| -v));
    out
}

impl IcnnModel {
    /// Fresh model with `W_y ~ U[0, s]` (nonnegative from step zero) and
    /// `W_x ~ U[-s, s]`, `s = 1/sqrt(fan_in)`, zero biases.
    pub fn new(
        layer_widths: &[usize],
        beta: f64,
        convex_mode: bool,
        control_dim: usize,
        augmented: bool,
        seed: u64,
    ) -> Result<IcnnModel, IcnnError> {
        if layer_widths.len() < 2 {
            return Err(IcnnError::Invalid("need input and output widths".into()));
        }
        if beta <= 0.0 {
            return Err(IcnnError::Invalid("beta must be positive".into()));
        }
        let d = layer_widths[0];
        let n_layers = layer_widths.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_y = Vec::new();
        let mut w_x = Vec::new();
        let mut b = Vec::new();
        for i in 0..n_layers {
            let rows = layer_widths[i + 1];
            if i >= 1 {
                let fan_in = layer_widths[i];
                let s = 1.0 / (fan_in as f64).sqrt();
                w_y.push(DMatrix::from_fn(rows, fan_in, |_, _| {
                    rng.gen_range(0.0..s)
                }));
            }
            let s = 1.0 / (d as f64).sqrt();
            w_x.push(DMatrix::from_fn(rows, d, |_, _| rng.gen_range(-s..s)));
            b.push(DVector::zeros(rows));
        }
        let out = *layer_widths.last().unwrap();
        Ok(IcnnModel {
            layer_widths: layer_widths.to_vec(),
            w_y,
            w_x,
            b,
            beta,
            convex_mode,
            control_dim,
            augmented,
            norm: NormStats::identity(d, out),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn context_dim(&self) -> usize {
        let ctrl = if self.augmented { 2 } else { 1 } * self.control_dim;
        self.input_dim() - ctrl
    }

    fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<(), IcnnError> {
        if x.len() != self.input_dim() {
            return Err(IcnnError::DimensionMismatch {
                got: x.len(),
                expected: self.input_dim(),
            });
        }
        Ok(())
    }

    /// Network evaluation in normalized coordinates (no norm applied).
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>, IcnnError> {
        self.check_input(x)?;
        Ok(self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice())).column(0).into())
    }

    /// Batch evaluation, one sample per column.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (_, acts) = self.forward_trace(x);
        acts.into_iter().last().unwrap()
    }

    /// Pre-activations and activations per layer; the last activation is
    /// the network output.
    fn forward_trace(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let m = self.n_layers();
        let mut pre = Vec::with_capacity(m);
        let mut acts = Vec::with_capacity(m);
        let mut y: Option<&DMatrix<f64>> = None;
        for i in 0..m {
            let mut a = &self.w_x[i] * x;
            if let Some(prev) = y {
                a += &self.w_y[i - 1] * prev;
            }
            for mut col in a.column_iter_mut() {
                col += &self.b[i];
            }
            let act = if i + 1 < m {
                a.map(|t| softplus(t, self.beta))
            } else {
                a.clone()
            };
            pre.push(a);
            acts.push(act);
            y = Some(&acts[i]);
        }
        (pre, acts)
    }

    /// Exact Jacobian (outputs x inputs) in normalized coordinates, by
    /// forward accumulation of the chain rule.
    pub fn input_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, IcnnError> {
        self.check_input(x)?;
        let eye = DMatrix::identity(self.input_dim(), self.input_dim());
        Ok(self.jacobian_directions(x, &eye)?.1)
    }

    /// `(output, J . dirs)` for a directions matrix with `input_dim` rows.
    /// Accumulating only along the needed directions keeps the per-call
    /// cost proportional to `dirs.ncols()`.
    pub fn jacobian_directions(
        &self,
        x: &DVector<f64>,
        dirs: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>), IcnnError> {
        self.check_input(x)?;
        if dirs.nrows() != self.input_dim() {
            return Err(IcnnError::DimensionMismatch {
                got: dirs.nrows(),
                expected: self.input_dim(),
            });
        }
        let m = self.n_layers();
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let (pre, acts) = self.forward_trace(&xm);
        let out: DVector<f64> = acts[m - 1].column(0).into();

        let mut jac: Option<DMatrix<f64>> = None;
        for i in 0..m {
            let mut a = &self.w_x[i] * dirs;
            if let Some(prev) = &jac {
                a += &self.w_y[i - 1] * prev;
            }
            if i + 1 < m {
                for (r, mut row) in a.row_iter_mut().enumerate() {
                    row *= softplus_grad(pre[i][(r, 0)], self.beta);
                }
            }
            jac = Some(a);
        }
        Ok((out, jac.unwrap()))
    }

    /// Evaluation in raw coordinates: applies input normalization and
    /// undoes target scaling.
    pub fn predict(&self, x_raw: &DVector<f64>) -> Result<DVector<f64>, IcnnError> {
        let x = self.normalize_input(x_raw)?;
        let mut y = self.forward(&x)?;
        for (i, v) in y.iter_mut().enumerate() {
            *v *= self.norm.target_scale[i];
        }
        Ok(y)
    }

    pub fn normalize_input(&self, x_raw: &DVector<f64>) -> Result<DVector<f64>, IcnnError> {
        self.check_input(x_raw)?;
        Ok(DVector::from_fn(x_raw.len(), |i, _| {
            (x_raw[i] - self.norm.input_shift[i]) / self.norm.input_scale[i]
        }))
    }

    /// Gradient of the batch MSE with respect to all parameters, by
    /// backpropagation. Inputs/targets hold one sample per column, in
    /// normalized coordinates.
    pub fn param_grads(
        &self,
        inputs: &DMatrix<f64>,
        targets: &DMatrix<f64>,
    ) -> Result<(ParamGrads, f64), IcnnError> {
        let n = inputs.ncols();
        if n == 0 {
            return Err(IcnnError::EmptyBatch);
        }
        if inputs.nrows() != self.input_dim() || targets.nrows() != self.output_dim() {
            return Err(IcnnError::DimensionMismatch {
                got: inputs.nrows(),
                expected: self.input_dim(),
            });
        }
        let m = self.n_layers();
        let (pre, acts) = self.forward_trace(inputs);
        let residual = &acts[m - 1] - targets;
        let denom = (n * self.output_dim()) as f64;
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / denom;

        let mut gw_y: Vec<DMatrix<f64>> = self
            .w_y
            .iter()
            .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
            .collect();
        let mut gw_x: Vec<DMatrix<f64>> = self
            .w_x
            .iter()
            .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
            .collect();
        let mut gb: Vec<DVector<f64>> =
            self.b.iter().map(|v| DVector::zeros(v.len())).collect();

        // delta = dL/d(pre-activation of layer i), one column per sample.
        let mut delta = residual * (2.0 / denom);
        for i in (0..m).rev() {
            if i + 1 < m {
                // Propagated through the Softplus of layer i.
                for (r, mut row) in delta.row_iter_mut().enumerate() {
                    for (c, v) in row.iter_mut().enumerate() {
                        *v *= softplus_grad(pre[i][(r, c)], self.beta);
                    }
                }
            }
            gw_x[i] = &delta * inputs.transpose();
            gb[i] = DVector::from_fn(delta.nrows(), |r, _| delta.row(r).sum());
            if i >= 1 {
                gw_y[i - 1] = &delta * acts[i - 1].transpose();
                delta = self.w_y[i - 1].transpose() * delta;
            }
        }

        Ok((
            ParamGrads {
                w_y: gw_y,
                w_x: gw_x,
                b: gb,
            },
            loss,
        ))
    }

    /// One gradient-descent step on the batch, followed by projection of
    /// every `W_y` entry onto the nonnegative orthant in convex mode.
    /// Returns the pre-update batch loss.
    pub fn train_step(
        &mut self,
        inputs: &DMatrix<f64>,
        targets: &DMatrix<f64>,
        cfg: &TrainConfig,
    ) -> Result<f64, IcnnError> {
        let (grads, loss) = self.param_grads(inputs, targets)?;
        if !loss.is_finite() {
            return Err(IcnnError::Diverged);
        }
        let lr = cfg.learning_rate;
        for (w, g) in self.w_y.iter_mut().zip(&grads.w_y) {
            *w -= g * lr;
            if self.convex_mode {
                w.apply(|v| *v = v.max(0.0));
            }
        }
        for (w, g) in self.w_x.iter_mut().zip(&grads.w_x) {
            *w -= g * lr;
        }
        for (v, g) in self.b.iter_mut().zip(&grads.b) {
            *v -= g * lr;
        }
        Ok(loss)
    }

    /// Mini-batch training with seed-deterministic shuffling. `inputs` and
    /// `targets` are raw (unnormalized) sample columns; normalization
    /// statistics are fitted on the training split and stored on the model.
    pub fn train(
        &mut self,
        inputs: &DMatrix<f64>,
        targets: &DMatrix<f64>,
        cfg: &TrainConfig,
    ) -> Result<TrainReport, IcnnError> {
        let n = inputs.ncols();
        if n == 0 {
            return Err(IcnnError::EmptyBatch);
        }
        if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) {
            return Err(IcnnError::Invalid("validation_fraction must be in (0,1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut rng);
        let n_val = ((n as f64) * cfg.validation_fraction).round() as usize;
        let n_val = n_val.clamp(1, n - 1);
        let (val_idx, train_idx) = order.split_at(n_val);
        self.fit(
            &select_columns(inputs, train_idx),
            &select_columns(targets, train_idx),
            &select_columns(inputs, val_idx),
            &select_columns(targets, val_idx),
            cfg,
        )
    }

    /// Training with caller-provided train/validation splits (raw sample
    /// columns). Normalization is fitted on the training split only.
    pub fn fit(
        &mut self,
        train_in_raw: &DMatrix<f64>,
        train_tg_raw: &DMatrix<f64>,
        val_in_raw: &DMatrix<f64>,
        val_tg_raw: &DMatrix<f64>,
        cfg: &TrainConfig,
    ) -> Result<TrainReport, IcnnError> {
        if train_in_raw.ncols() == 0 || val_in_raw.ncols() == 0 {
            return Err(IcnnError::EmptyBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        self.norm = NormStats::fit(train_in_raw, train_tg_raw);

        let train_in = self.normalize_columns(train_in_raw);
        let train_tg = self.scale_targets(train_tg_raw);
        let val_in = self.normalize_columns(val_in_raw);
        let val_tg = self.scale_targets(val_tg_raw);

        let n_train = train_in.ncols();
        let mut epoch_order: Vec<usize> = (0..n_train).collect();
        let mut report = TrainReport {
            train_loss: Vec::with_capacity(cfg.epochs),
            val_loss: Vec::with_capacity(cfg.epochs),
        };
        if !(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0) {
            return Err(IcnnError::Invalid("lr_decay must be in (0,1]".into()));
        }
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(IcnnError::Invalid("momentum must be in [0,1)".into()));
        }
        let mut vel = ParamGrads {
            w_y: self.w_y.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            w_x: self.w_x.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            b: self.b.iter().map(|v| DVector::zeros(v.nrows())).collect(),
        };
        let mut lr = cfg.learning_rate;
        for _epoch in 0..cfg.epochs {
            shuffle(&mut epoch_order, &mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0.0;
            for chunk in epoch_order.chunks(cfg.batch_size.max(1)) {
                let bx = select_columns(&train_in, chunk);
                let bt = select_columns(&train_tg, chunk);
                let (grads, loss) = self.param_grads(&bx, &bt)?;
                if !loss.is_finite() {
                    return Err(IcnnError::Diverged);
                }
                for ((w, v), g) in self.w_y.iter_mut().zip(&mut vel.w_y).zip(&grads.w_y) {
                    *v = &*v * cfg.momentum + g;
                    *w -= &*v * lr;
                    if self.convex_mode {
                        w.apply(|e| *e = e.max(0.0));
                    }
                }
                for ((w, v), g) in self.w_x.iter_mut().zip(&mut vel.w_x).zip(&grads.w_x) {
                    *v = &*v * cfg.momentum + g;
                    *w -= &*v * lr;
                }
                for ((b, v), g) in self.b.iter_mut().zip(&mut vel.b).zip(&grads.b) {
                    *v = &*v * cfg.momentum + g;
                    *b -= &*v * lr;
                }
                epoch_loss += loss;
                batches += 1.0;
            }
            lr *= cfg.lr_decay;
            report.train_loss.push(epoch_loss / batches);
            let val_pred = self.forward_batch(&val_in);
            let val_res = &val_pred - &val_tg;
            report
                .val_loss
                .push(val_res.iter().map(|r| r * r).sum::<f64>() / (val_res.len() as f64));
        }
        Ok(report)
    }

    fn normalize_columns(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = raw.clone();
        for mut col in out.column_iter_mut() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = (*v - self.norm.input_shift[i]) / self.norm.input_scale[i];
            }
        }
        out
    }

    fn scale_targets(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = raw.clone();
        for mut col in out.column_iter_mut() {
            for (i, v) in col.iter_mut().enumerate() {
                *v /= self.norm.target_scale[i];
            }
        }
        out
    }

    /// MSE in raw target units over raw sample columns.
    pub fn mse_raw(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
        let pred = self.forward_batch(&self.normalize_columns(inputs));
        let mut acc = 0.0;
        for c in 0..targets.ncols() {
            for r in 0..targets.nrows() {
                let p = pred[(r, c)] * self.norm.target_scale[r];
                acc += (p - targets[(r, c)]).powi(2);
            }
        }
        acc / (targets.len() as f64)
    }

    /// Minimum entry over all `W_y` matrices (`+inf` for affine models).
    pub fn min_wy(&self) -> f64 {
        self.w_y
            .iter()
            .flat_map(|w| w.iter())
            .fold(f64::INFINITY, |a, &v| a.min(v))
    }

    pub fn validate(&self) -> Result<(), IcnnError> {
        if self.beta <= 0.0 {
            return Err(IcnnError::Invalid("beta must be positive".into()));
        }
        let m = self.n_layers();
        if self.w_x.len() != m || self.b.len() != m || self.w_y.len() + 1 != m.max(1) {
            return Err(IcnnError::Invalid("parameter list lengths do not chain".into()));
        }
        for i in 0..m {
            if self.w_x[i].nrows() != self.layer_widths[i + 1]
                || self.w_x[i].ncols() != self.layer_widths[0]
                || self.b[i].len() != self.layer_widths[i + 1]
            {
                return Err(IcnnError::Invalid(format!("layer {i} dimensions do not chain")));
            }
            if i >= 1
                && (self.w_y[i - 1].nrows() != self.layer_widths[i + 1]
                    || self.w_y[i - 1].ncols() != self.layer_widths[i])
            {
                return Err(IcnnError::Invalid(format!("W_y layer {i} dimensions do not chain")));
            }
        }
        if self.norm.input_shift.len() != self.input_dim()
            || self.norm.input_scale.len() != self.input_dim()
            || self.norm.target_scale.len() != self.output_dim()
        {
            return Err(IcnnError::Invalid("normalization dimensions do not match".into()));
        }
        if self.norm.input_scale.iter().any(|s| *s <= 0.0)
            || self.norm.target_scale.iter().any(|s| *s <= 0.0)
        {
            return Err(IcnnError::Invalid("normalization scales must be positive".into()));
        }
        if self.convex_mode {
            for (layer, w) in self.w_y.iter().enumerate() {
                if let Some(v) = w.iter().copied().find(|v| *v < 0.0) {
                    return Err(IcnnError::ConvexityViolated {
                        layer: layer + 1,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

/// Lifts a non-augmented model (layout `[x~; context]`) to the augmented
/// layout `[x~; -x~; context]` with zero weights on the `-x~` block; the
/// outputs are identical on all inputs.
pub fn embed_plain_in_augmented(model: &IcnnModel) -> Result<IcnnModel, IcnnError> {
    if model.augmented {
        return Err(IcnnError::Invalid("model is already augmented".into()));
    }
    let c = model.control_dim;
    let ctx = model.context_dim();
    let old_d = model.input_dim();
    let new_d = old_d + c;
    let expand = |w: &DMatrix<f64>| {
        DMatrix::from_fn(w.nrows(), new_d, |r, col| {
            if col < c {
                w[(r, col)]
            } else if col < 2 * c {
                0.0
            } else {
                w[(r, col - c)]
            }
        })
    };
    let expand_vec = |v: &[f64], fill_neg: bool| {
        let mut out = Vec::with_capacity(new_d);
        out.extend_from_slice(&v[..c]);
        out.extend(v[..c].iter().map(|s| if fill_neg { -s } else { *s }));
        out.extend_from_slice(&v[c..]);
        out
    };
    let mut widths = model.layer_widths.clone();
    widths[0] = new_d;
    let mut out = model.clone();
    out.layer_widths = widths;
    out.w_x = model.w_x.iter().map(expand).collect();
    out.augmented = true;
    out.norm = NormStats {
        // The -x~ block normalizes to the negated normalized x~; with zero
        // weights the choice is inert but keeps the layout meaningful.
        input_shift: expand_vec(&model.norm.input_shift, true),
        input_scale: expand_vec(&model.norm.input_scale, false),
        target_scale: model.norm.target_scale.clone(),
    };
    let _ = ctx;
    out.validate()?;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    layer_widths: Vec<usize>,
    beta: f64,
    convex_mode: bool,
    control_dim: usize,
    augmented: bool,
    norm: NormStats,
    /// Row-major weight matrices.
    w_y: Vec<Vec<Vec<f64>>>,
    w_x: Vec<Vec<Vec<f64>>>,
    b: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, IcnnError> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(IcnnError::Corrupt(format!("ragged rows in {what}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

/// Serializes a model to the versioned checkpoint document.
pub fn save_model(model: &IcnnModel) -> String {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        layer_widths: model.layer_widths.clone(),
        beta: model.beta,
        convex_mode: model.convex_mode,
        control_dim: model.control_dim,
        augmented: model.augmented,
        norm: model.norm.clone(),
        w_y: model.w_y.iter().map(to_rows).collect(),
        w_x: model.w_x.iter().map(to_rows).collect(),
        b: model.b.iter().map(|v| v.as_slice().to_vec()).collect(),
    };
    serde_json::to_string_pretty(&ckpt).expect("checkpoint serialization is infallible")
}

/// Parses and re-validates a checkpoint document, including the
/// nonnegativity invariant for convex-mode models.
pub fn load_model(text: &str) -> Result<IcnnModel, IcnnError> {
    let ckpt: Checkpoint =
        serde_json::from_str(text).map_err(|e| IcnnError::Corrupt(e.to_string()))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(IcnnError::VersionMismatch {
            got: ckpt.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let model = IcnnModel {
        layer_widths: ckpt.layer_widths,
        w_y: ckpt
            .w_y
            .iter()
            .map(|m| from_rows(m, "w_y"))
            .collect::<Result<_, _>>()?,
        w_x: ckpt
            .w_x
            .iter()
            .map(|m| from_rows(m, "w_x"))
            .collect::<Result<_, _>>()?,
        b: ckpt.b.iter().map(|v| DVector::from_vec(v.clone())).collect(),
        beta: ckpt.beta,
        convex_mode: ckpt.convex_mode,
        control_dim: ckpt.control_dim,
        augmented: ckpt.augmented,
        norm: ckpt.norm,
    };
    model.validate()?;
    Ok(model)
}
