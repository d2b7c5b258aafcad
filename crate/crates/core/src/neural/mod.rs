//! Fully connected networks over a flat parameter vector, with analytic
//! backpropagation, input gradients, a double-backprop gradient penalty and Adam.

mod adam;
mod checkpoint;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("input has {got} columns, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("backward called without a cached train-mode forward pass")]
    NoCachedForward,
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("gradient contains a non-finite value")]
    NonFiniteGradient,
    #[error("input gradient needs a scalar output, network has {0} outputs")]
    NonScalarOutput(usize),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint is not a romgait checkpoint")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint has no entry named {0:?}")]
    MissingEntry(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(a) => {
                if z > 0.0 {
                    z
                } else {
                    a * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if z > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }

    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            _ => 0.0,
        }
    }

    fn is_piecewise_linear(self) -> bool {
        !matches!(self, Activation::Tanh)
    }
}

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
    /// Dropout probability applied after the activation in train mode.
    #[serde(default)]
    pub dropout: f64,
}

/// Layer sizes and activations; the output layer is always linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], activation: Activation, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.iter().map(|&width| HiddenLayer { width, activation, dropout: 0.0 }).collect(),
            output_dim,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        for h in &mut self.hidden {
            h.dropout = p;
        }
        self
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|h| h.width == 0) {
            return Err(NeuralError::InvalidSpec("all layer dimensions must be >= 1".into()));
        }
        if let Some(h) = self.hidden.iter().find(|h| !(0.0..1.0).contains(&h.dropout)) {
            return Err(NeuralError::InvalidSpec(format!("dropout {} outside [0, 1)", h.dropout)));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(self.hidden.iter().map(|h| h.width));
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Orthogonal weights scaled by a gain, separately for hidden and output layers.
    Orthogonal { hidden_gain: f64, output_gain: f64 },
    /// `U(−√(6/fan_in), √(6/fan_in))` weights.
    UniformFanIn,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Slot {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
    slots: Vec<Slot>,
}

/// Cached activations of a forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Input of every affine layer (after dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

impl Trace {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct PenaltyTerm {
    /// Mean of `(‖∇_x f‖ − 1)²` over the batch.
    pub value: f64,
    /// Mean of `|‖∇_x f‖ − 1|` over the batch.
    pub mean_abs_gap: f64,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Result<Self, NeuralError> {
        spec.validate()?;
        let mut slots = Vec::new();
        let mut offset = 0;
        for (fan_in, fan_out) in spec.layer_dims() {
            let weights = offset;
            let bias = weights + fan_in * fan_out;
            offset = bias + fan_out;
            slots.push(Slot { fan_in, fan_out, weights, bias });
        }
        Ok(Self { spec, params: vec![0.0; offset], slots })
    }

    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, init: Init, rng: &mut R) -> Result<Self, NeuralError> {
        let mut net = Self::zeros(spec)?;
        let last = net.slots.len() - 1;
        for (l, slot) in net.slots.clone().into_iter().enumerate() {
            let w = &mut net.params[slot.weights..slot.bias];
            match init {
                Init::Zero => {}
                Init::UniformFanIn => {
                    let bound = (6.0 / slot.fan_in as f64).sqrt();
                    w.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                Init::Orthogonal { hidden_gain, output_gain } => {
                    let gain = if l == last { output_gain } else { hidden_gain };
                    let q = orthogonal(slot.fan_in, slot.fan_out, rng);
                    for (dst, src) in w.iter_mut().zip(q.iter()) {
                        *dst = gain * src;
                    }
                }
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NeuralError> {
        if params.len() != self.params.len() {
            return Err(NeuralError::ShapeMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Offsets `(weights, bias, end)` of layer `l` in the flat parameter vector.
    pub fn layer_range(&self, l: usize) -> (usize, usize, usize) {
        let s = self.slots[l];
        (s.weights, s.bias, s.bias + s.fan_out)
    }

    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let s = self.slots[l];
        ArrayView2::from_shape((s.fan_in, s.fan_out), &self.params[s.weights..s.bias]).unwrap()
    }

    fn bias(&self, l: usize) -> ndarray::ArrayView1<'_, f64> {
        let s = self.slots[l];
        ndarray::ArrayView1::from(&self.params[s.bias..s.bias + s.fan_out])
    }

    fn activation(&self, l: usize) -> Activation {
        self.spec.hidden[l].activation
    }

    fn check_input(&self, cols: usize) -> Result<(), NeuralError> {
        if cols != self.spec.input_dim {
            return Err(NeuralError::DimensionMismatch { expected: self.spec.input_dim, got: cols });
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights(l));
        z += &self.bias(l);
        z
    }

    /// Evaluation-mode forward pass of a batch (rows are samples).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        for l in 0..self.slots.len() {
            let mut z = self.affine(l, &a.view());
            if l < self.spec.hidden.len() {
                let act = self.activation(l);
                z.mapv_inplace(|v| act.apply(v));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that caches what [`Mlp::backward`] needs. Dropout masks
    /// are drawn from `rng` in train mode only.
    pub fn forward_trace<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Trace), NeuralError> {
        self.check_input(x.ncols())?;
        let mut trace = Trace::default();
        let mut a = x.to_owned();
        for l in 0..self.slots.len() {
            let z = self.affine(l, &a.view());
            trace.inputs.push(a);
            if l == self.spec.hidden.len() {
                return Ok((z, trace));
            }
            let layer = self.spec.hidden[l];
            let mut h = z.mapv(|v| layer.activation.apply(v));
            trace.pre.push(z);
            let mask = if mode == Mode::Train && layer.dropout > 0.0 {
                let keep = 1.0 - layer.dropout;
                let m = Array2::from_shape_fn(h.raw_dim(), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                h *= &m;
                Some(m)
            } else {
                None
            };
            trace.masks.push(mask);
            a = h;
        }
        unreachable!("output layer returns inside the loop")
    }

    /// Single-sample forward; train mode draws dropout masks from `noise_seed`.
    pub fn forward_with_seed(&self, x: &[f64], mode: Mode, noise_seed: u64) -> Result<Vec<f64>, NeuralError> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let (y, _) = self.forward_trace(view, mode, &mut rng)?;
        Ok(y.into_raw_vec_and_offset().0)
    }

    /// Gradients of `Σ_batch ⟨grad_out, f(x)⟩` with respect to parameters and inputs.
    pub fn backward(&self, trace: &Trace, grad_out: ArrayView2<f64>) -> Result<Gradients, NeuralError> {
        let n = self.slots.len();
        if trace.inputs.len() != n {
            return Err(NeuralError::NoCachedForward);
        }
        let batch = trace.inputs[0].nrows();
        if grad_out.nrows() != batch || grad_out.ncols() != self.spec.output_dim {
            return Err(NeuralError::ShapeMismatch {
                expected: batch * self.spec.output_dim,
                got: grad_out.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.to_owned();
        for l in (0..n).rev() {
            let s = self.slots[l];
            let dw = trace.inputs[l].t().dot(&delta);
            for (dst, v) in grads[s.weights..s.bias].iter_mut().zip(dw.iter()) {
                *dst = *v;
            }
            let db = delta.sum_axis(Axis(0));
            for (dst, v) in grads[s.bias..s.bias + s.fan_out].iter_mut().zip(db.iter()) {
                *dst = *v;
            }
            let mut da = delta.dot(&self.weights(l).t());
            if l == 0 {
                return Ok(Gradients { params: grads, input: da });
            }
            if let Some(m) = &trace.masks[l - 1] {
                da *= m;
            }
            let act = self.activation(l - 1);
            ndarray::Zip::from(&mut da).and(&trace.pre[l - 1]).for_each(|d, &z| *d *= act.derivative(z));
            delta = da;
        }
        unreachable!("loop returns at the input layer")
    }

    /// `∂f/∂x` of a scalar-output network at one input, evaluation mode.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.input_gradients(view)?.into_raw_vec_and_offset().0)
    }

    /// Row-wise `∂f/∂x` of a scalar-output network, evaluation mode.
    pub fn input_gradients(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        if self.spec.output_dim != 1 {
            return Err(NeuralError::NonScalarOutput(self.spec.output_dim));
        }
        let (_, trace) = self.forward_trace(x, Mode::Eval, &mut unused_rng())?;
        let ones = Array2::ones((x.nrows(), 1));
        Ok(self.backward(&trace, ones.view())?.input)
    }

    /// Batch mean of `(‖∇_x f(x)‖ − 1)²` and its gradient with respect to the
    /// parameters, by reverse-mode differentiation through the input-gradient
    /// computation. Evaluation mode, scalar output.
    pub fn input_gradient_penalty(&self, x: ArrayView2<f64>) -> Result<PenaltyTerm, NeuralError> {
        if self.spec.output_dim != 1 {
            return Err(NeuralError::NonScalarOutput(self.spec.output_dim));
        }
        let (_, trace) = self.forward_trace(x, Mode::Eval, &mut unused_rng())?;
        let n = self.slots.len();
        let batch = x.nrows();

        // input-gradient chain: δ_{n−1} = 1, u_k = δ_k W_kᵀ, δ_{k−1} = u_k ⊙ σ'(z_{k−1})
        let mut deltas: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); n];
        let mut us: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); n];
        let mut slopes: Vec<Array2<f64>> = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let act = self.activation(k);
            slopes.push(trace.pre[k].mapv(|z| act.derivative(z)));
        }
        deltas[n - 1] = Array2::ones((batch, 1));
        for k in (0..n).rev() {
            us[k] = deltas[k].dot(&self.weights(k).t());
            if k > 0 {
                deltas[k - 1] = &us[k] * &slopes[k - 1];
            }
        }
        let g = &us[0];
        let norms: Array1<f64> = g.map_axis(Axis(1), |row| row.dot(&row).sqrt());
        let gaps = norms.mapv(|v| v - 1.0);
        let value = gaps.mapv(|v| v * v).mean().unwrap_or(0.0);
        let mean_abs_gap = gaps.mapv(f64::abs).mean().unwrap_or(0.0);

        // adjoint of the chain, seeded with ∂value/∂g
        let mut grads = vec![0.0; self.params.len()];
        let mut u_bar = Array2::zeros(g.raw_dim());
        for (b, mut row) in u_bar.rows_mut().into_iter().enumerate() {
            if norms[b] > 0.0 {
                let scale = 2.0 * gaps[b] / (norms[b] * batch as f64);
                row.assign(&(&g.row(b) * scale));
            }
        }
        let mut injected: Vec<Option<Array2<f64>>> = vec![None; n];
        for k in 0..n {
            let s = self.slots[k];
            let dw = u_bar.t().dot(&deltas[k]);
            let w_grad = &mut grads[s.weights..s.bias];
            for (dst, v) in w_grad.iter_mut().zip(dw.iter()) {
                *dst += v;
            }
            if k == n - 1 {
                break;
            }
            let delta_bar = u_bar.dot(&self.weights(k));
            let act = self.activation(k);
            if !act.is_piecewise_linear() {
                let mut z_bar = &delta_bar * &us[k + 1];
                ndarray::Zip::from(&mut z_bar).and(&trace.pre[k]).for_each(|v, &z| *v *= act.second_derivative(z));
                injected[k] = Some(z_bar);
            }
            u_bar = &delta_bar * &slopes[k];
        }

        // the σ'' terms flow back through the forward pass
        if let Some(top) = injected.iter().rposition(Option::is_some) {
            let mut zeta = injected[top].clone().unwrap();
            let mut k = top;
            loop {
                let s = self.slots[k];
                let dw = trace.inputs[k].t().dot(&zeta);
                for (dst, v) in grads[s.weights..s.bias].iter_mut().zip(dw.iter()) {
                    *dst += v;
                }
                let db = zeta.sum_axis(Axis(0));
                for (dst, v) in grads[s.bias..s.bias + s.fan_out].iter_mut().zip(db.iter()) {
                    *dst += v;
                }
                if k == 0 {
                    break;
                }
                let mut next = zeta.dot(&self.weights(k).t()) * &slopes[k - 1];
                if let Some(inj) = &injected[k - 1] {
                    next += inj;
                }
                zeta = next;
                k -= 1;
            }
        }
        Ok(PenaltyTerm { value, mean_abs_gap, params: grads })
    }

    /// `self ← τ·source + (1 − τ)·self`.
    pub fn polyak_from(&mut self, source: &Mlp, tau: f64) -> Result<(), NeuralError> {
        if source.params.len() != self.params.len() {
            return Err(NeuralError::ShapeMismatch { expected: self.params.len(), got: source.params.len() });
        }
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
        Ok(())
    }
}

/// Eval-mode passes draw no randomness; any generator will do.
pub(crate) fn unused_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

/// Gather rows `idx` of a batch into a new array.
pub fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (mut dst, &i) in out.rows_mut().into_iter().zip(idx) {
        dst.assign(&x.slice(s![i, ..]));
    }
    out
}

/// `rows × cols` matrix with orthonormal rows or columns (whichever is fewer).
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let (n, k) = (rows.max(cols), rows.min(cols));
    loop {
        let mut q = Array2::<f64>::zeros((k, n));
        let mut ok = true;
        for i in 0..k {
            let mut v: Array1<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            // two Gram-Schmidt passes for numerical orthogonality
            for _ in 0..2 {
                for j in 0..i {
                    let proj = v.dot(&q.row(j));
                    v.scaled_add(-proj, &q.row(j));
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.row_mut(i).assign(&(v / norm));
        }
        if ok {
            return if rows >= cols { q.reversed_axes().as_standard_layout().to_owned() } else { q };
        }
    }
}
