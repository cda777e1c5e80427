//! Small dense feedforward policies with hand-rolled reverse-mode
//! differentiation, plus the Adam optimizer used to train them.
//!
//! Everything is double precision. The hot path works on blocks of `LANES`
//! samples at a time (structure-of-arrays: one `[f64; LANES]` per coordinate)
//! so the compiler can vectorize across samples; the scalar `forward` is a
//! convenience wrapper for evaluation and bindings.
//!
//! A forward pass through [`PolicyNetwork::forward_block`] records every
//! post-activation value in a [`NetScratch`]; [`PolicyNetwork::backward_block`]
//! replays that record to accumulate parameter and input gradients. Gradients
//! are exact for the implemented functions (checked against central finite
//! differences in the test suite).

use serde::{Deserialize, Serialize};

use crate::fastmath;
use crate::{Error, Result};

/// Samples processed per block; lane loops over `[f64; LANES]` vectorize.
pub const LANES: usize = 8;
/// One SoA register: the same coordinate for `LANES` consecutive samples.
pub type Lane = [f64; LANES];

pub const ZERO_LANE: Lane = [0.0; LANES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline(always)]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => fastmath::tanh(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the *output* value.
    #[inline(always)]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Final-layer range mapping.
///
/// `Box` squeezes each output through a scaled logistic so hard control
/// bounds hold for every finite input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    Identity,
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

/// Affine input normalization `u_k = (x_k - shift_k) * scale_k` applied before
/// the first layer. Networks train poorly on raw inputs whose magnitudes are
/// far from unit scale (the storage target grid sits near 120), so problem
/// builders set this per benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }
}

/// Dense feedforward map with one activation between affine layers.
///
/// Parameters are packed in a single flat vector:
/// `[W0 row-major (out x in), b0, W1, b1, ...]`, which keeps the optimizer
/// and checkpoint formats trivial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNetwork {
    input_dim: usize,
    output_dim: usize,
    /// (in, out) of each affine layer, chained.
    layer_dims: Vec<(usize, usize)>,
    params: Vec<f64>,
    activation: Activation,
    output_transform: OutputTransform,
    input_scaling: InputScaling,
}

impl PolicyNetwork {
    /// Zero-initialized network with the given hidden widths.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        output_transform: OutputTransform,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config("network dims must be positive".into()));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if let OutputTransform::Box { lo, hi } = &output_transform {
            if lo.len() != output_dim || hi.len() != output_dim {
                return Err(Error::Config("box bounds must match output dim".into()));
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                return Err(Error::Config("box bounds must satisfy lo < hi".into()));
            }
        }
        let mut layer_dims = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            layer_dims.push((prev, h));
            prev = h;
        }
        layer_dims.push((prev, output_dim));
        let n_params = layer_dims.iter().map(|&(i, o)| i * o + o).sum();
        Ok(Self {
            input_dim,
            output_dim,
            layer_dims,
            params: vec![0.0; n_params],
            activation,
            output_transform,
            input_scaling: InputScaling::identity(input_dim),
        })
    }

    pub fn with_input_scaling(mut self, scaling: InputScaling) -> Result<Self> {
        if scaling.shift.len() != self.input_dim || scaling.scale.len() != self.input_dim {
            return Err(Error::Config("input scaling dims mismatch".into()));
        }
        self.input_scaling = scaling;
        Ok(self)
    }

    /// Uniform init scaled by fan-in, `U(-1/sqrt(in), 1/sqrt(in))`; biases zero.
    pub fn init_uniform<R: rand::Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut off = 0;
        for &(inp, out) in &self.layer_dims {
            let limit = (inp as f64).sqrt().recip();
            for w in &mut self.params[off..off + inp * out] {
                *w = rng.random_range(-limit..limit);
            }
            off += inp * out + out;
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layer_dims(&self) -> &[(usize, usize)] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_transform(&self) -> &OutputTransform {
        &self.output_transform
    }

    pub fn input_scaling(&self) -> &InputScaling {
        &self.input_scaling
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Widest intermediate vector, used to size scratch buffers.
    pub fn max_width(&self) -> usize {
        self.layer_dims
            .iter()
            .flat_map(|&(i, o)| [i, o])
            .max()
            .unwrap_or(0)
    }

    /// Single-sample forward pass with dimension and finiteness checks.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let mut scratch = NetScratch::new(self);
        let mut input = vec![ZERO_LANE; self.input_dim];
        for (row, &v) in input.iter_mut().zip(x) {
            row[0] = v;
        }
        self.forward_block(&input, &mut scratch);
        Ok(scratch.output().iter().map(|lane| lane[0]).collect())
    }

    /// Block forward pass; records all post-activation values in `scratch`.
    ///
    /// `input` holds `input_dim` lanes (raw, unscaled). The output lives in
    /// `scratch.output()`.
    pub fn forward_block(&self, input: &[Lane], scratch: &mut NetScratch) {
        debug_assert_eq!(input.len(), self.input_dim);
        // Scaled input is recorded as level 0.
        for (k, row) in scratch.acts[0].iter_mut().enumerate() {
            let shift = self.input_scaling.shift[k];
            let scale = self.input_scaling.scale[k];
            for l in 0..LANES {
                row[l] = (input[k][l] - shift) * scale;
            }
        }
        let n_layers = self.layer_dims.len();
        let mut off = 0;
        for (li, &(inp, out)) in self.layer_dims.iter().enumerate() {
            let w = &self.params[off..off + inp * out];
            let b = &self.params[off + inp * out..off + inp * out + out];
            off += inp * out + out;
            let (src, dst) = scratch.level_pair(li);
            let hidden = li + 1 < n_layers;
            for o in 0..out {
                let mut acc = [b[o]; LANES];
                let wrow = &w[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    let wv = wrow[i];
                    for l in 0..LANES {
                        acc[l] = wv.mul_add(src[i][l], acc[l]);
                    }
                }
                if hidden {
                    for v in &mut acc {
                        *v = self.activation.apply(*v);
                    }
                }
                dst[o] = acc;
            }
        }
        if let OutputTransform::Box { lo, hi } = &self.output_transform {
            let y = scratch.output_mut(n_layers);
            for o in 0..self.output_dim {
                let (l0, h0) = (lo[o], hi[o]);
                let width = h0 - l0;
                for l in 0..LANES {
                    y[o][l] = l0 + width * fastmath::sigmoid(y[o][l]);
                }
            }
        }
    }

    /// Reverse sweep for one recorded block.
    ///
    /// `d_output` is dL/d(output) per lane; masked lanes must carry zeros.
    /// Parameter gradients accumulate into `d_params` (summed over lanes);
    /// input gradients accumulate into `d_input`.
    pub fn backward_block(
        &self,
        scratch: &NetScratch,
        d_output: &[Lane],
        d_params: &mut [f64],
        d_input: &mut [Lane],
    ) {
        debug_assert_eq!(d_output.len(), self.output_dim);
        debug_assert_eq!(d_params.len(), self.params.len());
        debug_assert_eq!(d_input.len(), self.input_dim);
        let n_layers = self.layer_dims.len();

        let mut d_cur = [ZERO_LANE; MAX_WIDTH];
        let mut d_next = [ZERO_LANE; MAX_WIDTH];
        // Through the output transform.
        match &self.output_transform {
            OutputTransform::Identity => {
                d_cur[..self.output_dim].copy_from_slice(d_output);
            }
            OutputTransform::Box { lo, hi } => {
                let y = scratch.output();
                for o in 0..self.output_dim {
                    let width = hi[o] - lo[o];
                    for l in 0..LANES {
                        // s recovers the logistic value from the stored output.
                        let s = (y[o][l] - lo[o]) / width;
                        d_cur[o][l] = d_output[o][l] * width * s * (1.0 - s);
                    }
                }
            }
        }

        let mut off_end = self.params.len();
        for li in (0..n_layers).rev() {
            let (inp, out) = self.layer_dims[li];
            let off = off_end - (inp * out + out);
            let src = scratch.level(li);
            let dst = scratch.level(li + 1);
            let hidden = li + 1 < n_layers;
            // Activation derivative (post-activation values are stored).
            if hidden {
                for o in 0..out {
                    for l in 0..LANES {
                        d_cur[o][l] *= self.activation.grad_from_output(dst[o][l]);
                    }
                }
            }
            let dw = &mut d_params[off..off + inp * out];
            for i in 0..inp {
                d_next[i] = ZERO_LANE;
            }
            let w = &self.params[off..off + inp * out];
            for o in 0..out {
                let wrow = &w[o * inp..(o + 1) * inp];
                let dwrow = &mut dw[o * inp..(o + 1) * inp];
                let dpre = d_cur[o];
                for i in 0..inp {
                    let mut sum = 0.0;
                    for l in 0..LANES {
                        sum = dpre[l].mul_add(src[i][l], sum);
                        d_next[i][l] = wrow[i].mul_add(dpre[l], d_next[i][l]);
                    }
                    dwrow[i] += sum;
                }
            }
            let db = &mut d_params[off + inp * out..off + inp * out + out];
            for o in 0..out {
                let mut sum = 0.0;
                for l in 0..LANES {
                    sum += d_cur[o][l];
                }
                db[o] += sum;
            }
            std::mem::swap(&mut d_cur, &mut d_next);
            off_end = off;
        }
        // Undo the input scaling.
        for k in 0..self.input_dim {
            let scale = self.input_scaling.scale[k];
            for l in 0..LANES {
                d_input[k][l] += d_cur[k][l] * scale;
            }
        }
    }
}

/// Hard cap on layer width; keeps backward scratch on the stack.
pub const MAX_WIDTH: usize = 64;

/// Recorded activations for one block forward pass.
#[derive(Debug, Clone)]
pub struct NetScratch {
    /// `acts[0]` is the scaled input, `acts[li+1]` the output of layer `li`
    /// (post-activation for hidden layers, post-transform for the last).
    acts: Vec<Vec<Lane>>,
}

impl NetScratch {
    pub fn new(net: &PolicyNetwork) -> Self {
        assert!(
            net.max_width() <= MAX_WIDTH,
            "layer width above MAX_WIDTH ({MAX_WIDTH})"
        );
        let mut acts = Vec::with_capacity(net.layer_dims.len() + 1);
        acts.push(vec![ZERO_LANE; net.input_dim]);
        for &(_, out) in &net.layer_dims {
            acts.push(vec![ZERO_LANE; out]);
        }
        Self { acts }
    }

    fn level_pair(&mut self, li: usize) -> (&[Lane], &mut [Lane]) {
        let (head, tail) = self.acts.split_at_mut(li + 1);
        (&head[li], &mut tail[0])
    }

    fn output_mut(&mut self, n_layers: usize) -> &mut [Lane] {
        &mut self.acts[n_layers]
    }

    pub fn output(&self) -> &[Lane] {
        self.acts.last().expect("scratch has levels")
    }
}

impl NetScratch {
    fn level(&self, idx: usize) -> &[Lane] {
        &self.acts[idx]
    }
}

/// Adam hyperparameters. Defaults follow the common `(0.9, 0.999, 1e-8)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for one flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub hyper: AdamParams,
}

impl AdamState {
    pub fn new(n_params: usize, hyper: AdamParams) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, `t <- t+1`,
/// `p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
///
/// `lr_scale` multiplies the base learning rate (used for schedules).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr_scale: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            got: grads.len(),
        });
    }
    let h = state.hyper;
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    let lr = h.learning_rate * lr_scale;
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = h.beta1 * state.m[k] + (1.0 - h.beta1) * g;
        state.v[k] = h.beta2 * state.v[k] + (1.0 - h.beta2) * g * g;
        let mhat = state.m[k] / bc1;
        let vhat = state.v[k] / bc2;
        params[k] -= lr * mhat / (vhat.sqrt() + h.epsilon);
    }
    Ok(())
}
