//! Dense-network engine: fully connected layers, exact reverse-mode
//! gradients, Adam, and a finite-difference gradient checker.
//!
//! Everything is `f64` and single-threaded so that a fixed seed gives
//! bit-identical parameters, activations, and updates on every run. Gradients
//! are flattened in a fixed enumeration order (per layer: weights row-major,
//! then biases) which is also the order checkpoints store parameters in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, UltraError};

/// Step size used by [`grad_check`] central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative w.r.t. the pre-activation, given both the pre-activation
    /// and the already-computed output. ReLU uses subgradient 0 at z = 0.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// One fully connected layer: `out = act(W x + b)`, weights row-major
/// `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(UltraError::invalid("layer dimensions must be nonzero"));
        }
        if weights.len() != in_dim * out_dim {
            return Err(UltraError::mismatch(
                "layer weights",
                in_dim * out_dim,
                weights.len(),
            ));
        }
        if bias.len() != out_dim {
            return Err(UltraError::mismatch("layer bias", out_dim, bias.len()));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(UltraError::NonFinite {
                what: "layer parameters".into(),
            });
        }
        Ok(DenseLayer {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward_into(&self, input: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        pre.clear();
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            pre.push(acc);
            out.push(self.activation.apply(acc));
        }
    }
}

/// A stack of dense layers with matching inner dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(UltraError::empty("layer stack"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(UltraError::mismatch(
                    "adjacent layer dimensions",
                    w[0].out_dim,
                    w[1].in_dim,
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Appends all parameters in enumeration order.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
    }

    /// Overwrites all parameters from a flat slice in enumeration order;
    /// returns how many values were consumed.
    pub fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let need = self.param_count();
        if src.len() < need {
            return Err(UltraError::mismatch("parameter slice", need, src.len()));
        }
        let mut pos = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&src[pos..pos + nw]);
            pos += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&src[pos..pos + nb]);
            pos += nb;
        }
        Ok(need)
    }

    /// Single parameter by flat index.
    pub fn param(&self, mut index: usize) -> Result<f64> {
        for layer in &self.layers {
            if index < layer.weights.len() {
                return Ok(layer.weights[index]);
            }
            index -= layer.weights.len();
            if index < layer.bias.len() {
                return Ok(layer.bias[index]);
            }
            index -= layer.bias.len();
        }
        Err(UltraError::invalid(format!(
            "parameter index out of range (count {})",
            self.param_count()
        )))
    }

    pub fn set_param(&mut self, mut index: usize, value: f64) -> Result<()> {
        for layer in &mut self.layers {
            if index < layer.weights.len() {
                layer.weights[index] = value;
                return Ok(());
            }
            index -= layer.weights.len();
            if index < layer.bias.len() {
                layer.bias[index] = value;
                return Ok(());
            }
            index -= layer.bias.len();
        }
        Err(UltraError::invalid(format!(
            "parameter index out of range (count {})",
            self.param_count()
        )))
    }
}

/// He-initialized network: weights drawn `N(0, 2 / in_dim)` with a
/// ChaCha8 stream seeded by `seed`, biases zero. The draw order is layer by
/// layer, weights row-major, so a given seed always yields bit-identical
/// parameters.
pub fn init_mlp(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Mlp> {
    if dims.len() < 2 {
        return Err(UltraError::invalid(format!(
            "network needs at least an input and an output dimension, got {} dims",
            dims.len()
        )));
    }
    if activations.len() != dims.len() - 1 {
        return Err(UltraError::mismatch(
            "activations vs layers",
            dims.len() - 1,
            activations.len(),
        ));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(UltraError::invalid("layer dimensions must be nonzero"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(activations.len());
    for (l, &act) in activations.iter().enumerate() {
        let (nin, nout) = (dims[l], dims[l + 1]);
        let std = (2.0 / nin as f64).sqrt();
        let weights: Vec<f64> = (0..nin * nout)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        layers.push(DenseLayer::new(nin, nout, act, weights, vec![0.0; nout])?);
    }
    Mlp::new(layers)
}

/// Per-layer values cached by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GradientTape {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl GradientTape {
    /// Smallest `|pre-activation|` recorded anywhere in the pass. Finite
    /// differences are only trustworthy when this is comfortably larger
    /// than the probe step, since ReLU is non-differentiable at zero.
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.pre_activations
            .iter()
            .flatten()
            .map(|z| z.abs())
            .fold(f64::INFINITY, f64::min)
    }

    fn matches(&self, net: &Mlp) -> bool {
        self.inputs.len() == net.layers.len()
            && net.layers.iter().enumerate().all(|(l, layer)| {
                self.inputs[l].len() == layer.in_dim
                    && self.pre_activations[l].len() == layer.out_dim
            })
    }
}

/// Runs the network on one input vector, returning the output and the tape
/// needed to backpropagate through this exact call.
pub fn forward(net: &Mlp, input: &[f64]) -> Result<(Vec<f64>, GradientTape)> {
    if input.len() != net.in_dim() {
        return Err(UltraError::mismatch(
            "network input",
            net.in_dim(),
            input.len(),
        ));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(UltraError::NonFinite {
            what: "network input".into(),
        });
    }
    let mut tape = GradientTape {
        inputs: Vec::with_capacity(net.layers.len()),
        pre_activations: Vec::with_capacity(net.layers.len()),
        outputs: Vec::with_capacity(net.layers.len()),
    };
    let mut x = input.to_vec();
    for layer in &net.layers {
        let mut pre = Vec::new();
        let mut out = Vec::new();
        layer.forward_into(&x, &mut pre, &mut out);
        tape.inputs.push(x);
        tape.pre_activations.push(pre);
        tape.outputs.push(out.clone());
        x = out;
    }
    Ok((x, tape))
}

/// Exact reverse-mode gradients for a single forward call.
///
/// Returns `(param_grads, input_grad)` with `param_grads` flattened in the
/// same enumeration order as [`Mlp::write_params`]. The tape must come from
/// a [`forward`] call on a structurally identical network; anything else is
/// rejected as stale.
pub fn backward(
    net: &Mlp,
    tape: &GradientTape,
    output_grad: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !tape.matches(net) {
        return Err(UltraError::invalid(
            "gradient tape does not match this network (stale or from another net)",
        ));
    }
    if output_grad.len() != net.out_dim() {
        return Err(UltraError::mismatch(
            "output gradient",
            net.out_dim(),
            output_grad.len(),
        ));
    }

    let mut param_grads = vec![0.0; net.param_count()];
    // Offsets of each layer's slice in the flat enumeration.
    let mut offsets = Vec::with_capacity(net.layers.len());
    let mut pos = 0;
    for layer in &net.layers {
        offsets.push(pos);
        pos += layer.param_count();
    }

    let mut delta: Vec<f64> = output_grad.to_vec();
    for (l, layer) in net.layers.iter().enumerate().rev() {
        let pre = &tape.pre_activations[l];
        let out = &tape.outputs[l];
        let input = &tape.inputs[l];
        // Fold the activation derivative into delta.
        for o in 0..layer.out_dim {
            delta[o] *= layer.activation.derivative(pre[o], out[o]);
        }
        let base = offsets[l];
        let wlen = layer.weights.len();
        for o in 0..layer.out_dim {
            let d = delta[o];
            let row = base + o * layer.in_dim;
            for i in 0..layer.in_dim {
                param_grads[row + i] = d * input[i];
            }
            param_grads[base + wlen + o] = d;
        }
        // Gradient w.r.t. this layer's input becomes the next delta.
        let mut prev = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            let d = delta[o];
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for i in 0..layer.in_dim {
                prev[i] += row[i] * d;
            }
        }
        delta = prev;
    }
    Ok((param_grads, delta))
}

/// Adam optimizer state over a flat parameter vector.
///
/// `lr` is the step size actually applied; the caller re-sets it from the
/// schedule each epoch. `lr = 0` is allowed and makes the step a no-op,
/// which the determinism tests rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Result<Self> {
        AdamState::with_hyperparams(param_count, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(
        param_count: usize,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(UltraError::invalid(format!(
                "learning rate must be nonnegative and finite, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(UltraError::invalid(
                "Adam betas must lie in [0, 1)".to_string(),
            ));
        }
        if !eps.is_finite() || eps <= 0.0 {
            return Err(UltraError::invalid(format!(
                "Adam epsilon must be positive, got {eps}"
            )));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        })
    }

    /// Rebuild saved state (checkpoint restore).
    pub fn from_parts(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Vec<f64>,
        v: Vec<f64>,
    ) -> Result<Self> {
        if m.len() != v.len() {
            return Err(UltraError::mismatch("Adam moment vectors", m.len(), v.len()));
        }
        let mut s = AdamState::with_hyperparams(m.len(), lr, beta1, beta2, eps)?;
        s.t = t;
        s.m = m;
        s.v = v;
        Ok(s)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn param_count(&self) -> usize {
        self.m.len()
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// One Adam update, in place:
/// `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`,
/// `p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(UltraError::mismatch(
            "Adam parameters vs state",
            state.m.len(),
            params.len(),
        ));
    }
    if grads.len() != params.len() {
        return Err(UltraError::mismatch(
            "Adam gradients vs parameters",
            params.len(),
            grads.len(),
        ));
    }
    state.t += 1;
    debug_assert!(state.t < i32::MAX as u64);
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Step-decayed learning rate: one decade down every 100 epochs.
pub fn lr_schedule(base_lr: f64, epoch: usize) -> f64 {
    base_lr * 0.1f64.powi((epoch / 100) as i32)
}

/// Relative error with an absolute fallback for near-zero pairs, the usual
/// yardstick for finite-difference checks.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares [`backward`] against central finite differences of
/// `loss(forward(net, input))` over every parameter.
///
/// `loss` maps the network output to a scalar; `loss_grad` is its analytic
/// gradient w.r.t. that output. Step size is [`GRAD_CHECK_STEP`]. Valid only
/// where the network is differentiable; near a ReLU kink the two sides of
/// the difference straddle the fold and the comparison is meaningless.
pub fn grad_check<L, G>(
    net: &Mlp,
    input: &[f64],
    loss: L,
    loss_grad: G,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(tolerance > 0.0) {
        return Err(UltraError::invalid("tolerance must be positive"));
    }
    let (out, tape) = forward(net, input)?;
    let base = loss(&out);
    if !base.is_finite() {
        return Err(UltraError::NonFinite {
            what: "loss at base point".into(),
        });
    }
    let og = loss_grad(&out);
    if og.len() != out.len() {
        return Err(UltraError::mismatch("loss gradient", out.len(), og.len()));
    }
    let (analytic, _) = backward(net, &tape, &og)?;

    let mut work = net.clone();
    let h = GRAD_CHECK_STEP;
    let mut worst = 0usize;
    let mut max_err = 0.0f64;
    for idx in 0..net.param_count() {
        let theta = work.param(idx)?;
        work.set_param(idx, theta + h)?;
        let (o1, _) = forward(&work, input)?;
        let l1 = loss(&o1);
        work.set_param(idx, theta - h)?;
        let (o2, _) = forward(&work, input)?;
        let l2 = loss(&o2);
        work.set_param(idx, theta)?;
        if !l1.is_finite() || !l2.is_finite() {
            return Err(UltraError::NonFinite {
                what: "loss at perturbed point".into(),
            });
        }
        let numeric = (l1 - l2) / (2.0 * h);
        let err = rel_error(analytic[idx], numeric);
        if err > max_err {
            max_err = err;
            worst = idx;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        worst_param: worst,
        tolerance,
    })
}
