//! Minimal reverse-mode differentiation for multilayer perceptrons.
//!
//! Exactly two things are provided: a deterministic forward pass and a
//! vector-Jacobian product with respect to parameters *and* input. The
//! gradient with respect to the input is not an extra; the reparameterization
//! trick needs ∇_z of downstream objectives, so both paths get the same
//! finite-difference scrutiny.
//!
//! There is no expression graph. Differentiation is a layer-wise backward
//! sweep over the recorded forward trace, which is all an MLP needs and keeps
//! the surface small enough to verify exhaustively. All arithmetic is `f64`;
//! the 1e-4 gradient-check tolerance is not attainable in single precision.

use thiserror::Error;

use crate::numkit::{RngStream, Vector};

#[derive(Debug, Error)]
pub enum DiffnetError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// tanh hidden units, linear output layer.
    Tanh,
    /// softplus hidden units, linear output layer.
    Softplus,
}

/// Bounds for log-variance outputs wherever a network produces one. The
/// network itself stays unconstrained; consumers clamp at the use site.
/// Range [-10, 10] keeps variances within [4.5e-5, 2.2e4].
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Clamps a raw log-variance output; the flag reports saturation so callers
/// can keep a warning counter.
pub fn clamp_log_var(raw: f64) -> (f64, bool) {
    if raw < LOG_VAR_MIN {
        (LOG_VAR_MIN, true)
    } else if raw > LOG_VAR_MAX {
        (LOG_VAR_MAX, true)
    } else {
        (raw, false)
    }
}

/// Network topology: layer sizes from input to output, the hidden activation,
/// and an optional split of the output into (mean, log-variance) heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
    head_split: Option<(usize, usize)>,
}

impl MlpSpec {
    pub fn new(layer_sizes: &[usize], activation: Activation) -> Result<Self, DiffnetError> {
        if layer_sizes.len() < 2 {
            return Err(DiffnetError::Spec(
                "need at least one layer (two size entries)".into(),
            ));
        }
        if layer_sizes.iter().any(|s| *s == 0) {
            return Err(DiffnetError::Spec("zero-width layer".into()));
        }
        Ok(MlpSpec {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            head_split: None,
        })
    }

    /// Spec whose output is split into a mean head and a log-variance head.
    pub fn with_heads(
        layer_sizes: &[usize],
        activation: Activation,
        mean_size: usize,
        log_var_size: usize,
    ) -> Result<Self, DiffnetError> {
        let mut spec = MlpSpec::new(layer_sizes, activation)?;
        if mean_size + log_var_size != spec.output_size() {
            return Err(DiffnetError::Spec(format!(
                "head sizes {mean_size}+{log_var_size} must sum to output size {}",
                spec.output_size()
            )));
        }
        spec.head_split = Some((mean_size, log_var_size));
        Ok(spec)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head_split(&self) -> Option<(usize, usize)> {
        self.head_split
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Flat parameter count: Σ (fan_in + 1) · fan_out.
    pub fn param_len(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }
}

/// Flat parameter vector tied to its topology. Layout per layer: row-major
/// weight matrix (fan_out × fan_in), then biases.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    values: Vector,
}

impl MlpParams {
    pub fn new(spec: MlpSpec, values: Vector) -> Result<Self, DiffnetError> {
        if values.len() != spec.param_len() {
            return Err(DiffnetError::Dim(format!(
                "expected {} parameters, got {}",
                spec.param_len(),
                values.len()
            )));
        }
        Ok(MlpParams { spec, values })
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let n = spec.param_len();
        MlpParams {
            spec,
            values: Vector::zeros(n),
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn values(&self) -> &Vector {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Vector {
        &mut self.values
    }

    /// Same topology, new values.
    pub fn with_values(&self, values: Vector) -> Result<Self, DiffnetError> {
        MlpParams::new(self.spec.clone(), values)
    }
}

/// Glorot-style initialization: weights ~ N(0, 2/(fan_in+fan_out)), biases 0.
pub fn init_params(spec: &MlpSpec, rng: &mut RngStream) -> MlpParams {
    let mut values = Vector::zeros(spec.param_len());
    let mut off = 0;
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values[off] = sd * rng.standard_normal();
            off += 1;
        }
        off += fan_out; // biases stay zero
    }
    MlpParams {
        spec: spec.clone(),
        values,
    }
}

fn apply_activation(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Tanh => x.tanh(),
        // Stable softplus: for large x, ln(1+e^x) = x + ln(1+e^-x) ≈ x.
        Activation::Softplus => {
            if x > 30.0 {
                x
            } else {
                x.exp().ln_1p()
            }
        }
    }
}

fn activation_derivative(act: Activation, pre: f64) -> f64 {
    match act {
        Activation::Tanh => {
            let t = pre.tanh();
            1.0 - t * t
        }
        Activation::Softplus => 1.0 / (1.0 + (-pre).exp()),
    }
}

/// Deterministic forward pass. Hidden layers apply the spec activation; the
/// output layer is linear. Log-variance heads come out raw, never
/// exponentiated here.
pub fn mlp_forward(params: &MlpParams, input: &Vector) -> Result<Vector, DiffnetError> {
    let trace = forward_trace(params, input)?;
    Ok(trace.activations.into_iter().last().unwrap())
}

struct ForwardTrace {
    /// activations[0] is the input; activations[L] the output.
    activations: Vec<Vector>,
    /// Pre-activation values for hidden layers (last layer is linear).
    pre_activations: Vec<Vector>,
}

fn forward_trace(params: &MlpParams, input: &Vector) -> Result<ForwardTrace, DiffnetError> {
    let spec = &params.spec;
    if input.len() != spec.input_size() {
        return Err(DiffnetError::Dim(format!(
            "input has {} entries, spec expects {}",
            input.len(),
            spec.input_size()
        )));
    }
    let n_layers = spec.n_layers();
    let mut activations = Vec::with_capacity(n_layers + 1);
    let mut pre_activations = Vec::with_capacity(n_layers);
    activations.push(input.clone());
    let mut off = 0;
    for (l, w) in spec.layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let prev = &activations[l];
        let mut pre = Vector::zeros(fan_out);
        for r in 0..fan_out {
            let mut acc = params.values[off + fan_in * fan_out + r]; // bias
            let row = off + r * fan_in;
            for c in 0..fan_in {
                acc += params.values[row + c] * prev[c];
            }
            pre[r] = acc;
        }
        off += (fan_in + 1) * fan_out;
        let is_output = l + 1 == n_layers;
        let act = if is_output {
            pre.clone()
        } else {
            pre.map(|x| apply_activation(spec.activation, x))
        };
        pre_activations.push(pre);
        activations.push(act);
    }
    Ok(ForwardTrace {
        activations,
        pre_activations,
    })
}

/// Vector-Jacobian products: given ∂J/∂output, returns (∂J/∂params,
/// ∂J/∂input) by a backward sweep over the recorded forward trace.
pub fn mlp_grad(
    params: &MlpParams,
    input: &Vector,
    output_cotangent: &Vector,
) -> Result<(Vector, Vector), DiffnetError> {
    let spec = &params.spec;
    if output_cotangent.len() != spec.output_size() {
        return Err(DiffnetError::Dim(format!(
            "cotangent has {} entries, output size is {}",
            output_cotangent.len(),
            spec.output_size()
        )));
    }
    let trace = forward_trace(params, input)?;
    let n_layers = spec.n_layers();
    let mut grad_params = Vector::zeros(spec.param_len());

    // Layer offsets into the flat parameter vector.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for w in spec.layer_sizes.windows(2) {
        offsets.push(off);
        off += (w[0] + 1) * w[1];
    }

    let mut delta = output_cotangent.clone();
    for l in (0..n_layers).rev() {
        let fan_in = spec.layer_sizes[l];
        let fan_out = spec.layer_sizes[l + 1];
        let is_output = l + 1 == n_layers;
        if !is_output {
            let pre = &trace.pre_activations[l];
            for r in 0..fan_out {
                delta[r] *= activation_derivative(spec.activation, pre[r]);
            }
        }
        let prev = &trace.activations[l];
        let base = offsets[l];
        let mut prev_cotangent = Vector::zeros(fan_in);
        for r in 0..fan_out {
            let row = base + r * fan_in;
            for c in 0..fan_in {
                grad_params[row + c] = delta[r] * prev[c];
                prev_cotangent[c] += params.values[row + c] * delta[r];
            }
            grad_params[base + fan_in * fan_out + r] = delta[r];
        }
        delta = prev_cotangent;
    }
    Ok((grad_params, delta))
}

/// Splits an output vector according to the spec's head split.
pub fn split_heads(spec: &MlpSpec, output: &Vector) -> Result<(Vector, Vector), DiffnetError> {
    let (m, v) = spec
        .head_split
        .ok_or_else(|| DiffnetError::Spec("spec has no head split".into()))?;
    if output.len() != m + v {
        return Err(DiffnetError::Dim(format!(
            "output has {} entries, heads expect {}",
            output.len(),
            m + v
        )));
    }
    Ok((
        Vector::from_fn(m, |j, _| output[j]),
        Vector::from_fn(v, |j, _| output[m + j]),
    ))
}

/// Reference topologies exercised by the verification suite: plain tanh,
/// deeper tanh, softplus, and a head-split spec.
pub fn reference_specs() -> Vec<MlpSpec> {
    vec![
        MlpSpec::new(&[3, 5, 2], Activation::Tanh).unwrap(),
        MlpSpec::new(&[2, 8, 8, 2], Activation::Tanh).unwrap(),
        MlpSpec::new(&[1, 6, 3], Activation::Softplus).unwrap(),
        MlpSpec::with_heads(&[2, 6, 4], Activation::Tanh, 3, 1).unwrap(),
    ]
}
