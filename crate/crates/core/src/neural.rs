//! Dense multilayer perceptron with hand-written reverse-mode derivatives.
//!
//! Parameters live in one flat vector. For each layer `l` (mapping
//! `sizes[l]` inputs to `sizes[l+1]` outputs) the vector holds the weight
//! matrix in row-major order (`W[out][in]`) followed by the bias vector,
//! and layers follow each other in order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Swish,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Swish => x * sigmoid(x),
        }
    }

    /// Derivative at pre-activation `x`. relu'(0) is taken as 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Swish => "swish",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "swish" => Ok(Activation::Swish),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Architecture of a network: `[in, hidden..., out]`, hidden activation,
/// and the initialization seed. The output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::InvalidArgument(
                "a network needs input, at least one hidden, and output layer".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be at least 1".into()));
        }
        Ok(MlpSpec {
            layer_sizes,
            activation,
            seed,
        })
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flat parameter vector θ in the canonical layout described above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    biases: usize,
}

/// Per-call scratch space: pre-activations and activations of every layer.
#[derive(Debug, Clone, Default)]
pub struct MlpWorkspace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

/// A network specification with its parameter layout resolved.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<LayerLayout>,
    n_params: usize,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Self {
        let mut offset = 0;
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| {
                let layout = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    biases: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layout
            })
            .collect();
        Mlp {
            spec,
            layers,
            n_params: offset,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn workspace(&self) -> MlpWorkspace {
        MlpWorkspace {
            pre: self.layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            post: self.layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.n_params,
                got: params.len(),
            });
        }
        if input.len() != self.spec.input_size() {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.spec.input_size(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero biases, deterministic in the spec seed.
    pub fn init_params(&self) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let mut p = vec![0.0; self.n_params];
        for l in &self.layers {
            let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for w in &mut p[l.weights..l.biases] {
                *w = rng.random_range(-limit..limit);
            }
        }
        ParamVector(p)
    }

    /// Forward pass; the output is left in the workspace and returned.
    pub fn forward<'w>(
        &self,
        params: &[f64],
        input: &[f64],
        ws: &'w mut MlpWorkspace,
    ) -> Result<&'w [f64]> {
        self.check(params, input)?;
        self.forward_unchecked(params, input, ws);
        Ok(&ws.post[self.layers.len() - 1])
    }

    pub(crate) fn forward_unchecked(&self, params: &[f64], input: &[f64], ws: &mut MlpWorkspace) {
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let (before, rest) = ws.post.split_at_mut(li);
            let x: &[f64] = if li == 0 { input } else { &before[li - 1] };
            let z = &mut ws.pre[li];
            let a = &mut rest[0];
            let w = &params[l.weights..l.biases];
            let b = &params[l.biases..l.biases + l.fan_out];
            for o in 0..l.fan_out {
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(x) {
                    acc += wi * xi;
                }
                z[o] = acc;
            }
            if li == last {
                a.copy_from_slice(z);
            } else {
                for (ai, zi) in a.iter_mut().zip(z.iter()) {
                    *ai = self.spec.activation.apply(*zi);
                }
            }
        }
    }

    /// Output of the last forward pass stored in `ws`.
    pub(crate) fn output<'w>(&self, ws: &'w MlpWorkspace) -> &'w [f64] {
        &ws.post[self.layers.len() - 1]
    }

    /// Vector-Jacobian product. Recomputes the forward pass, writes the
    /// input cotangent into `input_cot` and ADDS the parameter gradient
    /// into `param_grad`.
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        output_cot: &[f64],
        input_cot: &mut [f64],
        param_grad: &mut [f64],
        ws: &mut MlpWorkspace,
    ) -> Result<()> {
        self.check(params, input)?;
        if output_cot.len() != self.spec.output_size() {
            return Err(Error::DimensionMismatch {
                what: "output cotangent",
                expected: self.spec.output_size(),
                got: output_cot.len(),
            });
        }
        if input_cot.len() != input.len() || param_grad.len() != self.n_params {
            return Err(Error::DimensionMismatch {
                what: "gradient buffers",
                expected: input.len() + self.n_params,
                got: input_cot.len() + param_grad.len(),
            });
        }
        self.forward_unchecked(params, input, ws);
        self.backward_unchecked(params, input, output_cot, input_cot, param_grad, ws);
        Ok(())
    }

    /// Backward sweep reusing the activations already stored in `ws`.
    pub(crate) fn backward_unchecked(
        &self,
        params: &[f64],
        input: &[f64],
        output_cot: &[f64],
        input_cot: &mut [f64],
        param_grad: &mut [f64],
        ws: &mut MlpWorkspace,
    ) {
        let MlpWorkspace {
            pre,
            post,
            delta,
            delta_prev,
        } = ws;
        delta.clear();
        delta.extend_from_slice(output_cot);
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let x: &[f64] = if li == 0 { input } else { &post[li - 1] };
            // delta holds dL/dz for this layer's pre-activations
            {
                let (gw, gb) = param_grad[l.weights..l.biases + l.fan_out].split_at_mut(l.fan_out * l.fan_in);
                for o in 0..l.fan_out {
                    let d = delta[o];
                    gb[o] += d;
                    if d != 0.0 {
                        let row = &mut gw[o * l.fan_in..(o + 1) * l.fan_in];
                        for (g, xi) in row.iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                }
            }
            let w = &params[l.weights..l.biases];
            delta_prev.clear();
            delta_prev.resize(l.fan_in, 0.0);
            for o in 0..l.fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                    for (acc, wi) in delta_prev.iter_mut().zip(row) {
                        *acc += d * wi;
                    }
                }
            }
            if li == 0 {
                input_cot.copy_from_slice(delta_prev);
            } else {
                let z = &pre[li - 1];
                for (dp, zi) in delta_prev.iter_mut().zip(z) {
                    *dp *= self.spec.activation.derivative(*zi);
                }
                std::mem::swap(delta, delta_prev);
            }
        }
    }
}

pub fn init_params(spec: &MlpSpec) -> ParamVector {
    Mlp::new(spec.clone()).init_params()
}

pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    let mlp = Mlp::new(spec.clone());
    let mut ws = mlp.workspace();
    Ok(mlp.forward(params.as_slice(), input, &mut ws)?.to_vec())
}

/// Returns `(input_cotangent, param_gradient)` for one output cotangent.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &[f64],
    output_cotangent: &[f64],
) -> Result<(Vec<f64>, ParamVector)> {
    let mlp = Mlp::new(spec.clone());
    let mut ws = mlp.workspace();
    let mut input_cot = vec![0.0; input.len()];
    let mut grad = vec![0.0; mlp.param_count()];
    mlp.backward(
        params.as_slice(),
        input,
        output_cotangent,
        &mut input_cot,
        &mut grad,
        &mut ws,
    )?;
    Ok((input_cot, ParamVector(grad)))
}
