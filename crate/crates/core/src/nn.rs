//! Fully connected networks over a flat parameter vector with manual
//! reverse-mode gradients.
//!
//! Parameter layout, layer by layer: a row-major `out x in` weight block
//! followed by the `out` biases.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer sizes from input to output plus the hidden activation. The output
/// layer is always linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl Topology {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        Self {
            layer_sizes,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("topology has no layers")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offset of each layer's weight block in the flat vector.
    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_layers());
        let mut off = 0;
        for w in self.layer_sizes.windows(2) {
            out.push(off);
            off += w[0] * w[1] + w[1];
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid layer sizes {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    /// Scaled Gaussian initialization: hidden layers use gain `sqrt(2)`
    /// over `sqrt(fan_in)`, the output layer is scaled by `output_gain`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, output_gain: f64) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.param_count());
        let last = self.num_layers() - 1;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = if l == last { output_gain } else { 2f64.sqrt() };
            let scale = gain / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = StandardNormal.sample(rng);
                params.push(z * scale);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l`; the last entry is the output.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("empty cache")
    }
}

pub fn forward(topology: &Topology, params: &[f64], input: &[f64]) -> Result<ForwardCache> {
    if input.len() != topology.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: topology.input_dim(),
            got: input.len(),
        });
    }
    if params.len() < topology.param_count() {
        return Err(Error::DimensionMismatch {
            expected: topology.param_count(),
            got: params.len(),
        });
    }
    let last = topology.num_layers() - 1;
    let mut activations = Vec::with_capacity(topology.num_layers() + 1);
    let mut pre_activations = Vec::with_capacity(topology.num_layers());
    activations.push(input.to_vec());
    for (l, off) in topology.offsets().into_iter().enumerate() {
        let (fan_in, fan_out) = (topology.layer_sizes[l], topology.layer_sizes[l + 1]);
        let weights = &params[off..off + fan_in * fan_out];
        let bias = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        let x = &activations[l];
        let z: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                bias[o] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect();
        let a = if l == last {
            z.clone()
        } else {
            z.iter().map(|&v| topology.activation.apply(v)).collect()
        };
        pre_activations.push(z);
        activations.push(a);
    }
    Ok(ForwardCache {
        activations,
        pre_activations,
    })
}

/// Accumulates `d output / d params` contracted with `d_output` into `grad`.
pub fn backward(topology: &Topology, params: &[f64], cache: &ForwardCache, d_output: &[f64], grad: &mut [f64]) {
    debug_assert_eq!(d_output.len(), topology.output_dim());
    let offsets = topology.offsets();
    let last = topology.num_layers() - 1;
    let mut delta = d_output.to_vec();
    for l in (0..topology.num_layers()).rev() {
        let (fan_in, fan_out) = (topology.layer_sizes[l], topology.layer_sizes[l + 1]);
        if l != last {
            for (o, d) in delta.iter_mut().enumerate() {
                *d *= topology
                    .activation
                    .derivative(cache.pre_activations[l][o], cache.activations[l + 1][o]);
            }
        }
        let off = offsets[l];
        let x = &cache.activations[l];
        for o in 0..fan_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += d * xi;
            }
            grad[off + fan_in * fan_out + o] += d;
        }
        if l > 0 {
            let weights = &params[off..off + fan_in * fan_out];
            let mut next = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                    *n += d * w;
                }
            }
            delta = next;
        }
    }
}
