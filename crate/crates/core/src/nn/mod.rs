//! Dense networks with hand-written reverse-mode gradients.
//!
//! Batches are row-major matrices (`batch × features`). Hidden layers may host
//! per-row low-rank experts ([`ExpertBank`]); the row's route picks which
//! expert's delta is added to the layer's pre-activation.

mod codec;
mod lora;
mod optim;

pub use codec::{read_net, write_net, ByteReader, ByteWriter};
pub use lora::{ExpertBank, LowRank};
pub use optim::{cosine_lr, AdamW, AdamWConfig};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }
}

/// Affine layer `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Linear>,
    activation: Activation,
}

/// Intermediate values of a forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    routes: Vec<usize>,
}

impl DenseNet {
    /// Xavier-normal weights, zero biases. `dims` lists every layer width
    /// including input and output.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (input, output) = (w[0], w[1]);
                let scale = (2.0 / (input + output) as f64).sqrt();
                Linear {
                    weight: Array2::from_shape_fn((output, input), |_| {
                        scale * rng.sample::<f64, _>(StandardNormal)
                    }),
                    bias: Array1::zeros(output),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig(
                "network needs at least one layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::ShapeMismatch {
                    what: "layer chain",
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::ShapeMismatch {
                    what: "bias",
                    expected: l.output_dim(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].input_dim()];
        dims.extend(self.layers.iter().map(Linear::output_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn zeros_like(&self) -> DenseNet {
        DenseNet {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            activation: self.activation,
        }
    }

    /// Parameter tensors in a fixed order: per layer, weight then bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn forward(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(input, None, &[])?.0)
    }

    /// Forward pass keeping what the backward pass needs. `routes[r]` picks
    /// the expert for row `r` when `experts` is given.
    pub fn forward_cached(
        &self,
        input: &Array2<f64>,
        experts: Option<&ExpertBank>,
        routes: &[usize],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                what: "network input",
                expected: self.input_dim(),
                got: input.ncols(),
            });
        }
        if let Some(bank) = experts {
            bank.check_host(self)?;
            if routes.len() != input.nrows() {
                return Err(Error::ShapeMismatch {
                    what: "expert routes",
                    expected: input.nrows(),
                    got: routes.len(),
                });
            }
            if let Some(&bad) = routes.iter().find(|&&r| r >= bank.num_experts()) {
                return Err(Error::StepOutOfRange {
                    step: bad + 1,
                    min: 1,
                    max: bank.num_experts(),
                });
            }
        }
        let groups = experts.map(|b| group_rows(routes, b.num_experts()));
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = input.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if let (Some(bank), Some(groups)) = (experts, groups.as_ref()) {
                if let Some(host) = bank.host_position(l) {
                    bank.add_delta(host, &h, groups, &mut z);
                }
            }
            inputs.push(h);
            if l == last {
                h = z;
            } else {
                let act = self.activation;
                h = z.mapv(|v| act.apply(v));
                pre_activations.push(z);
            }
        }
        Ok((
            h,
            ForwardCache {
                inputs,
                pre_activations,
                routes: routes.to_vec(),
            },
        ))
    }

    /// Reverse pass from `grad_output` (∂loss/∂output, `batch × out`).
    /// Returns parameter gradients shaped like the network and, when experts
    /// were used in the forward pass, gradients shaped like the bank.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &Array2<f64>,
        experts: Option<&ExpertBank>,
    ) -> (DenseNet, Option<ExpertBank>) {
        let mut grads = self.zeros_like();
        let mut expert_grads = experts.map(ExpertBank::zeros_like);
        let groups = experts.map(|b| group_rows(&cache.routes, b.num_experts()));
        let last = self.layers.len() - 1;
        let mut delta = grad_output.to_owned();
        for l in (0..=last).rev() {
            if l != last {
                let act = self.activation;
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre_activations[l])
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            let h = &cache.inputs[l];
            let g = &mut grads.layers[l];
            g.weight = delta.t().dot(h);
            g.bias = delta.sum_axis(Axis(0));
            let mut grad_h = if l > 0 {
                Some(delta.dot(&self.layers[l].weight))
            } else {
                None
            };
            if let (Some(bank), Some(bank_grads), Some(groups)) =
                (experts, expert_grads.as_mut(), groups.as_ref())
            {
                if let Some(host) = bank.host_position(l) {
                    bank.backward(host, h, &delta, groups, bank_grads, grad_h.as_mut());
                }
            }
            if let Some(gh) = grad_h {
                delta = gh;
            }
        }
        (grads, expert_grads)
    }
}

/// Row indices per route value.
fn group_rows(routes: &[usize], count: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); count];
    for (row, &r) in routes.iter().enumerate() {
        groups[r].push(row);
    }
    groups
}
