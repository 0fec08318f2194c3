use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::DenseNet;
use crate::{Error, Result};

/// Low-rank delta `B A` added to a host layer's weight: `down` is `r × in`,
/// `up` is `out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub down: Array2<f64>,
    pub up: Array2<f64>,
}

impl LowRank {
    pub fn zeros(input: usize, output: usize, rank: usize) -> Self {
        Self {
            down: Array2::zeros((rank, input)),
            up: Array2::zeros((output, rank)),
        }
    }

    /// Dense `up · down`, the weight delta this adapter represents.
    pub fn materialize(&self) -> Array2<f64> {
        self.up.dot(&self.down)
    }
}

/// One set of low-rank adapters per expert; expert `k` holds one adapter per
/// host layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    rank: usize,
    host_layers: Vec<usize>,
    experts: Vec<Vec<LowRank>>,
}

impl ExpertBank {
    /// Down projections drawn `N(0, 1/in)`, up projections zero, so a fresh
    /// bank leaves its host network unchanged.
    pub fn new<R: Rng + ?Sized>(
        net: &DenseNet,
        host_layers: &[usize],
        num_experts: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let experts = (0..num_experts)
            .map(|_| {
                host_layers
                    .iter()
                    .map(|&l| {
                        let layer = &net.layers()[l];
                        let scale = (1.0 / layer.input_dim() as f64).sqrt();
                        LowRank {
                            down: Array2::from_shape_fn((rank, layer.input_dim()), |_| {
                                scale * rng.sample::<f64, _>(StandardNormal)
                            }),
                            up: Array2::zeros((layer.output_dim(), rank)),
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            rank,
            host_layers: host_layers.to_vec(),
            experts,
        }
    }

    pub fn from_parts(
        rank: usize,
        host_layers: Vec<usize>,
        experts: Vec<Vec<LowRank>>,
    ) -> Result<Self> {
        for (k, e) in experts.iter().enumerate() {
            if e.len() != host_layers.len() {
                return Err(Error::Format(format!(
                    "expert {k} has {} adapters for {} host layers",
                    e.len(),
                    host_layers.len()
                )));
            }
            for a in e {
                if a.down.nrows() != rank || a.up.ncols() != rank {
                    return Err(Error::Format(format!("expert {k} adapter rank mismatch")));
                }
            }
        }
        Ok(Self {
            rank,
            host_layers,
            experts,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rank: self.rank,
            host_layers: self.host_layers.clone(),
            experts: self
                .experts
                .iter()
                .map(|e| {
                    e.iter()
                        .map(|a| LowRank::zeros(a.down.ncols(), a.up.nrows(), self.rank))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn host_layers(&self) -> &[usize] {
        &self.host_layers
    }

    pub fn expert(&self, k: usize) -> &[LowRank] {
        &self.experts[k]
    }

    pub fn expert_mut(&mut self, k: usize) -> &mut [LowRank] {
        &mut self.experts[k]
    }

    pub(crate) fn host_position(&self, layer: usize) -> Option<usize> {
        self.host_layers.iter().position(|&l| l == layer)
    }

    pub fn check_host(&self, net: &DenseNet) -> Result<()> {
        for (pos, &l) in self.host_layers.iter().enumerate() {
            let layer = net
                .layers()
                .get(l)
                .ok_or_else(|| Error::InvalidConfig(format!("host layer {l} does not exist")))?;
            for e in &self.experts {
                let a = &e[pos];
                if a.down.ncols() != layer.input_dim() || a.up.nrows() != layer.output_dim() {
                    return Err(Error::ShapeMismatch {
                        what: "adapter",
                        expected: layer.input_dim() * layer.output_dim(),
                        got: a.down.ncols() * a.up.nrows(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.experts
            .iter()
            .flatten()
            .flat_map(|a| {
                [
                    a.down.as_slice().expect("standard layout"),
                    a.up.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.experts
            .iter_mut()
            .flatten()
            .flat_map(|a| {
                [
                    a.down.as_slice_mut().expect("standard layout"),
                    a.up.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `z[rows of k] += (h[rows of k] Aₖᵀ) Bₖᵀ` for every expert `k`.
    pub(crate) fn add_delta(
        &self,
        host: usize,
        h: &Array2<f64>,
        groups: &[Vec<usize>],
        z: &mut Array2<f64>,
    ) {
        for (k, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let a = &self.experts[k][host];
            let hg = h.select(Axis(0), rows);
            let delta = hg.dot(&a.down.t()).dot(&a.up.t());
            for (i, &r) in rows.iter().enumerate() {
                let mut zr = z.slice_mut(s![r, ..]);
                zr += &delta.row(i);
            }
        }
    }

    pub(crate) fn backward(
        &self,
        host: usize,
        h: &Array2<f64>,
        delta: &Array2<f64>,
        groups: &[Vec<usize>],
        grads: &mut ExpertBank,
        mut grad_h: Option<&mut Array2<f64>>,
    ) {
        for (k, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let a = &self.experts[k][host];
            let hg = h.select(Axis(0), rows);
            let dg = delta.select(Axis(0), rows);
            let u = hg.dot(&a.down.t());
            let g = &mut grads.experts[k][host];
            g.up = dg.t().dot(&u);
            let du = dg.dot(&a.up);
            g.down = du.t().dot(&hg);
            if let Some(gh) = grad_h.as_deref_mut() {
                let dh = du.dot(&a.down);
                for (i, &r) in rows.iter().enumerate() {
                    let mut row = gh.slice_mut(s![r, ..]);
                    row += &dh.row(i);
                }
            }
        }
    }
}
