//! Stage II: the weak model and its training on collected records.
//!
//! The weak model maps `(ε_uncond, c, t)` to a conditional prediction. It is a
//! small dense network whose hidden layers carry one low-rank expert per
//! sampling step; step `t` routes through expert `t − 1`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::collect::{Dataset, TrajectoryRecord};
use crate::denoiser::{
    assemble_inputs, cfg_combine, read_header, write_header, CondTable, TimestepEmbedding,
};
use crate::nn::{
    read_net, write_net, Activation, AdamW, AdamWConfig, ByteReader, ByteWriter, DenseNet,
    ExpertBank, LowRank,
};
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightForm {
    /// `α · cos((T − t) / T)`
    Equation,
    /// `max(cos(α (T − t) / T), 0)`
    TextClamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectTarget {
    /// Regress onto the stored conditional prediction.
    Cond,
    /// Regress onto the guided combination at the collection scale.
    Cfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflectConfig {
    pub alpha: f64,
    pub weight_form: WeightForm,
    pub target: ReflectTarget,
    pub optimizer: AdamWConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub adapter_rank: usize,
    pub activation: Activation,
    pub temb_dim: usize,
    /// Add `ε_uncond` to the network output.
    pub residual: bool,
}

impl Default for ReflectConfig {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            weight_form: WeightForm::Equation,
            target: ReflectTarget::Cond,
            optimizer: AdamWConfig::default(),
            iterations: 2000,
            batch_size: 64,
            hidden: vec![64, 64],
            adapter_rank: 4,
            activation: Activation::Silu,
            temb_dim: 32,
            residual: true,
        }
    }
}

impl ReflectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 || self.adapter_rank == 0 || self.hidden.is_empty() {
            return Err(Error::InvalidConfig(
                "batch size, adapter rank and hidden widths must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Loss weight for step `t` of `T`. Large at the start of sampling (`t = T`).
pub fn dynamic_weight(t: usize, num_steps: usize, alpha: f64, form: WeightForm) -> f64 {
    let frac = (num_steps as f64 - t as f64) / num_steps as f64;
    match form {
        WeightForm::Equation => alpha * frac.cos(),
        WeightForm::TextClamped => (alpha * frac).cos().max(0.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakModel {
    pub net: DenseNet,
    pub experts: ExpertBank,
    pub temb: TimestepEmbedding,
    /// Conditioning as the weak model sees it (restored from SVD factors).
    pub cond: CondTable,
    /// Output is `ε_uncond + net(…)` when set.
    pub residual: bool,
    data_dim: usize,
}

/// Gradients shaped like a [`WeakModel`]'s trainable parts.
#[derive(Debug, Clone)]
pub struct WeakGrads {
    pub net: DenseNet,
    pub experts: ExpertBank,
}

impl WeakGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.net.tensors();
        t.extend(self.experts.tensors());
        t
    }
}

impl WeakModel {
    pub fn new(
        config: &ReflectConfig,
        data_dim: usize,
        num_steps: usize,
        cond: CondTable,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let temb = TimestepEmbedding::new(config.temb_dim, num_steps)?;
        let mut dims = vec![data_dim + temb.dim + cond.flat_dim()];
        dims.extend(&config.hidden);
        dims.push(data_dim);
        let mut rng = seeded(seed);
        let net = DenseNet::new(&dims, config.activation, &mut rng);
        let hosts: Vec<usize> = (0..config.hidden.len()).collect();
        let experts = ExpertBank::new(&net, &hosts, num_steps, config.adapter_rank, &mut rng);
        Self::from_parts(net, experts, temb, cond, config.residual, data_dim)
    }

    pub fn from_parts(
        net: DenseNet,
        experts: ExpertBank,
        temb: TimestepEmbedding,
        cond: CondTable,
        residual: bool,
        data_dim: usize,
    ) -> Result<Self> {
        let expected = data_dim + temb.dim + cond.flat_dim();
        if net.input_dim() != expected || net.output_dim() != data_dim {
            return Err(Error::ShapeMismatch {
                what: "weak network layout",
                expected,
                got: net.input_dim(),
            });
        }
        if experts.num_experts() != temb.num_steps {
            return Err(Error::InvalidConfig(format!(
                "{} experts for {} sampling steps",
                experts.num_experts(),
                temb.num_steps
            )));
        }
        experts.check_host(&net)?;
        Ok(Self {
            net,
            experts,
            temb,
            cond,
            residual,
            data_dim,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.temb.num_steps
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.experts.num_params()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.net.tensors_mut();
        t.extend(self.experts.tensors_mut());
        t
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.net
            .tensors()
            .iter()
            .chain(self.experts.tensors().iter())
            .map(|t| t.len())
            .collect()
    }

    fn check_steps(&self, steps: &[usize]) -> Result<()> {
        if let Some(&bad) = steps.iter().find(|&&t| t == 0 || t > self.num_steps()) {
            return Err(Error::StepOutOfRange {
                step: bad,
                min: 1,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    fn prepare(
        &self,
        eps_uncond: &Array2<f64>,
        labels: &[usize],
        steps: &[usize],
    ) -> Result<(Array2<f64>, Vec<usize>)> {
        self.check_steps(steps)?;
        let labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let input = assemble_inputs(eps_uncond, steps, &labels, &self.temb, &self.cond)?;
        let routes = steps.iter().map(|t| t - 1).collect();
        Ok((input, routes))
    }

    /// Row-wise prediction with per-row label and step.
    pub fn forward_rows(
        &self,
        eps_uncond: &Array2<f64>,
        labels: &[usize],
        steps: &[usize],
    ) -> Result<Array2<f64>> {
        if labels.len() != eps_uncond.nrows() || steps.len() != eps_uncond.nrows() {
            return Err(Error::ShapeMismatch {
                what: "per-row labels/steps",
                expected: eps_uncond.nrows(),
                got: labels.len().min(steps.len()),
            });
        }
        if eps_uncond.ncols() != self.data_dim {
            return Err(Error::ShapeMismatch {
                what: "ε_uncond",
                expected: self.data_dim,
                got: eps_uncond.ncols(),
            });
        }
        let (input, routes) = self.prepare(eps_uncond, labels, steps)?;
        let out = self
            .net
            .forward_cached(&input, Some(&self.experts), &routes)?
            .0;
        Ok(self.skip(out, eps_uncond))
    }

    fn skip(&self, out: Array2<f64>, eps_uncond: &Array2<f64>) -> Array2<f64> {
        if self.residual {
            out + eps_uncond
        } else {
            out
        }
    }

    /// Batch prediction at a single step.
    pub fn forward_batch(
        &self,
        eps_uncond: &Array2<f64>,
        labels: &[usize],
        t: usize,
    ) -> Result<Array2<f64>> {
        self.forward_rows(eps_uncond, labels, &vec![t; eps_uncond.nrows()])
    }

    /// Single-query forward pass.
    pub fn weak_forward(
        &self,
        eps_uncond: ArrayView1<f64>,
        label: usize,
        t: usize,
    ) -> Result<Array1<f64>> {
        let x = eps_uncond.to_owned().insert_axis(ndarray::Axis(0));
        Ok(self.forward_batch(&x, &[label], t)?.row(0).to_owned())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ByteWriter::new();
        write_header(&mut w, &self.temb, &self.cond, self.data_dim);
        write_net(&mut w, &self.net);
        w.u8(1);
        w.u8(u8::from(self.residual));
        w.u32(self.experts.num_experts() as u32);
        w.u32(self.experts.rank() as u32);
        w.u32(self.experts.host_layers().len() as u32);
        for &h in self.experts.host_layers() {
            w.u32(h as u32);
        }
        for k in 0..self.experts.num_experts() {
            for a in self.experts.expert(k) {
                w.f64s(a.down.iter());
                w.f64s(a.up.iter());
            }
        }
        std::fs::write(path, w.into_inner())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = ByteReader::new(&bytes);
        let (temb, cond, data_dim) = read_header(&mut r)?;
        let net = read_net(&mut r)?;
        if r.u8()? != 1 {
            return Err(Error::Format(
                "weak checkpoint lacks its adapter section".into(),
            ));
        }
        let residual = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad residual flag {other}"))),
        };
        let count = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let num_hosts = r.u32()? as usize;
        let hosts = (0..num_hosts)
            .map(|_| r.u32().map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut experts = Vec::with_capacity(count);
        for _ in 0..count {
            let mut adapters = Vec::with_capacity(hosts.len());
            for &h in &hosts {
                let layer = net
                    .layers()
                    .get(h)
                    .ok_or_else(|| Error::Format(format!("host layer {h} missing")))?;
                let down = r.matrix(rank, layer.input_dim())?;
                let up = r.matrix(layer.output_dim(), rank)?;
                adapters.push(LowRank { down, up });
            }
            experts.push(adapters);
        }
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes in weak checkpoint".into()));
        }
        let bank = ExpertBank::from_parts(rank, hosts, experts)?;
        Self::from_parts(net, bank, temb, cond, residual, data_dim)
    }
}

/// A reflect minibatch: weak-model inputs, regression targets and loss weights.
#[derive(Debug, Clone)]
pub struct ReflectBatch {
    pub eps_uncond: Array2<f64>,
    pub labels: Vec<usize>,
    pub steps: Vec<usize>,
    pub targets: Array2<f64>,
    pub weights: Vec<f64>,
}

impl ReflectBatch {
    /// `omega` is the dataset's collection scale, used by the `Cfg` target.
    pub fn from_records(
        records: &[&TrajectoryRecord],
        config: &ReflectConfig,
        num_steps: usize,
        omega: f64,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let d = records[0].eps_uncond.len();
        let n = records.len();
        let mut eps_uncond = Array2::zeros((n, d));
        let mut targets = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for (i, r) in records.iter().enumerate() {
            eps_uncond.row_mut(i).assign(&r.eps_uncond);
            match config.target {
                ReflectTarget::Cond => targets.row_mut(i).assign(&r.eps_cond),
                ReflectTarget::Cfg => {
                    let u = r.eps_uncond.view().insert_axis(ndarray::Axis(0)).to_owned();
                    let c = r.eps_cond.view().insert_axis(ndarray::Axis(0)).to_owned();
                    targets
                        .row_mut(i)
                        .assign(&cfg_combine(&u, &c, omega).row(0));
                }
            }
            let t = r.step as usize;
            labels.push(r.cond_ref as usize);
            steps.push(t);
            weights.push(dynamic_weight(
                t,
                num_steps,
                config.alpha,
                config.weight_form,
            ));
        }
        Ok(Self {
            eps_uncond,
            labels,
            steps,
            targets,
            weights,
        })
    }
}

/// Batch mean of `w(t) ‖ε_weak − target‖²` and exact gradients for the base
/// weights and every expert.
pub fn reflect_loss_and_grad_on(
    model: &WeakModel,
    batch: &ReflectBatch,
) -> Result<(f64, WeakGrads)> {
    let (input, routes) = model.prepare(&batch.eps_uncond, &batch.labels, &batch.steps)?;
    let (out, cache) = model
        .net
        .forward_cached(&input, Some(&model.experts), &routes)?;
    let out = model.skip(out, &batch.eps_uncond);
    let n = batch.steps.len() as f64;
    let mut residual = out - &batch.targets;
    let mut loss = 0.0;
    for (mut row, &w) in residual.rows_mut().into_iter().zip(&batch.weights) {
        loss += w * row.dot(&row);
        row *= 2.0 * w / n;
    }
    let (net, experts) = model.net.backward(&cache, &residual, Some(&model.experts));
    Ok((
        loss / n,
        WeakGrads {
            net,
            experts: experts.expect("experts supplied"),
        },
    ))
}

pub fn reflect_loss_and_grad(
    model: &WeakModel,
    records: &[&TrajectoryRecord],
    config: &ReflectConfig,
    omega: f64,
) -> Result<(f64, WeakGrads)> {
    let batch = ReflectBatch::from_records(records, config, model.num_steps(), omega)?;
    reflect_loss_and_grad_on(model, &batch)
}

#[derive(Debug, Clone)]
pub struct ReflectOutcome {
    pub model: WeakModel,
    pub losses: Vec<f64>,
    /// Unweighted mean squared error against the target per step `t = 1..=T`
    /// over the whole dataset after training.
    pub per_step_mse: Vec<f64>,
}

/// Weak model initialised for `ds` (same seed derivation as [`train_reflect`]).
pub fn init_weak(ds: &Dataset, config: &ReflectConfig, seed: u64) -> Result<WeakModel> {
    let h = &ds.header;
    let restored = ds.restored_conditioning();
    let (tokens, width) = h
        .cond_table
        .first()
        .map(|f| f.shape())
        .ok_or_else(|| Error::Format("dataset has no conditioning table".into()))?;
    let cond = CondTable::from_matrices(restored, tokens, width)?;
    WeakModel::new(config, h.dim, h.num_steps, cond, derive_seed(seed, 0))
}

/// Trains the weak model from the dataset alone.
pub fn train_reflect(ds: &Dataset, config: &ReflectConfig, seed: u64) -> Result<ReflectOutcome> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut model = init_weak(ds, config, seed)?;
    let num_steps = ds.header.num_steps;
    let omega = ds.header.omega;
    let mut opt = AdamW::new(config.optimizer, config.iterations, &model.tensor_sizes());
    let mut rng = seeded(derive_seed(seed, 1));
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let picks: Vec<&TrajectoryRecord> = (0..config.batch_size)
            .map(|_| &ds.records[rng.random_range(0..ds.records.len())])
            .collect();
        let batch = ReflectBatch::from_records(&picks, config, num_steps, omega)?;
        let (loss, grads) = reflect_loss_and_grad_on(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "train_reflect",
                index: it,
            });
        }
        losses.push(loss);
        let g = grads.tensors();
        opt.step(model.tensors_mut(), g);
    }
    let per_step_mse = per_step_error(&model, ds, config)?;
    Ok(ReflectOutcome {
        model,
        losses,
        per_step_mse,
    })
}

/// Unweighted mean `‖ε_weak − target‖²` per step over every record.
pub fn per_step_error(model: &WeakModel, ds: &Dataset, config: &ReflectConfig) -> Result<Vec<f64>> {
    let num_steps = ds.header.num_steps;
    let mut sums = vec![0.0; num_steps];
    let mut counts = vec![0usize; num_steps];
    for chunk in ds.records.chunks(512) {
        let refs: Vec<&TrajectoryRecord> = chunk.iter().collect();
        let batch = ReflectBatch::from_records(&refs, config, num_steps, ds.header.omega)?;
        let out = model.forward_rows(&batch.eps_uncond, &batch.labels, &batch.steps)?;
        for (i, &t) in batch.steps.iter().enumerate() {
            let diff = &out.row(i) - &batch.targets.row(i);
            sums[t - 1] += diff.dot(&diff);
            counts[t - 1] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect())
}
