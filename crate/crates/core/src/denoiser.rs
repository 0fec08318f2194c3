//! The base ε-prediction network, its DM-loss training and classifier-free
//! guidance evaluation.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gmm::{eps_oracle_batch, Gmm, LabeledSample};
use crate::nn::{
    read_net, write_net, Activation, AdamW, AdamWConfig, ByteReader, ByteWriter, DenseNet,
};
use crate::rng::{derive_seed, normal_matrix, seeded};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CORE2NN\0";
pub const CHECKPOINT_VERSION: u16 = 1;

const TEMB_MIN_FREQ: f64 = 1.0;
const TEMB_MAX_FREQ: f64 = 100.0;

/// Sinusoidal features of `t / T` at `dim / 2` geometrically spaced
/// frequencies (a sine and a cosine per frequency).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepEmbedding {
    pub dim: usize,
    pub num_steps: usize,
}

impl TimestepEmbedding {
    pub fn new(dim: usize, num_steps: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "timestep embedding width {dim} must be even and positive"
            )));
        }
        if num_steps == 0 {
            return Err(Error::InvalidConfig(
                "timestep embedding needs T >= 1".into(),
            ));
        }
        Ok(Self { dim, num_steps })
    }

    pub fn embed(&self, t: usize) -> Array1<f64> {
        let half = self.dim / 2;
        let pos = t as f64 / self.num_steps as f64;
        let mut out = Array1::zeros(self.dim);
        for k in 0..half {
            let frac = if half > 1 {
                k as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let freq = TEMB_MIN_FREQ * (TEMB_MAX_FREQ / TEMB_MIN_FREQ).powf(frac);
            let (sn, cs) = (freq * pos).sin_cos();
            out[2 * k] = sn;
            out[2 * k + 1] = cs;
        }
        out
    }
}

/// Per-label conditioning embeddings: a seeded Gaussian `tokens × width`
/// matrix per label. The all-zero matrix is the reserved null conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct CondTable {
    tokens: usize,
    width: usize,
    seed: u64,
    embeddings: Vec<Array2<f64>>,
}

impl CondTable {
    pub fn new(num_labels: usize, tokens: usize, width: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let embeddings = (0..num_labels)
            .map(|_| normal_matrix(&mut rng, tokens, width))
            .collect();
        Self {
            tokens,
            width,
            seed,
            embeddings,
        }
    }

    /// Table built from explicit matrices (for instance SVD reconstructions).
    pub fn from_matrices(
        embeddings: Vec<Array2<f64>>,
        tokens: usize,
        width: usize,
    ) -> Result<Self> {
        for e in &embeddings {
            if e.dim() != (tokens, width) {
                return Err(Error::ShapeMismatch {
                    what: "conditioning matrix",
                    expected: tokens * width,
                    got: e.len(),
                });
            }
        }
        Ok(Self {
            tokens,
            width,
            seed: 0,
            embeddings,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.embeddings.len()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn flat_dim(&self) -> usize {
        self.tokens * self.width
    }

    pub fn matrix(&self, label: usize) -> Result<&Array2<f64>> {
        self.embeddings.get(label).ok_or(Error::UnknownLabel(label))
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.embeddings
    }

    /// Flattened embedding; `None` gives the null embedding.
    pub fn flat(&self, label: Option<usize>) -> Result<Array1<f64>> {
        match label {
            None => Ok(Array1::zeros(self.flat_dim())),
            Some(l) => Ok(Array1::from_iter(self.matrix(l)?.iter().cloned())),
        }
    }
}

/// Anything that predicts ε at `(x_t, t)` with optional conditioning.
pub trait EpsModel: Send + Sync {
    fn data_dim(&self) -> usize;

    /// Row-wise prediction; `labels[r] == None` is the unconditional branch.
    fn eps(&self, x: &Array2<f64>, t: usize, labels: &[Option<usize>]) -> Result<Array2<f64>>;
}

/// The analytic mixture oracle as an [`EpsModel`].
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub gmm: Gmm,
    pub schedule: NoiseSchedule,
}

impl EpsModel for OracleModel {
    fn data_dim(&self) -> usize {
        self.gmm.dim()
    }

    fn eps(&self, x: &Array2<f64>, t: usize, labels: &[Option<usize>]) -> Result<Array2<f64>> {
        eps_oracle_batch(&self.gmm, &self.schedule, t, x, labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub temb_dim: usize,
    pub cond_tokens: usize,
    pub cond_width: usize,
    pub cond_seed: u64,
    /// Adds `σ_t x_t` to the network output so the net only fits the residual.
    pub sigma_skip: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            activation: Activation::Silu,
            temb_dim: 32,
            cond_tokens: 8,
            cond_width: 32,
            cond_seed: 0x00C0_11D5,
            sigma_skip: true,
        }
    }
}

/// Base model: `[x_t | temb(t) | c] -> ε̂`, optionally plus `skip[t] · x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub net: DenseNet,
    pub temb: TimestepEmbedding,
    pub cond: CondTable,
    skip: Option<Vec<f64>>,
    data_dim: usize,
}

impl BaseModel {
    pub fn new(
        arch: &ArchConfig,
        data_dim: usize,
        num_labels: usize,
        num_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let temb = TimestepEmbedding::new(arch.temb_dim, num_steps)?;
        let cond = CondTable::new(
            num_labels,
            arch.cond_tokens,
            arch.cond_width,
            arch.cond_seed,
        );
        let mut dims = vec![data_dim + temb.dim + cond.flat_dim()];
        dims.extend(&arch.hidden);
        dims.push(data_dim);
        let net = DenseNet::new(&dims, arch.activation, &mut seeded(seed));
        Self::from_parts(net, temb, cond, data_dim)
    }

    pub fn from_parts(
        net: DenseNet,
        temb: TimestepEmbedding,
        cond: CondTable,
        data_dim: usize,
    ) -> Result<Self> {
        let expected = data_dim + temb.dim + cond.flat_dim();
        if net.input_dim() != expected {
            return Err(Error::ShapeMismatch {
                what: "base network input",
                expected,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != data_dim {
            return Err(Error::ShapeMismatch {
                what: "base network output",
                expected: data_dim,
                got: net.output_dim(),
            });
        }
        Ok(Self {
            net,
            temb,
            cond,
            skip: None,
            data_dim,
        })
    }

    /// Installs per-step skip coefficients, indexed by `t` in `0..=T`.
    pub fn with_skip(mut self, coeffs: &[f64]) -> Result<Self> {
        if coeffs.len() != self.temb.num_steps + 1 {
            return Err(Error::ShapeMismatch {
                what: "skip coefficients",
                expected: self.temb.num_steps + 1,
                got: coeffs.len(),
            });
        }
        self.skip = Some(coeffs.to_vec());
        Ok(self)
    }

    pub fn skip(&self) -> Option<&[f64]> {
        self.skip.as_deref()
    }

    fn add_skip(&self, mut out: Array2<f64>, x: &Array2<f64>, steps: &[usize]) -> Array2<f64> {
        if let Some(c) = &self.skip {
            for ((mut row, xr), &t) in out.outer_iter_mut().zip(x.outer_iter()).zip(steps) {
                row.scaled_add(c[t], &xr);
            }
        }
        out
    }

    /// Stacks `[x | temb(t_r) | c(label_r)]` row by row.
    pub fn inputs(
        &self,
        x: &Array2<f64>,
        steps: &[usize],
        labels: &[Option<usize>],
    ) -> Result<Array2<f64>> {
        if x.ncols() != self.data_dim {
            return Err(Error::ShapeMismatch {
                what: "x_t",
                expected: self.data_dim,
                got: x.ncols(),
            });
        }
        if steps.len() != x.nrows() || labels.len() != x.nrows() {
            return Err(Error::ShapeMismatch {
                what: "per-row steps/labels",
                expected: x.nrows(),
                got: steps.len().min(labels.len()),
            });
        }
        assemble_inputs(x, steps, labels, &self.temb, &self.cond)
    }

    /// Single-query forward pass.
    pub fn net_forward(
        &self,
        x_t: ArrayView1<f64>,
        t: usize,
        label: Option<usize>,
    ) -> Result<Array1<f64>> {
        let x = x_t.to_owned().insert_axis(ndarray::Axis(0));
        Ok(self.eps(&x, t, &[label])?.row(0).to_owned())
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ByteWriter::new();
        write_header(&mut w, &self.temb, &self.cond, self.data_dim);
        write_net(&mut w, &self.net);
        w.u8(0);
        match &self.skip {
            None => w.u8(0),
            Some(c) => {
                w.u8(1);
                w.f64s(c.iter());
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
        if r.u8()? != 0 {
            return Err(Error::Format(
                "base checkpoint carries an adapter section".into(),
            ));
        }
        let num_steps = temb.num_steps;
        let mut model = Self::from_parts(net, temb, cond, data_dim)?;
        match r.u8()? {
            0 => {}
            1 => model = model.with_skip(&r.f64s(num_steps + 1)?)?,
            f => return Err(Error::Format(format!("unknown skip flag {f}"))),
        }
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes in base checkpoint".into()));
        }
        Ok(model)
    }
}

pub(crate) fn assemble_inputs(
    x: &Array2<f64>,
    steps: &[usize],
    labels: &[Option<usize>],
    temb: &TimestepEmbedding,
    cond: &CondTable,
) -> Result<Array2<f64>> {
    let d = x.ncols();
    let width = d + temb.dim + cond.flat_dim();
    let mut out = Array2::zeros((x.nrows(), width));
    let null = cond.flat(None)?;
    let flats: Vec<Array1<f64>> = (0..cond.num_labels())
        .map(|l| cond.flat(Some(l)))
        .collect::<Result<_>>()?;
    let mut cached_step = usize::MAX;
    let mut emb = Array1::zeros(temb.dim);
    for (r, (&t, label)) in steps.iter().zip(labels).enumerate() {
        if t != cached_step {
            emb = temb.embed(t);
            cached_step = t;
        }
        let c = match label {
            None => &null,
            Some(l) => flats.get(*l).ok_or(Error::UnknownLabel(*l))?,
        };
        let mut row = out.row_mut(r);
        row.slice_mut(s![..d]).assign(&x.row(r));
        row.slice_mut(s![d..d + temb.dim]).assign(&emb);
        row.slice_mut(s![d + temb.dim..]).assign(c);
    }
    Ok(out)
}

pub(crate) fn write_header(
    w: &mut ByteWriter,
    temb: &TimestepEmbedding,
    cond: &CondTable,
    data_dim: usize,
) {
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u32(data_dim as u32);
    w.u32(temb.dim as u32);
    w.u32(temb.num_steps as u32);
    w.u32(cond.tokens() as u32);
    w.u32(cond.width() as u32);
    w.u32(cond.num_labels() as u32);
    w.u64(cond.seed());
    for m in cond.matrices() {
        w.f64s(m.iter());
    }
}

pub(crate) fn read_header(r: &mut ByteReader<'_>) -> Result<(TimestepEmbedding, CondTable, usize)> {
    if r.bytes(8)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic("checkpoint"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let data_dim = r.u32()? as usize;
    let temb = TimestepEmbedding::new(r.u32()? as usize, r.u32()? as usize)?;
    let tokens = r.u32()? as usize;
    let width = r.u32()? as usize;
    let labels = r.u32()? as usize;
    let seed = r.u64()?;
    let matrices = (0..labels)
        .map(|_| r.matrix(tokens, width))
        .collect::<Result<Vec<_>>>()?;
    let mut cond = CondTable::from_matrices(matrices, tokens, width)?;
    cond.seed = seed;
    Ok((temb, cond, data_dim))
}

impl EpsModel for BaseModel {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn eps(&self, x: &Array2<f64>, t: usize, labels: &[Option<usize>]) -> Result<Array2<f64>> {
        let steps = vec![t; x.nrows()];
        let input = self.inputs(x, &steps, labels)?;
        Ok(self.add_skip(self.net.forward(&input)?, x, &steps))
    }
}

/// `(1 − ω) ε_uncond + ω ε_cond`, algebraically `ε_uncond + ω (ε_cond − ε_uncond)`.
/// This form is exact at ω = 0 and ω = 1.
pub fn cfg_combine(uncond: &Array2<f64>, cond: &Array2<f64>, omega: f64) -> Array2<f64> {
    ndarray::Zip::from(uncond)
        .and(cond)
        .map_collect(|&u, &c| (1.0 - omega) * u + omega * c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfgOutput {
    pub strong: Array2<f64>,
    pub cond: Array2<f64>,
    pub uncond: Array2<f64>,
}

/// Evaluates both branches and the guided combination for every row.
pub fn cfg_eval(
    model: &dyn EpsModel,
    x_t: &Array2<f64>,
    t: usize,
    labels: &[usize],
    omega: f64,
) -> Result<CfgOutput> {
    if !omega.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "guidance scale {omega} is not finite"
        )));
    }
    let cond_labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    let cond = model.eps(x_t, t, &cond_labels)?;
    let uncond = model.eps(x_t, t, &vec![None; x_t.nrows()])?;
    let strong = cfg_combine(&uncond, &cond, omega);
    Ok(CfgOutput {
        strong,
        cond,
        uncond,
    })
}

/// One prepared DM-loss minibatch: network inputs and the noise to predict.
#[derive(Debug, Clone)]
pub struct DmBatch {
    pub x_t: Array2<f64>,
    pub steps: Vec<usize>,
    pub labels: Vec<Option<usize>>,
    pub noise: Array2<f64>,
}

impl DmBatch {
    /// Per example: `t ~ U{1..T}`, `ε ~ N(0, I)`, `x_t = α_t x_0 + σ_t ε`; the
    /// label is replaced by the null conditioning with probability `p_drop`.
    pub fn sample<R: Rng + ?Sized>(
        batch: &[LabeledSample],
        schedule: &NoiseSchedule,
        p_drop: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let d = batch[0].x0.len();
        let n = batch.len();
        let mut x_t = Array2::zeros((n, d));
        let mut noise = Array2::zeros((n, d));
        let mut steps = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for (r, ex) in batch.iter().enumerate() {
            let t = rng.random_range(1..=schedule.num_steps());
            let eps = crate::rng::normal_vec(rng, d);
            let drop = rng.random::<f64>() < p_drop;
            x_t.row_mut(r)
                .assign(&schedule.forward_noise(ex.x0.view(), t, eps.view())?);
            noise.row_mut(r).assign(&eps);
            steps.push(t);
            labels.push(if drop { None } else { ex.label });
        }
        Ok(Self {
            x_t,
            steps,
            labels,
            noise,
        })
    }
}

/// Mean over the batch of `‖ε̂ − ε‖²` for any ε model.
pub fn dm_loss(model: &dyn EpsModel, batch: &DmBatch) -> Result<f64> {
    let mut total = 0.0;
    for (r, (&t, label)) in batch.steps.iter().zip(&batch.labels).enumerate() {
        let x = batch.x_t.slice(s![r..r + 1, ..]).to_owned();
        let pred = model.eps(&x, t, &[*label])?;
        total += (&pred.row(0) - &batch.noise.row(r)).mapv(|v| v * v).sum();
    }
    Ok(total / batch.steps.len() as f64)
}

/// DM loss on a prepared batch with exact parameter gradients.
pub fn dm_loss_and_grad_on(model: &BaseModel, batch: &DmBatch) -> Result<(f64, DenseNet)> {
    let input = model.inputs(&batch.x_t, &batch.steps, &batch.labels)?;
    let (out, cache) = model.net.forward_cached(&input, None, &[])?;
    let residual = model.add_skip(out, &batch.x_t, &batch.steps) - &batch.noise;
    let n = batch.steps.len() as f64;
    let loss = residual.mapv(|v| v * v).sum() / n;
    let grad_out = residual * (2.0 / n);
    let (grads, _) = model.net.backward(&cache, &grad_out, None);
    Ok((loss, grads))
}

/// Samples noise levels and targets for `batch`, then evaluates the DM loss
/// and its gradient.
pub fn dm_loss_and_grad<R: Rng + ?Sized>(
    model: &BaseModel,
    batch: &[LabeledSample],
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut R,
) -> Result<(f64, DenseNet)> {
    let prepared = DmBatch::sample(batch, schedule, p_drop, rng)?;
    dm_loss_and_grad_on(model, &prepared)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub optimizer: AdamWConfig,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 64,
            cond_dropout: 0.1,
            optimizer: AdamWConfig::default(),
            arch: ArchConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedBase {
    pub model: BaseModel,
    pub losses: Vec<f64>,
}

/// Trains a base model on fresh mixture samples each iteration.
pub fn train_denoiser(
    config: &TrainConfig,
    data: &Gmm,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<TrainedBase> {
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let num_labels = data.labels().last().map_or(0, |l| l + 1);
    let mut model = BaseModel::new(
        &config.arch,
        data.dim(),
        num_labels,
        schedule.num_steps(),
        derive_seed(seed, 0),
    )?;
    if config.arch.sigma_skip {
        model = model.with_skip(schedule.sigmas())?;
    }
    let shapes: Vec<usize> = model.net.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(config.optimizer, config.iterations, &shapes);
    let mut rng = seeded(derive_seed(seed, 1));
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch = data.sample_x0(config.batch_size, derive_seed(seed, 2 + it as u64));
        let (loss, grads) =
            dm_loss_and_grad(&model, &batch, schedule, config.cond_dropout, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "train_denoiser",
                index: it,
            });
        }
        losses.push(loss);
        opt.step(model.net.tensors_mut(), grads.tensors());
    }
    Ok(TrainedBase { model, losses })
}
