//! Stage I: record both guidance branches along guided DDIM trajectories.
//!
//! Conditioning embeddings are stored once per label as truncated SVD factors;
//! records point into that table through `cond_ref`.

mod dataset;
mod svd;

pub use dataset::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION,
};
pub use svd::{full_svd, svd_compress, svd_restore, SvdFactors, ORTHONORMAL_TOL};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::denoiser::{cfg_combine, CondTable, EpsModel};
use crate::refine::ddim_step_batch;
use crate::rng::{derive_seed, normal_vec, seeded};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub trajectory: u32,
    /// Sampling step, `1..=T`.
    pub step: u32,
    /// Index into the dataset's conditioning table (the label).
    pub cond_ref: u32,
    pub eps_cond: Array1<f64>,
    pub eps_uncond: Array1<f64>,
    /// `x_t` fed to the model at this step, when snapshots are kept.
    pub x_t: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub dim: usize,
    pub num_steps: usize,
    pub num_trajectories: usize,
    pub omega: f64,
    pub seed: u64,
    pub store_xt: bool,
    pub schedule: NoiseSchedule,
    /// Compressed conditioning embedding per label.
    pub cond_table: Vec<SvdFactors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<TrajectoryRecord>,
}

impl Dataset {
    /// Checks record count, shapes, step range, `cond_ref` resolution and that
    /// every `(trajectory, step)` pair occurs exactly once.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let expected = h.num_trajectories * h.num_steps;
        if self.records.len() != expected {
            return Err(Error::Format(format!(
                "{} records, expected N·T = {expected}",
                self.records.len()
            )));
        }
        let mut seen = vec![false; expected];
        for r in &self.records {
            let (i, t) = (r.trajectory as usize, r.step as usize);
            if i >= h.num_trajectories || t == 0 || t > h.num_steps {
                return Err(Error::Format(format!(
                    "record ({i}, {t}) outside [0, N) × [1, T]"
                )));
            }
            let slot = i * h.num_steps + (t - 1);
            if std::mem::replace(&mut seen[slot], true) {
                return Err(Error::Format(format!("duplicate record ({i}, {t})")));
            }
            if r.cond_ref as usize >= h.cond_table.len() {
                return Err(Error::Format(format!(
                    "cond_ref {} does not resolve",
                    r.cond_ref
                )));
            }
            if r.eps_cond.len() != h.dim || r.eps_uncond.len() != h.dim {
                return Err(Error::Format("record vector length != dim".into()));
            }
            if r.x_t.is_some() != h.store_xt || r.x_t.as_ref().is_some_and(|x| x.len() != h.dim) {
                return Err(Error::Format(
                    "x_t snapshot inconsistent with header".into(),
                ));
            }
        }
        Ok(())
    }

    /// Reconstructed (rank-limited) conditioning matrices, one per label.
    pub fn restored_conditioning(&self) -> Vec<Array2<f64>> {
        self.header
            .cond_table
            .iter()
            .map(SvdFactors::restore)
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    /// Trajectories collected per label.
    pub trajectories_per_label: usize,
    /// CFG scale used to advance the trajectories.
    pub omega: f64,
    /// Rank kept for each conditioning embedding.
    pub rank: usize,
    pub store_xt: bool,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            trajectories_per_label: 128,
            omega: 1.5,
            rank: 4,
            store_xt: false,
        }
    }
}

/// Runs one guided DDIM trajectory per entry of `labels` (all advanced
/// together) and stores `ε_cond`, `ε_uncond` at every step. Trajectory `i`
/// starts from `x_T` drawn from a stream derived from `(seed, i)`.
pub fn collect_trajectories(
    model: &dyn EpsModel,
    cond: &CondTable,
    labels: &[usize],
    schedule: &NoiseSchedule,
    omega: f64,
    rank: usize,
    seed: u64,
    store_xt: bool,
) -> Result<Dataset> {
    let dim = model.data_dim();
    let num_steps = schedule.num_steps();
    let cond_table = cond
        .matrices()
        .iter()
        .map(|m| svd_compress(m, rank))
        .collect::<Result<Vec<_>>>()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= cond.num_labels()) {
        return Err(Error::UnknownLabel(bad));
    }
    let header = DatasetHeader {
        dim,
        num_steps,
        num_trajectories: labels.len(),
        omega,
        seed,
        store_xt,
        schedule: schedule.clone(),
        cond_table,
    };
    if labels.is_empty() {
        return Ok(Dataset {
            header,
            records: Vec::new(),
        });
    }

    let n = labels.len();
    let mut x = Array2::zeros((n, dim));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row.assign(&normal_vec(&mut seeded(derive_seed(seed, i as u64)), dim));
    }
    let cond_labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    let null_labels = vec![None; n];

    // slot[i][T - t] holds trajectory i at step t
    let mut slots: Vec<Vec<TrajectoryRecord>> =
        (0..n).map(|_| Vec::with_capacity(num_steps)).collect();
    for t in (1..=num_steps).rev() {
        let eps_cond = model.eps(&x, t, &cond_labels)?;
        let eps_uncond = model.eps(&x, t, &null_labels)?;
        for i in 0..n {
            if eps_cond
                .row(i)
                .iter()
                .chain(eps_uncond.row(i).iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite {
                    stage: "collect",
                    index: i,
                });
            }
        }
        let eps = cfg_combine(&eps_uncond, &eps_cond, omega);
        for (i, slot) in slots.iter_mut().enumerate() {
            slot.push(TrajectoryRecord {
                trajectory: i as u32,
                step: t as u32,
                cond_ref: labels[i] as u32,
                eps_cond: eps_cond.row(i).to_owned(),
                eps_uncond: eps_uncond.row(i).to_owned(),
                x_t: store_xt.then(|| x.row(i).to_owned()),
            });
        }
        x = ddim_step_batch(&x, &eps, t, t - 1, schedule)?;
    }
    let dataset = Dataset {
        header,
        records: slots.into_iter().flatten().collect(),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// `trajectories_per_label` copies of every label, label-major.
pub fn label_plan(num_labels: usize, trajectories_per_label: usize) -> Vec<usize> {
    (0..num_labels)
        .flat_map(|l| std::iter::repeat_n(l, trajectories_per_label))
        .collect()
}
