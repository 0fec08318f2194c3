//! Central-difference checks of the base DM loss and the reflect loss.
//! Shared by the gradient suite and the acceptance target.

use core2::denoiser::{dm_loss, dm_loss_and_grad_on, ArchConfig, BaseModel, CondTable, DmBatch};
use core2::nn::Activation;
use core2::reflect::{
    dynamic_weight, reflect_loss_and_grad_on, ReflectBatch, ReflectConfig, WeakModel, WeightForm,
};
use core2::rng::{normal_matrix, seeded};
use core2::NoiseSchedule;
use rand::Rng;

pub const H: f64 = 1e-5;
pub const REL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
const TINY: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub params: usize,
    /// Largest `|analytic − fd| / max(|analytic|, |fd|)` over non-tiny gradients.
    pub worst_rel: f64,
    /// Largest absolute error among tiny gradients.
    pub worst_tiny_abs: f64,
    /// Batch loss equals the loss recomputed through the inference path.
    pub loss_consistent: bool,
}

impl GradCheck {
    pub fn pass(&self) -> bool {
        self.worst_rel <= REL && self.worst_tiny_abs <= REL * TINY && self.loss_consistent
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            params: self.params + other.params,
            worst_rel: self.worst_rel.max(other.worst_rel),
            worst_tiny_abs: self.worst_tiny_abs.max(other.worst_tiny_abs),
            loss_consistent: self.loss_consistent && other.loss_consistent,
        }
    }
}

fn offsets(sizes: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    sizes
        .into_iter()
        .map(|s| {
            let o = acc;
            acc += s;
            o
        })
        .collect()
}

fn locate(offsets: &[usize], k: usize) -> (usize, usize) {
    let ti = offsets.partition_point(|&o| o <= k) - 1;
    (ti, k - offsets[ti])
}

/// Compares `analytic` against central differences of `loss_at(k, value)`.
fn compare(
    analytic: &[f64],
    originals: &[f64],
    mut loss_at: impl FnMut(usize, f64) -> f64,
) -> (f64, f64) {
    let (mut worst_rel, mut worst_tiny) = (0.0f64, 0.0f64);
    for (k, (&a, &orig)) in analytic.iter().zip(originals).enumerate() {
        let fd = (loss_at(k, orig + H) - loss_at(k, orig - H)) / (2.0 * H);
        let scale = a.abs().max(fd.abs());
        let err = (a - fd).abs();
        if scale > TINY {
            worst_rel = worst_rel.max(err / scale);
        } else {
            worst_tiny = worst_tiny.max(err);
        }
    }
    (worst_rel, worst_tiny)
}

pub fn base_model(activation: Activation, skip: bool, seed: u64) -> (BaseModel, NoiseSchedule) {
    let schedule = NoiseSchedule::vp(6).unwrap();
    let arch = ArchConfig {
        hidden: vec![9, 7],
        activation,
        temb_dim: 4,
        cond_tokens: 2,
        cond_width: 3,
        cond_seed: seed + 100,
        sigma_skip: skip,
    };
    let mut model = BaseModel::new(&arch, 5, 3, schedule.num_steps(), seed).unwrap();
    if skip {
        model = model.with_skip(schedule.sigmas()).unwrap();
    }
    (model, schedule)
}

pub fn dm_batch(seed: u64, n: usize, d: usize, num_steps: usize) -> DmBatch {
    let mut rng = seeded(seed);
    let x_t = normal_matrix(&mut rng, n, d);
    let noise = normal_matrix(&mut rng, n, d);
    let steps = (0..n).map(|_| rng.random_range(1..=num_steps)).collect();
    let labels = (0..n)
        .map(|i| {
            if i % 4 == 3 {
                None
            } else {
                Some(rng.random_range(0..3))
            }
        })
        .collect();
    DmBatch {
        x_t,
        steps,
        labels,
        noise,
    }
}

/// Every network parameter of a random base model against the DM loss.
pub fn check_base(activation: Activation, skip: bool, seed: u64) -> GradCheck {
    let (model, schedule) = base_model(activation, skip, seed);
    let batch = dm_batch(seed + 50, 12, 5, schedule.num_steps());
    let (loss, grads) = dm_loss_and_grad_on(&model, &batch).unwrap();
    let loss_consistent = (loss - dm_loss(&model, &batch).unwrap()).abs() <= 1e-12 * loss.max(1.0);
    let analytic: Vec<f64> = grads.tensors().concat();
    let originals: Vec<f64> = model.net.tensors().concat();
    let offs = offsets(model.net.tensors().iter().map(|t| t.len()));
    let mut probe = model.clone();
    let (worst_rel, worst_tiny_abs) = compare(&analytic, &originals, |k, v| {
        let (ti, j) = locate(&offs, k);
        probe.net.tensors_mut()[ti][j] = v;
        let l = dm_loss(&probe, &batch).unwrap();
        probe.net.tensors_mut()[ti][j] = originals[k];
        l
    });
    GradCheck {
        params: analytic.len(),
        worst_rel,
        worst_tiny_abs,
        loss_consistent,
    }
}

pub fn weak_model(activation: Activation, residual: bool, seed: u64) -> WeakModel {
    let config = ReflectConfig {
        hidden: vec![8, 6],
        adapter_rank: 2,
        activation,
        temb_dim: 4,
        residual,
        ..ReflectConfig::default()
    };
    let cond = CondTable::new(3, 2, 3, seed + 7);
    let mut weak = WeakModel::new(&config, 5, 4, cond, seed).unwrap();
    // experts start with a zero factor; move them off it so both factors get gradient
    let mut rng = seeded(seed + 9);
    for t in weak.experts.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
    }
    weak
}

pub fn reflect_batch(seed: u64, n: usize, d: usize, num_steps: usize, alpha: f64) -> ReflectBatch {
    let mut rng = seeded(seed);
    let eps_uncond = normal_matrix(&mut rng, n, d);
    let targets = normal_matrix(&mut rng, n, d);
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    let steps: Vec<usize> = (0..n).map(|i| 1 + i % num_steps).collect();
    let weights = steps
        .iter()
        .map(|&t| dynamic_weight(t, num_steps, alpha, WeightForm::Equation))
        .collect();
    ReflectBatch {
        eps_uncond,
        labels,
        steps,
        targets,
        weights,
    }
}

/// Weighted reflect loss through the inference forward pass.
pub fn weighted_loss(model: &WeakModel, b: &ReflectBatch) -> f64 {
    let out = model
        .forward_rows(&b.eps_uncond, &b.labels, &b.steps)
        .unwrap();
    let n = b.steps.len() as f64;
    (&out - &b.targets)
        .rows()
        .into_iter()
        .zip(&b.weights)
        .map(|(r, w)| w * r.dot(&r))
        .sum::<f64>()
        / n
}

/// Every base-network and expert parameter of a random weak model against
/// the reflect loss.
pub fn check_weak(activation: Activation, residual: bool, seed: u64) -> GradCheck {
    let model = weak_model(activation, residual, seed);
    let batch = reflect_batch(seed + 60, 16, 5, 4, 4.0);
    let (loss, grads) = reflect_loss_and_grad_on(&model, &batch).unwrap();
    let loss_consistent = (loss - weighted_loss(&model, &batch)).abs() <= 1e-12 * loss.max(1.0);
    let analytic: Vec<f64> = grads.tensors().concat();
    let mut probe = model.clone();
    let originals: Vec<f64> = probe
        .tensors_mut()
        .iter()
        .flat_map(|t| t.to_vec())
        .collect();
    assert_eq!(analytic.len(), originals.len());
    let offs = offsets(probe.tensor_sizes());
    let (worst_rel, worst_tiny_abs) = compare(&analytic, &originals, |k, v| {
        let (ti, j) = locate(&offs, k);
        probe.tensors_mut()[ti][j] = v;
        let l = weighted_loss(&probe, &batch);
        probe.tensors_mut()[ti][j] = originals[k];
        l
    });
    GradCheck {
        params: analytic.len(),
        worst_rel,
        worst_tiny_abs,
        loss_consistent,
    }
}

/// Both activations with and without the skip paths.
pub fn check_all(seed: u64) -> (GradCheck, GradCheck) {
    let mut base: Option<GradCheck> = None;
    let mut weak: Option<GradCheck> = None;
    for (i, activation) in [Activation::Silu, Activation::Tanh].into_iter().enumerate() {
        for flag in [true, false] {
            let s = seed + 10 * i as u64 + flag as u64;
            let b = check_base(activation, flag, s);
            let w = check_weak(activation, flag, s + 1000);
            base = Some(base.map_or(b, |acc| acc.merge(b)));
            weak = Some(weak.map_or(w, |acc| acc.merge(w)));
        }
    }
    (base.unwrap(), weak.unwrap())
}
