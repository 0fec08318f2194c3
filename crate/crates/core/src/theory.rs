//! Synthetic weak/strong estimator pairs and the optimal weak-to-strong scale.
//!
//! Each model is a Gaussian mixture sharing weights and variance with the
//! truth and differing only in its means. Combining the two with scale ω gives
//! means `ω μ_strong + (1 − ω) μ_weak`, whose weighted squared error
//!
//! ```text
//! E(ω) = Σ_i w_i ‖ω μ_i^strong + (1 − ω) μ_i^weak − μ_i‖²
//! ```
//!
//! is a quadratic in ω. When the strong means lie between the weak means and
//! the truth, its minimiser exceeds 1.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{normal_vec, seeded};
use crate::{Error, Result};

pub const MAX_ATTEMPTS: usize = 100_000;
pub const GRID_STEP: f64 = 1e-3;
pub const GRID_MAX: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentTriple {
    pub weight: f64,
    pub mean: Array1<f64>,
    pub weak: Array1<f64>,
    pub strong: Array1<f64>,
}

impl ComponentTriple {
    pub fn weak_error(&self) -> f64 {
        sq_dist(&self.mean, &self.weak)
    }

    pub fn strong_error(&self) -> f64 {
        sq_dist(&self.mean, &self.strong)
    }

    /// `⟨μ − μ_strong, μ_strong − μ_weak⟩`; positive when the strong mean lies
    /// between the weak mean and the truth.
    pub fn betweenness(&self) -> f64 {
        (&self.mean - &self.strong).dot(&(&self.strong - &self.weak))
    }
}

fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub easy_weak: f64,
    pub easy_strong: f64,
    pub difficult_weak: f64,
    pub difficult_strong: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            easy_weak: 0.05,
            easy_strong: 0.04,
            difficult_weak: 1.0,
            difficult_strong: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremInstance {
    pub triples: Vec<ComponentTriple>,
    /// Components `0..split` are easy, the rest difficult.
    pub split: usize,
    pub budgets: Budgets,
    pub var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceParams {
    pub dim: usize,
    pub components: usize,
    pub split: usize,
    pub budgets: Budgets,
}

impl Default for InstanceParams {
    fn default() -> Self {
        Self {
            dim: 8,
            components: 6,
            split: 3,
            budgets: Budgets::default(),
        }
    }
}

/// One entry per constraint group with the quantity that decides it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub easy_weak_error: f64,
    pub easy_strong_error: f64,
    pub difficult_weak_error: f64,
    pub difficult_strong_error: f64,
    /// Easy errors within their budgets, for both models.
    pub easy_within_budget: bool,
    /// `η_easy < difficult error ≤ η_difficult`, for both models.
    pub difficult_within_band: bool,
    /// `|η_easy^weak − η_easy^strong| < |η_difficult^weak − η_difficult^strong|`.
    pub gap_larger_on_difficult: bool,
    /// Strong budgets below weak budgets.
    pub strong_tighter: bool,
    /// Smallest per-component betweenness inner product.
    pub min_betweenness: f64,
    pub betweenness: bool,
}

impl ConstraintReport {
    pub fn all(&self) -> bool {
        self.easy_within_budget
            && self.difficult_within_band
            && self.gap_larger_on_difficult
            && self.strong_tighter
            && self.betweenness
    }
}

impl TheoremInstance {
    fn group_error(&self, easy: bool, strong: bool) -> f64 {
        self.triples
            .iter()
            .enumerate()
            .filter(|(i, _)| (*i < self.split) == easy)
            .map(|(_, c)| {
                c.weight
                    * if strong {
                        c.strong_error()
                    } else {
                        c.weak_error()
                    }
            })
            .sum()
    }

    pub fn check_constraints(&self) -> ConstraintReport {
        let b = &self.budgets;
        let (ew, es) = (self.group_error(true, false), self.group_error(true, true));
        let (dw, ds) = (
            self.group_error(false, false),
            self.group_error(false, true),
        );
        let min_betweenness = self
            .triples
            .iter()
            .map(ComponentTriple::betweenness)
            .fold(f64::INFINITY, f64::min);
        ConstraintReport {
            easy_weak_error: ew,
            easy_strong_error: es,
            difficult_weak_error: dw,
            difficult_strong_error: ds,
            easy_within_budget: ew <= b.easy_weak && es <= b.easy_strong,
            difficult_within_band: b.easy_weak < dw
                && dw <= b.difficult_weak
                && b.easy_strong < ds
                && ds <= b.difficult_strong,
            gap_larger_on_difficult: (b.easy_weak - b.easy_strong).abs()
                < (b.difficult_weak - b.difficult_strong).abs(),
            strong_tighter: b.easy_strong < b.easy_weak && b.difficult_strong < b.difficult_weak,
            min_betweenness,
            betweenness: min_betweenness > 0.0,
        }
    }

    pub fn error(&self, omega: f64) -> f64 {
        self.triples
            .iter()
            .map(|c| {
                let r: f64 = c
                    .mean
                    .iter()
                    .zip(&c.weak)
                    .zip(&c.strong)
                    .map(|((m, w), s)| {
                        let v = omega * s + (1.0 - omega) * w - m;
                        v * v
                    })
                    .sum();
                c.weight * r
            })
            .sum()
    }

    pub fn error_curve(&self, omegas: &[f64]) -> Result<Vec<f64>> {
        if omegas.is_empty() {
            return Err(Error::Empty("ω grid"));
        }
        Ok(omegas.iter().map(|&w| self.error(w)).collect())
    }

    /// Aggregate minimiser of `E` and the per-component ones.
    pub fn optimal_omega(&self) -> Result<(f64, Vec<f64>)> {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut per = Vec::with_capacity(self.triples.len());
        for c in &self.triples {
            let dir = &c.strong - &c.weak;
            let gap = &c.mean - &c.weak;
            let (n_i, d_i) = (gap.dot(&dir), dir.dot(&dir));
            per.push(if d_i > 0.0 { n_i / d_i } else { f64::NAN });
            num += c.weight * n_i;
            den += c.weight * d_i;
        }
        if !(den > 0.0) {
            return Err(Error::DegenerateDirection);
        }
        Ok((num / den, per))
    }
}

/// `[0, 4]` in steps of `1e-3` (4001 points).
pub fn omega_grid() -> Vec<f64> {
    let n = (GRID_MAX / GRID_STEP).round() as usize;
    (0..=n).map(|i| i as f64 * GRID_STEP).collect()
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Array1<f64> {
    let v = normal_vec(rng, dim);
    let n = v.dot(&v).sqrt();
    v / n
}

/// Rejection-samples an instance satisfying every constraint group.
pub fn build_instance(seed: u64, params: &InstanceParams) -> Result<TheoremInstance> {
    let InstanceParams {
        dim,
        components: m,
        split,
        budgets: b,
    } = *params;
    if split == 0 || split >= m || dim == 0 {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= M1 < M and dim >= 1, got M1 = {split}, M = {m}"
        )));
    }
    if !(b.easy_strong < b.easy_weak && b.difficult_strong < b.difficult_weak) {
        return Err(Error::InvalidConfig(
            "strong budgets must be below weak budgets".into(),
        ));
    }
    if !((b.easy_weak - b.easy_strong).abs() < (b.difficult_weak - b.difficult_strong).abs()) {
        return Err(Error::InvalidConfig(
            "budget gap must be larger on the difficult group".into(),
        ));
    }
    let mut rng = seeded(seed);
    for _ in 0..MAX_ATTEMPTS {
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let easy_target = rng.random_range(0.2..1.0) * b.easy_weak;
        let difficult_target = rng.random_range(b.easy_weak..b.difficult_weak);
        let group_weight = |easy: bool| -> f64 {
            (0..m)
                .filter(|&i| (i < split) == easy)
                .map(|i| weights[i])
                .sum()
        };
        let (we, wd) = (group_weight(true), group_weight(false));
        let triples = (0..m)
            .map(|i| {
                let mean = normal_vec(&mut rng, dim);
                // equal squared error per component within each group
                let err = if i < split {
                    easy_target / we
                } else {
                    difficult_target / wd
                };
                let dir = random_direction(&mut rng, dim);
                let delta_w = &dir * err.sqrt();
                let lambda: f64 = rng.random_range(0.2..0.9);
                let mut side = random_direction(&mut rng, dim);
                side = &side - &(&dir * side.dot(&dir));
                let side_norm = side.dot(&side).sqrt();
                let frac: f64 = rng.random_range(0.0..1.2);
                let perp = if side_norm > 1e-12 {
                    side * (frac * (lambda * (1.0 - lambda) * err).sqrt() / side_norm)
                } else {
                    Array1::zeros(dim)
                };
                let delta_s = &delta_w * lambda + perp;
                ComponentTriple {
                    weight: weights[i],
                    weak: &mean + &delta_w,
                    strong: &mean + &delta_s,
                    mean,
                }
            })
            .collect();
        let inst = TheoremInstance {
            triples,
            split,
            budgets: b,
            var: 0.04,
        };
        if inst.check_constraints().all() {
            return Ok(inst);
        }
    }
    Err(Error::Infeasible {
        attempts: MAX_ATTEMPTS,
    })
}

/// A cross-model instance in which the weak means lie between the strong
/// means and the truth, so the strong model is worse everywhere and the
/// betweenness constraint fails.
pub fn reversed_instance(seed: u64, dim: usize, components: usize) -> TheoremInstance {
    let mut rng = seeded(seed);
    let triples = (0..components)
        .map(|_| {
            let mean = normal_vec(&mut rng, dim);
            let dir = random_direction(&mut rng, dim) * 0.5;
            let lambda: f64 = rng.random_range(0.3..0.7);
            ComponentTriple {
                weight: 1.0 / components as f64,
                weak: &mean + &(&dir * lambda),
                strong: &mean + &dir,
                mean,
            }
        })
        .collect();
    TheoremInstance {
        triples,
        split: components / 2,
        budgets: Budgets::default(),
        var: 0.04,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub omega_star: f64,
    pub grid_argmin: f64,
    pub e0: f64,
    pub e1: f64,
    pub e_star: f64,
    pub constraints_met: bool,
    pub omega_above_one: bool,
    pub improves_both: bool,
}

impl TheoremReport {
    /// Both conclusions hold.
    pub fn pass(&self) -> bool {
        self.omega_above_one && self.improves_both
    }
}

pub fn verify_theorem(inst: &TheoremInstance) -> Result<TheoremReport> {
    let (omega_star, _) = inst.optimal_omega()?;
    let grid = omega_grid();
    let curve = inst.error_curve(&grid)?;
    let best = curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| grid[i])
        .expect("non-empty grid");
    let (e0, e1, e_star) = (inst.error(0.0), inst.error(1.0), inst.error(omega_star));
    Ok(TheoremReport {
        omega_star,
        grid_argmin: best,
        e0,
        e1,
        e_star,
        constraints_met: inst.check_constraints().all(),
        omega_above_one: omega_star > 1.0,
        improves_both: e_star < e0.min(e1),
    })
}
