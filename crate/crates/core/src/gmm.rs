//! Isotropic Gaussian mixtures: the ground-truth data distribution, its
//! closed-form noised marginals, and the analytic score / ε oracles.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::seeded;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Weights are renormalised when their sum is within this distance of one.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-3;

/// JSON description of a mixture: `{dim, components: [{weight, mean, var, label}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub dim: usize,
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl MixtureSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Array1<f64>,
    pub var: f64,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    dim: usize,
    components: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x0: Array1<f64>,
    pub label: Option<usize>,
    /// Index of the component the sample was drawn from.
    pub component: usize,
}

impl Gmm {
    /// Validates a raw mixture description.
    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        if spec.components.is_empty() {
            return Err(Error::InvalidMixture("no components".into()));
        }
        if spec.dim == 0 {
            return Err(Error::InvalidMixture("dimension must be positive".into()));
        }
        let mut total = 0.0;
        for (i, c) in spec.components.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidMixture(format!(
                    "component {i}: weight {} must be positive",
                    c.weight
                )));
            }
            if !(c.var > 0.0) || !c.var.is_finite() {
                return Err(Error::InvalidMixture(format!(
                    "component {i}: variance {} must be positive",
                    c.var
                )));
            }
            if c.mean.len() != spec.dim {
                return Err(Error::InvalidMixture(format!(
                    "component {i}: mean has length {}, expected {}",
                    c.mean.len(),
                    spec.dim
                )));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component {i}: non-finite mean"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, not 1"
            )));
        }
        let components = spec
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight / total,
                mean: Array1::from(c.mean.clone()),
                var: c.var,
                label: c.label,
            })
            .collect();
        Ok(Self {
            dim: spec.dim,
            components,
        })
    }

    pub fn to_spec(&self) -> MixtureSpec {
        MixtureSpec {
            dim: self.dim,
            components: self
                .components
                .iter()
                .map(|c| ComponentSpec {
                    weight: c.weight,
                    mean: c.mean.to_vec(),
                    var: c.var,
                    label: c.label,
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Distinct labels in ascending order.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels: Vec<usize> = self.components.iter().filter_map(|c| c.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// Sub-mixture of the components carrying `label`, weights renormalised.
    pub fn restrict(&self, label: usize) -> Result<Gmm> {
        let selected: Vec<&Component> = self
            .components
            .iter()
            .filter(|c| c.label == Some(label))
            .collect();
        if selected.is_empty() {
            return Err(Error::UnknownLabel(label));
        }
        let total: f64 = selected.iter().map(|c| c.weight).sum();
        Ok(Gmm {
            dim: self.dim,
            components: selected
                .into_iter()
                .map(|c| Component {
                    weight: c.weight / total,
                    ..c.clone()
                })
                .collect(),
        })
    }

    /// Marginal of `x_t` when `x_0` follows this mixture: component means
    /// scale by α_t and variances become `α_t² var + σ_t²`.
    pub fn noised(&self, schedule: &NoiseSchedule, t: usize) -> Result<Gmm> {
        schedule.check_step(t)?;
        if t == 0 {
            return Ok(self.clone());
        }
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        Ok(Gmm {
            dim: self.dim,
            components: self
                .components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: &c.mean * a,
                    var: a * a * c.var + s * s,
                    label: c.label,
                })
                .collect(),
        })
    }

    fn component_log_terms(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let d = self.dim as f64;
        self.components
            .iter()
            .map(|c| {
                let sq: f64 = x
                    .iter()
                    .zip(c.mean.iter())
                    .map(|(xi, mi)| (xi - mi) * (xi - mi))
                    .sum();
                c.weight.ln() - 0.5 * d * (2.0 * PI * c.var).ln() - 0.5 * sq / c.var
            })
            .collect()
    }

    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        log_sum_exp(&self.component_log_terms(x))
    }

    /// Posterior component probabilities `γ_i(x)`.
    pub fn responsibilities(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let terms = self.component_log_terms(x);
        let lse = log_sum_exp(&terms);
        terms.into_iter().map(|l| (l - lse).exp()).collect()
    }

    /// `∇_x log p(x) = Σ_i γ_i(x) (μ_i − x) / var_i`.
    pub fn score(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let gamma = self.responsibilities(x);
        let mut out = Array1::zeros(self.dim);
        for (c, g) in self.components.iter().zip(gamma) {
            let k = g / c.var;
            ndarray::Zip::from(&mut out)
                .and(&c.mean)
                .and(&x)
                .for_each(|o, &m, &xi| *o += k * (m - xi));
        }
        out
    }

    /// Draws `count` i.i.d. samples: a component by weight, then a Gaussian.
    pub fn sample_x0(&self, count: usize, seed: u64) -> Vec<LabeledSample> {
        let mut rng = seeded(seed);
        let cumulative: Vec<f64> = self
            .components
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c.weight;
                Some(*acc)
            })
            .collect();
        (0..count)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
                let idx = cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(self.components.len() - 1);
                let comp = &self.components[idx];
                let std = comp.var.sqrt();
                let x0 = comp
                    .mean
                    .mapv(|m| m + std * rng.sample::<f64, _>(StandardNormal));
                LabeledSample {
                    x0,
                    label: comp.label,
                    component: idx,
                }
            })
            .collect()
    }

    /// Samples stacked into a `count × dim` matrix.
    pub fn sample_matrix(&self, count: usize, seed: u64) -> Array2<f64> {
        let samples = self.sample_x0(count, seed);
        let mut out = Array2::zeros((count, self.dim));
        for (mut row, s) in out.rows_mut().into_iter().zip(samples) {
            row.assign(&s.x0);
        }
        out
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Exact ε-prediction at step `t`: `ε = −σ_t ∇ log p_t(x)`. With a label the
/// mixture is first restricted to that label's components.
pub fn eps_oracle(
    gmm: &Gmm,
    schedule: &NoiseSchedule,
    t: usize,
    x: ArrayView1<f64>,
    label: Option<usize>,
) -> Result<Array1<f64>> {
    if x.len() != gmm.dim() {
        return Err(Error::ShapeMismatch {
            what: "query point",
            expected: gmm.dim(),
            got: x.len(),
        });
    }
    let base = match label {
        Some(l) => gmm.restrict(l)?,
        None => gmm.clone(),
    };
    let noised = base.noised(schedule, t)?;
    Ok(noised.score(x) * (-schedule.sigma(t)))
}

/// Row-wise [`eps_oracle`] with a per-row label.
pub fn eps_oracle_batch(
    gmm: &Gmm,
    schedule: &NoiseSchedule,
    t: usize,
    x: &Array2<f64>,
    labels: &[Option<usize>],
) -> Result<Array2<f64>> {
    if labels.len() != x.nrows() {
        return Err(Error::ShapeMismatch {
            what: "label list",
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    if x.ncols() != gmm.dim() {
        return Err(Error::ShapeMismatch {
            what: "query width",
            expected: gmm.dim(),
            got: x.ncols(),
        });
    }
    schedule.check_step(t)?;
    let sigma = schedule.sigma(t);
    let uncond = gmm.noised(schedule, t)?;
    let mut per_label: Vec<(usize, Gmm)> = Vec::new();
    let mut out = Array2::zeros(x.raw_dim());
    for (i, label) in labels.iter().enumerate() {
        let mixture = match label {
            None => &uncond,
            Some(l) => {
                let pos = match per_label.iter().position(|(k, _)| k == l) {
                    Some(p) => p,
                    None => {
                        per_label.push((*l, gmm.restrict(*l)?.noised(schedule, t)?));
                        per_label.len() - 1
                    }
                };
                &per_label[pos].1
            }
        };
        out.row_mut(i).assign(&(mixture.score(x.row(i)) * (-sigma)));
    }
    Ok(out)
}

/// Number of components in the built-in benchmark mixture.
pub const BENCH_COMPONENTS: usize = 8;
/// Signal length of the benchmark mixture.
pub const BENCH_DIM: usize = 64;
pub const BENCH_EASY_WEIGHT: f64 = 0.18;
pub const BENCH_DIFFICULT_WEIGHT: f64 = 0.07;
/// Isotropic per-coordinate variance of every benchmark component.
pub const BENCH_VAR: f64 = 0.04;
/// Root-mean-square amplitude of every benchmark mean.
pub const BENCH_MEAN_RMS: f64 = 1.0;
pub const BENCH_EASY_BINS: std::ops::RangeInclusive<usize> = 0..=3;
pub const BENCH_DIFFICULT_BINS: std::ops::RangeInclusive<usize> = 24..=31;

/// The easy/hard-split benchmark and its component partition.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub gmm: Gmm,
    /// Component indices of the easy (low-frequency, heavy) components.
    pub easy: Vec<usize>,
    /// Component indices of the difficult (high-frequency, light) components.
    pub difficult: Vec<usize>,
}

impl Benchmark {
    pub fn is_easy(&self, component: usize) -> bool {
        self.easy.contains(&component)
    }
}

/// Eight components on a length-64 signal. Components 0–3 have means whose
/// DFT energy sits in bins 0–3 (weight 0.18 each); components 4–7 have means
/// with energy only in bins 24–31 (weight 0.07 each). Label `k` is shared by
/// easy component `k` and difficult component `k + 4`, so each conditional is
/// a two-component sub-mixture.
pub fn easy_hard_split(seed: u64) -> Benchmark {
    let mut rng = seeded(seed);
    let mut components = Vec::with_capacity(BENCH_COMPONENTS);
    let half = BENCH_COMPONENTS / 2;
    for i in 0..BENCH_COMPONENTS {
        let easy = i < half;
        let bins = if easy {
            BENCH_EASY_BINS
        } else {
            BENCH_DIFFICULT_BINS
        };
        let mut mean = Array1::<f64>::zeros(BENCH_DIM);
        for k in bins {
            let amp: f64 = rng.sample(StandardNormal);
            let phase = rng.random::<f64>() * 2.0 * PI;
            for (n, m) in mean.iter_mut().enumerate() {
                *m += amp * (2.0 * PI * (k * n) as f64 / BENCH_DIM as f64 + phase).cos();
            }
        }
        let rms = (mean.mapv(|v| v * v).sum() / BENCH_DIM as f64).sqrt();
        mean.mapv_inplace(|v| v * BENCH_MEAN_RMS / rms);
        components.push(Component {
            weight: if easy {
                BENCH_EASY_WEIGHT
            } else {
                BENCH_DIFFICULT_WEIGHT
            },
            mean,
            var: BENCH_VAR,
            label: Some(i % half),
        });
    }
    Benchmark {
        gmm: Gmm {
            dim: BENCH_DIM,
            components,
        },
        easy: (0..half).collect(),
        difficult: (half..BENCH_COMPONENTS).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(weights: &[f64], dim: usize) -> MixtureSpec {
        MixtureSpec {
            dim,
            components: weights
                .iter()
                .enumerate()
                .map(|(i, &w)| ComponentSpec {
                    weight: w,
                    mean: vec![i as f64; dim],
                    var: 1.0,
                    label: Some(i),
                })
                .collect(),
        }
    }

    fn random_gmm(seed: u64, m: usize, dim: usize) -> Gmm {
        let mut rng = seeded(seed);
        let raw: Vec<f64> = (0..m).map(|_| 0.1 + rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let spec = MixtureSpec {
            dim,
            components: raw
                .iter()
                .enumerate()
                .map(|(i, w)| ComponentSpec {
                    weight: w / total,
                    mean: normal_vec(&mut rng, dim).to_vec(),
                    var: 0.3 + rng.random::<f64>(),
                    label: Some(i % 2),
                })
                .collect(),
        };
        Gmm::from_spec(&spec).unwrap()
    }

    #[test]
    fn single_component_is_valid() {
        let g = Gmm::from_spec(&MixtureSpec {
            dim: 3,
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: vec![0.0; 3],
                var: 1.0,
                label: None,
            }],
        })
        .unwrap();
        assert_eq!(g.components().len(), 1);
    }

    #[test]
    fn near_unit_weights_renormalised() {
        let g = Gmm::from_spec(&spec(&[0.5, 0.5001], 2)).unwrap();
        let total: f64 = g.components().iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(Gmm::from_spec(&spec(&[-0.1, 1.1], 2)).is_err());
        assert!(Gmm::from_spec(&spec(&[0.5, 0.4], 2)).is_err());
        assert!(Gmm::from_spec(&spec(&[], 2)).is_err());
        let mut s = spec(&[0.5, 0.5], 2);
        s.components[1].var = -1.0;
        assert!(Gmm::from_spec(&s).is_err());
        let mut s = spec(&[0.5, 0.5], 2);
        s.components[0].mean.push(0.0);
        assert!(Gmm::from_spec(&s).is_err());
    }

    #[test]
    fn spec_json_rejects_unknown_keys() {
        let text = r#"{"dim":1,"components":[{"weight":1.0,"mean":[0.0],"var":1.0,"colour":3}]}"#;
        assert!(serde_json::from_str::<MixtureSpec>(text).is_err());
        let text = r#"{"dim":1,"components":[{"weight":1.0,"mean":[0.0],"var":1.0,"label":2}]}"#;
        let s: MixtureSpec = serde_json::from_str(text).unwrap();
        assert_eq!(s.components[0].label, Some(2));
    }

    #[test]
    fn noised_at_zero_unchanged() {
        let g = random_gmm(1, 3, 4);
        let s = NoiseSchedule::vp(10).unwrap();
        assert_eq!(g.noised(&s, 0).unwrap(), g);
    }

    #[test]
    fn noised_single_component() {
        let g = Gmm::from_spec(&MixtureSpec {
            dim: 1,
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: vec![2.0],
                var: 1.0,
                label: None,
            }],
        })
        .unwrap();
        let s = NoiseSchedule::custom(vec![1.0, 0.8], vec![0.0, 0.6]).unwrap();
        let n = g.noised(&s, 1).unwrap();
        assert!((n.components()[0].mean[0] - 1.6).abs() < 1e-15);
        assert!((n.components()[0].var - 1.0).abs() < 1e-15);
        assert!(g.noised(&s, 2).is_err());
    }

    #[test]
    fn standard_normal_score() {
        let g = Gmm::from_spec(&MixtureSpec {
            dim: 4,
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: vec![0.0; 4],
                var: 1.0,
                label: None,
            }],
        })
        .unwrap();
        let s = g.score(Array1::ones(4).view());
        assert_eq!(s, Array1::from_elem(4, -1.0));
    }

    #[test]
    fn symmetric_pair_score_vanishes_at_origin() {
        let g = Gmm::from_spec(&MixtureSpec {
            dim: 2,
            components: vec![
                ComponentSpec {
                    weight: 0.5,
                    mean: vec![1.0, -2.0],
                    var: 0.5,
                    label: None,
                },
                ComponentSpec {
                    weight: 0.5,
                    mean: vec![-1.0, 2.0],
                    var: 0.5,
                    label: None,
                },
            ],
        })
        .unwrap();
        let s = g.score(array![0.0, 0.0].view());
        assert!(s.iter().all(|v| v.abs() < 1e-15));
    }

    /// Central finite difference of the analytic log-density.
    fn fd_gradient(g: &Gmm, x: &Array1<f64>, h: f64) -> Array1<f64> {
        let mut grad = Array1::zeros(x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            grad[i] = (g.log_density(xp.view()) - g.log_density(xm.view())) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn score_matches_finite_differences() {
        let g = random_gmm(11, 3, 8);
        let s = NoiseSchedule::vp(20).unwrap();
        let gt = g.noised(&s, 7).unwrap();
        let x = normal_vec(&mut seeded(5), 8);
        let fd = fd_gradient(&gt, &x, 1e-5);
        let an = gt.score(x.view());
        for (a, b) in an.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn eps_oracle_zero_noise_is_zero() {
        let g = random_gmm(2, 3, 5);
        let s = NoiseSchedule::vp(10).unwrap();
        let e = eps_oracle(&g, &s, 0, Array1::ones(5).view(), None).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eps_oracle_single_component_closed_form() {
        let g = random_gmm(3, 2, 6);
        let s = NoiseSchedule::vp(10).unwrap();
        let t = 4;
        let x = normal_vec(&mut seeded(9), 6);
        let e = eps_oracle(&g, &s, t, x.view(), Some(1)).unwrap();
        let c = &g.components()[1];
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let expected = (&x - &(&c.mean * a)) * (sg / (a * a * c.var + sg * sg));
        for (p, q) in e.iter().zip(expected.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn eps_oracle_unknown_label() {
        let g = random_gmm(3, 2, 2);
        let s = NoiseSchedule::vp(10).unwrap();
        assert!(matches!(
            eps_oracle(&g, &s, 3, Array1::zeros(2).view(), Some(7)),
            Err(Error::UnknownLabel(7))
        ));
    }

    #[test]
    fn unconditional_is_responsibility_mixture_of_conditionals() {
        let g = random_gmm(21, 5, 6);
        let s = NoiseSchedule::vp(16).unwrap();
        let t = 9;
        let x = normal_vec(&mut seeded(4), 6);
        let uncond = eps_oracle(&g, &s, t, x.view(), None).unwrap();
        // label posterior = sum of component responsibilities per label
        let gamma = g.noised(&s, t).unwrap().responsibilities(x.view());
        let mut combined = Array1::<f64>::zeros(6);
        for label in g.labels() {
            let post: f64 = g
                .components()
                .iter()
                .zip(&gamma)
                .filter(|(c, _)| c.label == Some(label))
                .map(|(_, p)| p)
                .sum();
            combined = combined + eps_oracle(&g, &s, t, x.view(), Some(label)).unwrap() * post;
        }
        for (a, b) in uncond.iter().zip(combined.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_oracle_matches_rowwise() {
        let g = random_gmm(8, 4, 3);
        let s = NoiseSchedule::vp(12).unwrap();
        let x = crate::rng::normal_matrix(&mut seeded(1), 5, 3);
        let labels = [None, Some(0), Some(1), None, Some(0)];
        let batch = eps_oracle_batch(&g, &s, 6, &x, &labels).unwrap();
        for (i, l) in labels.iter().enumerate() {
            let row = eps_oracle(&g, &s, 6, x.row(i), *l).unwrap();
            assert_eq!(batch.row(i), row);
        }
    }

    #[test]
    fn degenerate_variance_samples_sit_on_mean() {
        let g = Gmm::from_spec(&MixtureSpec {
            dim: 4,
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: vec![5.0; 4],
                var: 1e-12,
                label: None,
            }],
        })
        .unwrap();
        for s in g.sample_x0(100, 3) {
            assert!(s.x0.iter().all(|v| (v - 5.0).abs() < 1e-4));
        }
    }

    #[test]
    fn component_frequencies_follow_weights() {
        let bench = easy_hard_split(0);
        let n = 100_000;
        let mut counts = [0usize; BENCH_COMPONENTS];
        for s in bench.gmm.sample_x0(n, 17) {
            counts[s.component] += 1;
        }
        for (c, comp) in counts.iter().zip(bench.gmm.components()) {
            let p = comp.weight;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (*c as f64 - n as f64 * p).abs() < 3.0 * sd,
                "{c} vs {}",
                n as f64 * p
            );
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = random_gmm(4, 3, 3);
        assert_eq!(g.sample_x0(50, 9), g.sample_x0(50, 9));
        assert_ne!(g.sample_x0(50, 9), g.sample_x0(50, 10));
    }

    #[test]
    fn benchmark_spectral_layout() {
        let bench = easy_hard_split(0);
        let g = &bench.gmm;
        assert_eq!(g.components().len(), 8);
        assert_eq!(g.labels(), vec![0, 1, 2, 3]);
        let total: f64 = g.components().iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (i, c) in g.components().iter().enumerate() {
            let energy = crate::eval::dft_energy(c.mean.view());
            let total: f64 = energy.iter().sum();
            let allowed = if bench.is_easy(i) {
                BENCH_EASY_BINS
            } else {
                BENCH_DIFFICULT_BINS
            };
            let inside: f64 = energy
                .iter()
                .enumerate()
                .filter(|(k, _)| allowed.contains(k))
                .map(|(_, e)| e)
                .sum();
            assert!((inside / total - 1.0).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn score_is_gradient_of_log_density(seed in any::<u64>(), m in 1usize..=8, dim in 1usize..=64, t in 1usize..=28) {
            let g = random_gmm(seed, m, dim);
            let s = NoiseSchedule::vp(28).unwrap();
            let gt = g.noised(&s, t).unwrap();
            let x = normal_vec(&mut seeded(seed ^ 1), dim);
            let fd = fd_gradient(&gt, &x, 1e-5);
            let an = gt.score(x.view());
            for (a, b) in an.iter().zip(fd.iter()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn eps_is_negative_sigma_times_score(seed in any::<u64>(), t in 0usize..=28) {
            let g = random_gmm(seed, 4, 6);
            let s = NoiseSchedule::vp(28).unwrap();
            let x = normal_vec(&mut seeded(seed ^ 2), 6);
            let e = eps_oracle(&g, &s, t, x.view(), None).unwrap();
            let direct = g.noised(&s, t).unwrap().score(x.view()) * (-s.sigma(t));
            prop_assert_eq!(e, direct);
        }
    }
}
