//! Metrics and reports: oracle-partitioned ε error, sliced Wasserstein
//! distance, DFT spectra of guidance directions and the quality/cost sweeps.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::EpsModel;
use crate::gmm::{eps_oracle_batch, Benchmark, Gmm};
use crate::refine::{
    ddim_step_batch, initial_noise, w2s_combine, Bundle, GuidanceConfig, ModeSchedule, NfeCounter,
};
use crate::reflect::WeakModel;
use crate::rng::{derive_seed, normal_vec, seeded};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// One-sided energy spectrum of a real vector, bins `0..=d/2`. Interior bins
/// carry both the positive and negative frequency, so the bins sum to `‖v‖²`.
pub fn dft_energy(v: ArrayView1<f64>) -> Vec<f64> {
    let d = v.len();
    if d == 0 {
        return Vec::new();
    }
    (0..=d / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in v.iter().enumerate() {
                // reduce k·n mod d first to keep the angle small
                let angle = 2.0 * PI * ((k * n) % d) as f64 / d as f64;
                re += x * angle.cos();
                im -= x * angle.sin();
            }
            let power = (re * re + im * im) / d as f64;
            if k == 0 || 2 * k == d {
                power
            } else {
                2.0 * power
            }
        })
        .collect()
}

/// First bin counted as high frequency: the upper half of the one-sided
/// spectrum.
pub fn high_frequency_cutoff(dim: usize) -> usize {
    dim / 4
}

/// Share of the energy at or above [`high_frequency_cutoff`]; zero for an
/// all-zero spectrum.
pub fn high_frequency_fraction(energy: &[f64], dim: usize) -> f64 {
    let total: f64 = energy.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    energy[high_frequency_cutoff(dim).min(energy.len())..]
        .iter()
        .sum::<f64>()
        / total
}

/// Splits an arbitrary mixture into easy and difficult components by the
/// spectrum of each mean: a component is difficult when most of its mean's
/// energy sits at or above [`high_frequency_cutoff`].
pub fn spectral_partition(gmm: Gmm) -> Benchmark {
    let (mut easy, mut difficult) = (Vec::new(), Vec::new());
    for (k, c) in gmm.components().iter().enumerate() {
        if high_frequency_fraction(&dft_energy(c.mean.view()), gmm.dim()) > 0.5 {
            difficult.push(k);
        } else {
            easy.push(k);
        }
    }
    Benchmark {
        gmm,
        easy,
        difficult,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    /// Mean energy per one-sided bin over the population.
    pub bins: Vec<f64>,
    pub high_frequency_fraction: f64,
}

pub fn spectrum_report(vectors: &Array2<f64>) -> Result<SpectrumReport> {
    if vectors.nrows() == 0 {
        return Err(Error::Empty("vector population"));
    }
    let d = vectors.ncols();
    let mut bins = vec![0.0; d / 2 + 1];
    for row in vectors.rows() {
        for (b, e) in bins.iter_mut().zip(dft_energy(row)) {
            *b += e;
        }
    }
    let n = vectors.nrows() as f64;
    bins.iter_mut().for_each(|b| *b /= n);
    Ok(SpectrumReport {
        high_frequency_fraction: high_frequency_fraction(&bins, d),
        bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuidanceSpectrum {
    /// `ε_strong − ε_weak`.
    pub w2s: SpectrumReport,
    /// `ε_cond − ε_uncond`.
    pub cfg: SpectrumReport,
    /// W2S minus CFG high-frequency fraction.
    pub hf_difference: f64,
}

pub fn guidance_spectrum(
    w2s_dirs: &Array2<f64>,
    cfg_dirs: &Array2<f64>,
) -> Result<GuidanceSpectrum> {
    if w2s_dirs.dim() != cfg_dirs.dim() {
        return Err(Error::ShapeMismatch {
            what: "direction populations",
            expected: cfg_dirs.len(),
            got: w2s_dirs.len(),
        });
    }
    let w2s = spectrum_report(w2s_dirs)?;
    let cfg = spectrum_report(cfg_dirs)?;
    Ok(GuidanceSpectrum {
        hf_difference: w2s.high_frequency_fraction - cfg.high_frequency_fraction,
        w2s,
        cfg,
    })
}

/// Both guidance directions at every step of slow-mode trajectories, one
/// trajectory per label entry.
pub fn guidance_directions(
    bundle: &Bundle<'_>,
    labels: &[usize],
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let num_steps = bundle.schedule.num_steps();
    let dim = bundle.base.data_dim();
    let n = labels.len();
    let mut w2s = Array2::zeros((n * num_steps, dim));
    let mut cfg = Array2::zeros((n * num_steps, dim));
    let mut x = initial_noise(n, dim, seed);
    let mut nfe = NfeCounter::default();
    for (k, t) in (1..=num_steps).rev().enumerate() {
        let b = bundle.branches(&x, t, labels, &mut nfe)?;
        for i in 0..n {
            w2s.row_mut(k * n + i)
                .assign(&(&b.strong.row(i) - &b.weak.row(i)));
            cfg.row_mut(k * n + i)
                .assign(&(&b.cond.row(i) - &b.uncond.row(i)));
        }
        let eps = w2s_combine(&b.weak, &b.strong, bundle.guidance.omega_w2s)?;
        x = ddim_step_batch(&x, &eps, t, t - 1, bundle.schedule)?;
    }
    Ok((w2s, cfg))
}

/// Evaluates `model` row by row with per-row steps, batching rows that share
/// a step.
pub fn eval_rows(
    model: &dyn EpsModel,
    x: &Array2<f64>,
    steps: &[usize],
    labels: &[Option<usize>],
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.dim());
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by_key(|&i| steps[i]);
    for group in order.chunk_by(|&a, &b| steps[a] == steps[b]) {
        let xs = x.select(ndarray::Axis(0), group);
        let ls: Vec<Option<usize>> = group.iter().map(|&i| labels[i]).collect();
        let e = model.eps(&xs, steps[group[0]], &ls)?;
        for (r, &i) in group.iter().enumerate() {
            out.row_mut(i).assign(&e.row(r));
        }
    }
    Ok(out)
}

/// Noisy conditional queries with their exact ε and easy/difficult partition.
#[derive(Debug, Clone)]
pub struct EpsQueries {
    pub x_t: Array2<f64>,
    pub steps: Vec<usize>,
    pub labels: Vec<usize>,
    /// Whether the oracle's most responsible component at `x_t` is easy.
    pub easy: Vec<bool>,
    /// Exact conditional ε.
    pub oracle: Array2<f64>,
}

/// `n` queries: labelled clean samples noised to a uniformly drawn step.
pub fn eps_queries(
    bench: &Benchmark,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<EpsQueries> {
    let gmm = &bench.gmm;
    let samples = gmm.sample_x0(n, derive_seed(seed, 0));
    let mut rng = seeded(derive_seed(seed, 1));
    let d = gmm.dim();
    let mut x_t = Array2::zeros((n, d));
    let mut steps = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let t = rng.random_range(1..=schedule.num_steps());
        let noise = normal_vec(&mut rng, d);
        x_t.row_mut(i)
            .assign(&schedule.forward_noise(s.x0.view(), t, noise.view())?);
        steps.push(t);
        labels.push(
            s.label
                .ok_or_else(|| Error::InvalidConfig("benchmark component without label".into()))?,
        );
    }
    let mut easy = Vec::with_capacity(n);
    let mut oracle = Array2::zeros((n, d));
    for t in 1..=schedule.num_steps() {
        let rows: Vec<usize> = (0..n).filter(|&i| steps[i] == t).collect();
        if rows.is_empty() {
            continue;
        }
        let xs = x_t.select(ndarray::Axis(0), &rows);
        let ls: Vec<Option<usize>> = rows.iter().map(|&i| Some(labels[i])).collect();
        let e = eps_oracle_batch(gmm, schedule, t, &xs, &ls)?;
        for (r, &i) in rows.iter().enumerate() {
            oracle.row_mut(i).assign(&e.row(r));
        }
    }
    for i in 0..n {
        let noised = gmm.noised(schedule, steps[i])?;
        let resp = noised.responsibilities(x_t.row(i));
        let top = resp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        easy.push(bench.is_easy(top));
    }
    Ok(EpsQueries {
        x_t,
        steps,
        labels,
        easy,
        oracle,
    })
}

/// Mean `‖pred − oracle‖²` over the easy rows and over the difficult rows.
pub fn partitioned_mse(
    preds: &Array2<f64>,
    oracle: &Array2<f64>,
    easy: &[bool],
) -> Result<(f64, f64)> {
    if preds.dim() != oracle.dim() || easy.len() != preds.nrows() {
        return Err(Error::ShapeMismatch {
            what: "predictions vs oracle",
            expected: oracle.nrows(),
            got: preds.nrows(),
        });
    }
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for ((p, o), &e) in preds.rows().into_iter().zip(oracle.rows()).zip(easy) {
        let k = usize::from(!e);
        sums[k] += p.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        counts[k] += 1;
    }
    if counts[0] == 0 {
        return Err(Error::Empty("easy partition"));
    }
    if counts[1] == 0 {
        return Err(Error::Empty("difficult partition"));
    }
    Ok((sums[0] / counts[0] as f64, sums[1] / counts[1] as f64))
}

/// Conditional predictions of the base model on the queries.
pub fn base_predictions(base: &dyn EpsModel, q: &EpsQueries) -> Result<Array2<f64>> {
    let labels: Vec<Option<usize>> = q.labels.iter().map(|&l| Some(l)).collect();
    eval_rows(base, &q.x_t, &q.steps, &labels)
}

/// Weak predictions on the queries, fed with the base model's `ε_uncond`.
pub fn weak_predictions(
    base: &dyn EpsModel,
    weak: &WeakModel,
    q: &EpsQueries,
) -> Result<Array2<f64>> {
    let uncond = eval_rows(base, &q.x_t, &q.steps, &vec![None; q.steps.len()])?;
    weak.forward_rows(&uncond, &q.labels, &q.steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseSplit {
    pub easy: f64,
    pub difficult: f64,
}

impl MseSplit {
    pub fn ratio(&self) -> f64 {
        self.difficult / self.easy
    }
}

fn sorted_projection(a: &Array2<f64>, u: &Array1<f64>) -> Vec<f64> {
    let mut p: Vec<f64> = a.rows().into_iter().map(|r| r.dot(u)).collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Squared 2-Wasserstein distance between two sorted 1-D empirical
/// distributions of possibly different sizes (exact quantile coupling).
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as u128, b.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev: u128 = 0;
    let mut total = 0.0;
    // breakpoints on the common grid with denominator n·m
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let next = next_a.min(next_b);
        let diff = a[i] - b[j];
        total += diff * diff * (next - prev) as f64;
        prev = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    total / (n * m) as f64
}

/// Mean over `projections` seeded unit directions of the 1-D 2-Wasserstein
/// distance between the projected sample sets.
pub fn sliced_wasserstein(
    a: &Array2<f64>,
    b: &Array2<f64>,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Empty("sample set"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch {
            what: "sample dimension",
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    if projections == 0 {
        return Err(Error::InvalidConfig("need at least one projection".into()));
    }
    let mut rng = seeded(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut u = normal_vec(&mut rng, a.ncols());
        let norm = u.dot(&u).sqrt();
        u /= norm;
        total += w2_sq_sorted(&sorted_projection(a, &u), &sorted_projection(b, &u)).sqrt();
    }
    Ok(total / projections as f64)
}

/// Labels `0, 1, …, L−1, 0, 1, …` for `n` rows.
pub fn round_robin_labels(n: usize, num_labels: usize) -> Vec<usize> {
    (0..n).map(|i| i % num_labels).collect()
}

/// Clean samples from each row's conditional sub-mixture.
pub fn reference_samples(gmm: &Gmm, labels: &[usize], seed: u64) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), gmm.dim()));
    let mut max_label = 0;
    for &l in labels {
        max_label = max_label.max(l);
    }
    for l in 0..=max_label {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == l).collect();
        if rows.is_empty() {
            continue;
        }
        let s = gmm
            .restrict(l)?
            .sample_matrix(rows.len(), derive_seed(seed, l as u64));
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(i).assign(&s.row(r));
        }
    }
    Ok(out)
}

/// Mean over rows of the per-coordinate squared distance to the nearest mean
/// of the row's conditional sub-mixture.
pub fn sample_mse(gmm: &Gmm, samples: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::Empty("sample set"));
    }
    let d = gmm.dim() as f64;
    let mut total = 0.0;
    for (row, &l) in samples.rows().into_iter().zip(labels) {
        let best = gmm
            .components()
            .iter()
            .filter(|c| c.label == Some(l))
            .map(|c| {
                row.iter()
                    .zip(&c.mean)
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return Err(Error::UnknownLabel(l));
        }
        total += best / d;
    }
    Ok(total / samples.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub slow_steps: usize,
    /// Base-model evaluations per sample.
    pub nfe: u64,
    pub mse: f64,
    pub swd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub samples: usize,
    pub projections: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            projections: 128,
        }
    }
}

/// Samples a population per slow-step count (slow steps first) from the same
/// initial noise and scores it against the target mixture.
pub fn tradeoff_sweep(
    bundle: &Bundle<'_>,
    gmm: &Gmm,
    slow_counts: &[usize],
    config: &SweepConfig,
    seed: u64,
) -> Result<Vec<TradeoffPoint>> {
    let num_steps = bundle.schedule.num_steps();
    let labels = round_robin_labels(config.samples, gmm.labels().len());
    let reference = reference_samples(gmm, &labels, derive_seed(seed, 1))?;
    slow_counts
        .par_iter()
        .map(|&k| {
            let modes = ModeSchedule::slow_first(num_steps, k)?;
            let run = bundle.sample(&modes, &labels, derive_seed(seed, 0))?;
            Ok(TradeoffPoint {
                slow_steps: k,
                nfe: run.nfe.base_evals(),
                mse: sample_mse(gmm, &run.x0, &labels)?,
                swd: sliced_wasserstein(
                    &run.x0,
                    &reference,
                    config.projections,
                    derive_seed(seed, 2),
                )?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2sPoint {
    pub omega_w2s: f64,
    pub swd_slow: f64,
    /// Default schedule: slow for the first half of the steps, fast after.
    pub swd_mixed: f64,
    pub swd_fast: f64,
}

/// All-slow and default-schedule sampling at each `ω_w2s` against all-fast
/// sampling, on common initial noise. The fast population does not depend on
/// `ω_w2s`.
pub fn w2s_sweep(
    bundle: &Bundle<'_>,
    gmm: &Gmm,
    omegas: &[f64],
    config: &SweepConfig,
    seed: u64,
) -> Result<Vec<W2sPoint>> {
    let num_steps = bundle.schedule.num_steps();
    let labels = round_robin_labels(config.samples, gmm.labels().len());
    let reference = reference_samples(gmm, &labels, derive_seed(seed, 1))?;
    let score = |x: &Array2<f64>| {
        sliced_wasserstein(x, &reference, config.projections, derive_seed(seed, 2))
    };
    let fast = bundle.sample(
        &ModeSchedule::all_fast(num_steps)?,
        &labels,
        derive_seed(seed, 0),
    )?;
    let swd_fast = score(&fast.x0)?;
    omegas
        .par_iter()
        .map(|&omega_w2s| {
            let guidance = GuidanceConfig {
                omega_w2s,
                ..bundle.guidance.clone()
            };
            let b = Bundle {
                guidance: &guidance,
                ..*bundle
            };
            let slow = b.sample(
                &ModeSchedule::all_slow(num_steps)?,
                &labels,
                derive_seed(seed, 0),
            )?;
            let mixed = b.sample(
                &ModeSchedule::default_for(num_steps)?,
                &labels,
                derive_seed(seed, 0),
            )?;
            Ok(W2sPoint {
                omega_w2s,
                swd_slow: score(&slow.x0)?,
                swd_mixed: score(&mixed.x0)?,
                swd_fast,
            })
        })
        .collect()
}

/// Writes `# <comment>` followed by CSV rows with a header.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, comment: &str, rows: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# {comment}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumRow {
    pub bin: usize,
    pub energy_w2s: f64,
    pub energy_cfg: f64,
}

pub fn spectrum_rows(s: &GuidanceSpectrum) -> Vec<SpectrumRow> {
    s.w2s
        .bins
        .iter()
        .zip(&s.cfg.bins)
        .enumerate()
        .map(|(bin, (&energy_w2s, &energy_cfg))| SpectrumRow {
            bin,
            energy_w2s,
            energy_cfg,
        })
        .collect()
}
