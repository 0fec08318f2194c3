//! Stage III: guidance combinators, deterministic DDIM stepping and inversion,
//! slow/fast sampling with evaluation counting, and the zigzag sampler.
//!
//! Samplers advance a batch of trajectories in lockstep. Row `i` starts from
//! `x_T` drawn from a stream derived from `(seed, i)`, so a row's trajectory
//! does not depend on how many other rows share the batch. Evaluation counts
//! are per trajectory: one batched call adds one to the relevant counter.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::denoiser::{cfg_combine, EpsModel};
use crate::reflect::WeakModel;
use crate::rng::{derive_seed, normal_vec, seeded};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// `(1 − ω) ε_weak + ω ε_strong`; exact at ω = 0 and ω = 1.
pub fn w2s_combine(
    eps_weak: &Array2<f64>,
    eps_strong: &Array2<f64>,
    omega_w2s: f64,
) -> Result<Array2<f64>> {
    if eps_weak.dim() != eps_strong.dim() {
        return Err(Error::ShapeMismatch {
            what: "weak/strong predictions",
            expected: eps_strong.len(),
            got: eps_weak.len(),
        });
    }
    Ok(Zip::from(eps_weak)
        .and(eps_strong)
        .map_collect(|&w, &s| (1.0 - omega_w2s) * w + omega_w2s * s))
}

fn move_coefficients(
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
) -> Result<(f64, f64, f64, f64)> {
    schedule.check_step(from)?;
    schedule.check_step(to)?;
    let (a_from, s_from) = (schedule.alpha(from), schedule.sigma(from));
    if a_from <= 0.0 {
        return Err(Error::InvalidStepPair(format!(
            "α_{from} = {a_from} cannot be divided by"
        )));
    }
    Ok((a_from, s_from, schedule.alpha(to), schedule.sigma(to)))
}

fn check_order(s: usize, t: usize) -> Result<()> {
    if s >= t {
        return Err(Error::InvalidStepPair(format!(
            "need s < t, got s = {s}, t = {t}"
        )));
    }
    Ok(())
}

#[inline]
fn moved(x: f64, e: f64, (a_from, s_from, a_to, s_to): (f64, f64, f64, f64)) -> f64 {
    a_to * (x - s_from * e) / a_from + s_to * e
}

fn move_batch(
    x: &Array2<f64>,
    eps: &Array2<f64>,
    coef: (f64, f64, f64, f64),
) -> Result<Array2<f64>> {
    if x.dim() != eps.dim() {
        return Err(Error::ShapeMismatch {
            what: "ε batch",
            expected: x.len(),
            got: eps.len(),
        });
    }
    Ok(Zip::from(x)
        .and(eps)
        .map_collect(|&x, &e| moved(x, e, coef)))
}

fn move_vec(
    x: ArrayView1<f64>,
    eps: ArrayView1<f64>,
    coef: (f64, f64, f64, f64),
) -> Result<Array1<f64>> {
    if x.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            what: "ε",
            expected: x.len(),
            got: eps.len(),
        });
    }
    Ok(Zip::from(x)
        .and(eps)
        .map_collect(|&x, &e| moved(x, e, coef)))
}

/// Deterministic DDIM update `x_s = α_s (x_t − σ_t ε) / α_t + σ_s ε`, `s < t`.
pub fn ddim_step(
    x_t: ArrayView1<f64>,
    eps: ArrayView1<f64>,
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<Array1<f64>> {
    check_order(s, t)?;
    move_vec(x_t, eps, move_coefficients(t, s, schedule)?)
}

/// Row-wise [`ddim_step`] with identical per-element arithmetic.
pub fn ddim_step_batch(
    x_t: &Array2<f64>,
    eps: &Array2<f64>,
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_order(s, t)?;
    move_batch(x_t, eps, move_coefficients(t, s, schedule)?)
}

/// Inverse of [`ddim_step`] under the same ε: moves `x_s` up to step `t > s`.
pub fn ddim_invert(
    x_s: ArrayView1<f64>,
    eps: ArrayView1<f64>,
    s: usize,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array1<f64>> {
    check_order(s, t)?;
    move_vec(x_s, eps, move_coefficients(s, t, schedule)?)
}

pub fn ddim_invert_batch(
    x_s: &Array2<f64>,
    eps: &Array2<f64>,
    s: usize,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_order(s, t)?;
    move_batch(x_s, eps, move_coefficients(s, t, schedule)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongSource {
    TrainedNet,
    Oracle,
    ExternalNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakSourceKind {
    ReflectModel,
    ExternalNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub omega_cfg: f64,
    pub omega_w2s: f64,
    pub strong_source: StrongSource,
    pub weak_source: WeakSourceKind,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega_cfg: 1.5,
            omega_w2s: 1.5,
            strong_source: StrongSource::TrainedNet,
            weak_source: WeakSourceKind::ReflectModel,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.omega_cfg.is_finite() || !self.omega_w2s.is_finite() {
            return Err(Error::InvalidConfig(
                "guidance scales must be finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Slow,
    Fast,
}

/// Mode per step, stored in sampling order: `modes[0]` is step `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeSchedule {
    modes: Vec<Mode>,
}

impl ModeSchedule {
    pub fn new(modes: Vec<Mode>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidConfig(
                "mode schedule must cover at least one step".into(),
            ));
        }
        Ok(Self { modes })
    }

    /// Slow for the first `slow_steps` steps from `t = T`, fast afterwards.
    pub fn slow_first(num_steps: usize, slow_steps: usize) -> Result<Self> {
        if slow_steps > num_steps {
            return Err(Error::InvalidConfig(format!(
                "{slow_steps} slow steps exceed T = {num_steps}"
            )));
        }
        Self::new(
            (0..num_steps)
                .map(|i| {
                    if i < slow_steps {
                        Mode::Slow
                    } else {
                        Mode::Fast
                    }
                })
                .collect(),
        )
    }

    /// Slow for the first `⌈T/2⌉` steps.
    pub fn default_for(num_steps: usize) -> Result<Self> {
        Self::slow_first(num_steps, num_steps.div_ceil(2))
    }

    pub fn all_slow(num_steps: usize) -> Result<Self> {
        Self::slow_first(num_steps, num_steps)
    }

    pub fn all_fast(num_steps: usize) -> Result<Self> {
        Self::slow_first(num_steps, 0)
    }

    /// `default`, `slow`, `fast`, `slow:K` (first K steps slow), or a string of
    /// `S`/`F` characters in sampling order.
    pub fn parse(spec: &str, num_steps: usize) -> Result<Self> {
        let spec = spec.trim();
        match spec {
            "default" => return Self::default_for(num_steps),
            "slow" => return Self::all_slow(num_steps),
            "fast" => return Self::all_fast(num_steps),
            _ => {}
        }
        if let Some(k) = spec.strip_prefix("slow:") {
            let k = k
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad slow-step count in {spec:?}")))?;
            return Self::slow_first(num_steps, k);
        }
        let modes = spec
            .chars()
            .map(|c| match c {
                'S' | 's' => Ok(Mode::Slow),
                'F' | 'f' => Ok(Mode::Fast),
                _ => Err(Error::InvalidConfig(format!(
                    "unknown mode schedule {spec:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        if modes.len() != num_steps {
            return Err(Error::InvalidConfig(format!(
                "mode schedule has {} entries, T = {num_steps}",
                modes.len()
            )));
        }
        Self::new(modes)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    /// Mode used at step `t` (1-based).
    pub fn mode_at(&self, t: usize) -> Mode {
        self.modes[self.modes.len() - t]
    }

    pub fn slow_steps(&self) -> usize {
        self.modes.iter().filter(|&&m| m == Mode::Slow).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeCounter {
    pub base_cond_evals: u64,
    pub base_uncond_evals: u64,
    pub weak_evals: u64,
}

impl NfeCounter {
    pub fn base_evals(&self) -> u64 {
        self.base_cond_evals + self.base_uncond_evals
    }
}

/// Where the weak prediction comes from. An external network is queried with
/// `(x_t, t, label)` and needs no unconditional base branch.
#[derive(Clone, Copy)]
pub enum WeakSource<'a> {
    Reflect(&'a WeakModel),
    External(&'a dyn EpsModel),
}

#[derive(Clone, Copy)]
pub struct Bundle<'a> {
    /// Supplies both guidance branches (the strong side).
    pub base: &'a dyn EpsModel,
    pub weak: WeakSource<'a>,
    pub guidance: &'a GuidanceConfig,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Debug, Clone)]
pub struct Branches {
    pub cond: Array2<f64>,
    pub uncond: Array2<f64>,
    /// CFG combination of the two base branches.
    pub strong: Array2<f64>,
    pub weak: Array2<f64>,
}

/// Per-step summary of a batched run, averaged over rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub mode: Mode,
    pub mean_x_norm: f64,
    pub mean_eps_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    pub x0: Array2<f64>,
    pub nfe: NfeCounter,
    pub trace: Vec<StepTrace>,
}

/// `x_T ~ N(0, I)` per row from `(seed, row)`.
pub fn initial_noise(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut x = Array2::zeros((n, dim));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row.assign(&normal_vec(&mut seeded(derive_seed(seed, i as u64)), dim));
    }
    x
}

fn mean_row_norm(a: &Array2<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / a.nrows() as f64
}

impl<'a> Bundle<'a> {
    fn check(&self, labels: &[usize]) -> Result<()> {
        self.guidance.validate()?;
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let WeakSource::Reflect(w) = self.weak {
            if w.num_steps() != self.schedule.num_steps() || w.data_dim() != self.base.data_dim() {
                return Err(Error::InvalidConfig(
                    "weak model does not match the base model's T or dim".into(),
                ));
            }
        }
        Ok(())
    }

    fn cond(
        &self,
        x: &Array2<f64>,
        t: usize,
        labels: &[usize],
        nfe: &mut NfeCounter,
    ) -> Result<Array2<f64>> {
        nfe.base_cond_evals += 1;
        let l: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        self.base.eps(x, t, &l)
    }

    fn uncond(&self, x: &Array2<f64>, t: usize, nfe: &mut NfeCounter) -> Result<Array2<f64>> {
        nfe.base_uncond_evals += 1;
        self.base.eps(x, t, &vec![None; x.nrows()])
    }

    fn weak(
        &self,
        x: &Array2<f64>,
        uncond: Option<&Array2<f64>>,
        t: usize,
        labels: &[usize],
        nfe: &mut NfeCounter,
    ) -> Result<Array2<f64>> {
        nfe.weak_evals += 1;
        match self.weak {
            WeakSource::Reflect(w) => w.forward_batch(
                uncond.expect("reflect weak model needs ε_uncond"),
                labels,
                t,
            ),
            WeakSource::External(m) => {
                let l: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
                m.eps(x, t, &l)
            }
        }
    }

    /// Standard CFG prediction: 2 base evaluations.
    pub fn cfg_eps(
        &self,
        x: &Array2<f64>,
        t: usize,
        labels: &[usize],
        nfe: &mut NfeCounter,
    ) -> Result<Array2<f64>> {
        let c = self.cond(x, t, labels, nfe)?;
        let u = self.uncond(x, t, nfe)?;
        Ok(cfg_combine(&u, &c, self.guidance.omega_cfg))
    }

    /// Every prediction a slow step uses: 2 base evaluations and 1 weak.
    pub fn branches(
        &self,
        x: &Array2<f64>,
        t: usize,
        labels: &[usize],
        nfe: &mut NfeCounter,
    ) -> Result<Branches> {
        let cond = self.cond(x, t, labels, nfe)?;
        let uncond = self.uncond(x, t, nfe)?;
        let strong = cfg_combine(&uncond, &cond, self.guidance.omega_cfg);
        let weak = self.weak(x, Some(&uncond), t, labels, nfe)?;
        Ok(Branches {
            cond,
            uncond,
            strong,
            weak,
        })
    }

    /// Slow mode: W2S between the weak prediction and the CFG prediction.
    pub fn slow_eps(
        &self,
        x: &Array2<f64>,
        t: usize,
        labels: &[usize],
        nfe: &mut NfeCounter,
    ) -> Result<Array2<f64>> {
        let b = self.branches(x, t, labels, nfe)?;
        w2s_combine(&b.weak, &b.strong, self.guidance.omega_w2s)
    }

    /// Fast mode: the weak prediction alone.
    pub fn fast_eps(
        &self,
        x: &Array2<f64>,
        t: usize,
        labels: &[usize],
        nfe: &mut NfeCounter,
    ) -> Result<Array2<f64>> {
        let u = match self.weak {
            WeakSource::Reflect(_) => Some(self.uncond(x, t, nfe)?),
            WeakSource::External(_) => None,
        };
        self.weak(x, u.as_ref(), t, labels, nfe)
    }

    /// Slow/fast sampling of one trajectory per label.
    pub fn sample(&self, modes: &ModeSchedule, labels: &[usize], seed: u64) -> Result<SampleRun> {
        self.check(labels)?;
        let num_steps = self.schedule.num_steps();
        if modes.len() != num_steps {
            return Err(Error::InvalidConfig(format!(
                "mode schedule has {} entries, T = {num_steps}",
                modes.len()
            )));
        }
        let mut x = initial_noise(labels.len(), self.base.data_dim(), seed);
        let mut nfe = NfeCounter::default();
        let mut trace = Vec::with_capacity(num_steps);
        for t in (1..=num_steps).rev() {
            let mode = modes.mode_at(t);
            let eps = match mode {
                Mode::Slow => self.slow_eps(&x, t, labels, &mut nfe)?,
                Mode::Fast => self.fast_eps(&x, t, labels, &mut nfe)?,
            };
            trace.push(StepTrace {
                t,
                mode,
                mean_x_norm: mean_row_norm(&x),
                mean_eps_norm: mean_row_norm(&eps),
            });
            x = ddim_step_batch(&x, &eps, t, t - 1, self.schedule)?;
        }
        Ok(SampleRun { x0: x, nfe, trace })
    }

    /// Zigzag sampling. At each step in `window`:
    /// a slow-mode DDIM step to `t − 1`, a fast-mode inversion back to `t`
    /// (weak side evaluated at the source step `max(t − 1, 1)`), then a
    /// standard-CFG DDIM step to `t − 1`. Other steps are plain CFG steps.
    pub fn zcore2_sample(
        &self,
        window: &BTreeSet<usize>,
        labels: &[usize],
        seed: u64,
    ) -> Result<SampleRun> {
        self.check(labels)?;
        let num_steps = self.schedule.num_steps();
        let mut x = initial_noise(labels.len(), self.base.data_dim(), seed);
        let mut nfe = NfeCounter::default();
        let mut trace = Vec::with_capacity(num_steps);
        for t in (1..=num_steps).rev() {
            let mut x_t = x;
            let zig = window.contains(&t);
            if zig {
                let eps_slow = self.slow_eps(&x_t, t, labels, &mut nfe)?;
                let x_prev = ddim_step_batch(&x_t, &eps_slow, t, t - 1, self.schedule)?;
                let eps_fast = self.fast_eps(&x_prev, (t - 1).max(1), labels, &mut nfe)?;
                x_t = ddim_invert_batch(&x_prev, &eps_fast, t - 1, t, self.schedule)?;
            }
            let eps = self.cfg_eps(&x_t, t, labels, &mut nfe)?;
            trace.push(StepTrace {
                t,
                mode: if zig { Mode::Slow } else { Mode::Fast },
                mean_x_norm: mean_row_norm(&x_t),
                mean_eps_norm: mean_row_norm(&eps),
            });
            x = ddim_step_batch(&x_t, &eps, t, t - 1, self.schedule)?;
        }
        Ok(SampleRun { x0: x, nfe, trace })
    }
}

/// Every step `1..=T`: the default zigzag window.
pub fn full_window(num_steps: usize) -> BTreeSet<usize> {
    (1..=num_steps).collect()
}

/// Plain CFG DDIM sampling with the same initial-noise derivation as the
/// other samplers.
pub fn cfg_sample(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    labels: &[usize],
    omega_cfg: f64,
    seed: u64,
) -> Result<(Array2<f64>, NfeCounter)> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut x = initial_noise(labels.len(), model.data_dim(), seed);
    let mut nfe = NfeCounter::default();
    let cond: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    let null = vec![None; labels.len()];
    for t in (1..=schedule.num_steps()).rev() {
        let c = model.eps(&x, t, &cond)?;
        let u = model.eps(&x, t, &null)?;
        nfe.base_cond_evals += 1;
        nfe.base_uncond_evals += 1;
        x = ddim_step_batch(&x, &cfg_combine(&u, &c, omega_cfg), t, t - 1, schedule)?;
    }
    Ok((x, nfe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::collect_trajectories;
    use crate::denoiser::{CondTable, OracleModel};
    use crate::gmm::{easy_hard_split, Gmm, MixtureSpec};
    use crate::reflect::{train_reflect, ReflectConfig};
    use crate::rng::normal_matrix;
    use proptest::prelude::*;

    fn bench(steps: usize) -> (OracleModel, NoiseSchedule) {
        let schedule = NoiseSchedule::vp(steps).unwrap();
        (
            OracleModel {
                gmm: easy_hard_split(0).gmm,
                schedule: schedule.clone(),
            },
            schedule,
        )
    }

    fn weak_for(oracle: &OracleModel, schedule: &NoiseSchedule) -> WeakModel {
        let cond = CondTable::new(4, 2, 3, 1);
        let ds =
            collect_trajectories(oracle, &cond, &[0, 1, 2, 3], schedule, 1.5, 2, 0, false).unwrap();
        let cfg = ReflectConfig {
            hidden: vec![8],
            adapter_rank: 2,
            temb_dim: 4,
            iterations: 3,
            batch_size: 4,
            ..ReflectConfig::default()
        };
        train_reflect(&ds, &cfg, 0).unwrap().model
    }

    /// Oracle conditional prediction used as an external weak model.
    struct CondOnly<'a>(&'a OracleModel);

    impl EpsModel for CondOnly<'_> {
        fn data_dim(&self) -> usize {
            self.0.data_dim()
        }
        fn eps(&self, x: &Array2<f64>, t: usize, labels: &[Option<usize>]) -> Result<Array2<f64>> {
            self.0.eps(x, t, labels)
        }
    }

    #[test]
    fn w2s_examples() {
        let w = Array2::from_elem((1, 5), 1.0);
        let s = Array2::from_elem((1, 5), 2.0);
        assert_eq!(
            w2s_combine(&w, &s, 2.5).unwrap(),
            Array2::from_elem((1, 5), 3.5)
        );
        let mut rng = seeded(1);
        let w = normal_matrix(&mut rng, 3, 7);
        let s = normal_matrix(&mut rng, 3, 7);
        assert_eq!(w2s_combine(&w, &s, 1.0).unwrap(), s);
        assert_eq!(w2s_combine(&w, &s, 0.0).unwrap(), w);
        assert!(w2s_combine(&w, &normal_matrix(&mut rng, 3, 6), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn w2s_collinear(omega in -4.0f64..4.0, seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let w = normal_matrix(&mut rng, 2, 9);
            let s = normal_matrix(&mut rng, 2, 9);
            let out = w2s_combine(&w, &s, omega).unwrap();
            let lhs = &out - &w;
            let rhs = (&s - &w) * omega;
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn inversion_round_trip(seed in 0u64..1000, t in 2usize..50) {
            let schedule = NoiseSchedule::vp(50).unwrap();
            let mut rng = seeded(seed);
            let x = normal_vec(&mut rng, 16);
            let e = normal_vec(&mut rng, 16);
            for s in [0, t / 2, t - 1] {
                let down = ddim_step(x.view(), e.view(), t, s, &schedule).unwrap();
                let back = ddim_invert(down.view(), e.view(), s, t, &schedule).unwrap();
                let err = (&back - &x).mapv(|v| v * v).sum().sqrt();
                prop_assert!(err <= 1e-10 * x.dot(&x).sqrt());
            }
        }
    }

    #[test]
    fn ddim_reductions() {
        let schedule = NoiseSchedule::vp(10).unwrap();
        let x = normal_vec(&mut seeded(2), 8);
        let zero = Array1::zeros(8);
        let down = ddim_step(x.view(), zero.view(), 7, 3, &schedule).unwrap();
        let ratio = schedule.alpha(3) / schedule.alpha(7);
        for (a, b) in down.iter().zip(x.iter()) {
            assert!((a - ratio * b).abs() < 1e-14);
        }
        let up = ddim_invert(x.view(), zero.view(), 3, 7, &schedule).unwrap();
        let ratio = schedule.alpha(7) / schedule.alpha(3);
        for (a, b) in up.iter().zip(x.iter()) {
            assert!((a - ratio * b).abs() < 1e-14);
        }
        assert!(matches!(
            ddim_step(x.view(), zero.view(), 3, 3, &schedule),
            Err(Error::InvalidStepPair(_))
        ));
        assert!(matches!(
            ddim_invert(x.view(), zero.view(), 4, 3, &schedule),
            Err(Error::InvalidStepPair(_))
        ));
        assert!(ddim_step(x.view(), zero.view(), 11, 3, &schedule).is_err());
    }

    #[test]
    fn equal_schedule_entries_are_a_fixed_point() {
        let schedule = NoiseSchedule::custom(vec![1.0, 0.6, 0.6], vec![0.0, 0.8, 0.8]).unwrap();
        let mut rng = seeded(3);
        let x = normal_vec(&mut rng, 6);
        let e = normal_vec(&mut rng, 6);
        let out = ddim_step(x.view(), e.view(), 2, 1, &schedule).unwrap();
        for (a, b) in out.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_alpha_rejected() {
        let schedule = NoiseSchedule::custom(vec![1.0, 0.5, 0.0], vec![0.0, 0.75f64.sqrt(), 1.0]);
        if let Ok(schedule) = schedule {
            let x = Array1::zeros(3);
            assert!(ddim_step(x.view(), x.view(), 2, 1, &schedule).is_err());
        }
    }

    #[test]
    fn mismatched_eps_does_not_invert() {
        let schedule = NoiseSchedule::vp(10).unwrap();
        let mut rng = seeded(4);
        let x = normal_vec(&mut rng, 8);
        let e1 = normal_vec(&mut rng, 8);
        let e2 = normal_vec(&mut rng, 8);
        let down = ddim_step(x.view(), e1.view(), 6, 5, &schedule).unwrap();
        let back = ddim_invert(down.view(), e2.view(), 5, 6, &schedule).unwrap();
        assert!((&back - &x).mapv(f64::abs).sum() > 0.0);
    }

    #[test]
    fn single_gaussian_chain_hits_target() {
        const STEPS: usize = 100;
        let dim = 2;
        let spec: MixtureSpec = serde_json::from_str(
            r#"{"dim":2,"components":[{"weight":1.0,"mean":[1.0,-0.5],"var":0.25}]}"#,
        )
        .unwrap();
        let gmm = Gmm::from_spec(&spec).unwrap();
        let schedule = NoiseSchedule::vp(STEPS).unwrap();
        let oracle = OracleModel {
            gmm,
            schedule: schedule.clone(),
        };
        let n = 10_000;
        let mut x0 = initial_noise(n, dim, 9);
        for t in (1..=STEPS).rev() {
            let e = oracle.eps(&x0, t, &vec![None; n]).unwrap();
            x0 = ddim_step_batch(&x0, &e, t, t - 1, &schedule).unwrap();
        }
        for (j, mu) in [1.0, -0.5].iter().enumerate() {
            let col = x0.column(j);
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!((mean - mu).abs() < 0.05, "mean {mean}");
            assert!((var / 0.25 - 1.0).abs() < 0.10, "var {var}");
        }
    }

    #[test]
    fn mode_schedule_parsing() {
        assert_eq!(ModeSchedule::default_for(5).unwrap().slow_steps(), 3);
        assert_eq!(
            ModeSchedule::parse("slow:2", 4).unwrap().modes(),
            &[Mode::Slow, Mode::Slow, Mode::Fast, Mode::Fast]
        );
        assert_eq!(
            ModeSchedule::parse("SFSF", 4).unwrap().mode_at(4),
            Mode::Slow
        );
        assert_eq!(
            ModeSchedule::parse("SFSF", 4).unwrap().mode_at(1),
            Mode::Fast
        );
        assert!(ModeSchedule::parse("SF", 4).is_err());
        assert!(ModeSchedule::parse("slow:9", 4).is_err());
        assert!(ModeSchedule::parse("quick", 4).is_err());
    }

    #[test]
    fn nfe_counts() {
        let (oracle, schedule) = bench(28);
        let weak = weak_for(&oracle, &schedule);
        let g = GuidanceConfig::default();
        let b = Bundle {
            base: &oracle,
            weak: WeakSource::Reflect(&weak),
            guidance: &g,
            schedule: &schedule,
        };
        let fast = b
            .sample(&ModeSchedule::all_fast(28).unwrap(), &[0, 5 % 4], 1)
            .unwrap()
            .nfe;
        assert_eq!(
            fast,
            NfeCounter {
                base_cond_evals: 0,
                base_uncond_evals: 28,
                weak_evals: 28
            }
        );
        let slow = b
            .sample(&ModeSchedule::all_slow(28).unwrap(), &[0], 1)
            .unwrap()
            .nfe;
        assert_eq!(
            slow,
            NfeCounter {
                base_cond_evals: 28,
                base_uncond_evals: 28,
                weak_evals: 28
            }
        );
        assert_eq!(2 * fast.base_evals(), slow.base_evals());
        for k in 0..=28 {
            let n = b
                .sample(&ModeSchedule::slow_first(28, k).unwrap(), &[2], 1)
                .unwrap()
                .nfe;
            assert_eq!(n.base_evals(), 28 + k as u64);
        }
    }

    #[test]
    fn slow_with_unit_w2s_replays_cfg() {
        let (oracle, schedule) = bench(12);
        let weak = weak_for(&oracle, &schedule);
        let g = GuidanceConfig {
            omega_w2s: 1.0,
            omega_cfg: 2.0,
            ..GuidanceConfig::default()
        };
        let labels = [0, 1, 2, 3];
        let (reference, _) = cfg_sample(&oracle, &schedule, &labels, 2.0, 8).unwrap();
        let external = CondOnly(&oracle);
        for weak_src in [WeakSource::Reflect(&weak), WeakSource::External(&external)] {
            let b = Bundle {
                base: &oracle,
                weak: weak_src,
                guidance: &g,
                schedule: &schedule,
            };
            let run = b
                .sample(&ModeSchedule::all_slow(12).unwrap(), &labels, 8)
                .unwrap();
            assert_eq!(run.x0, reference);
        }
    }

    #[test]
    fn rows_are_independent_of_batch_size() {
        let (oracle, schedule) = bench(6);
        let (all, _) = cfg_sample(&oracle, &schedule, &[1, 2, 3], 1.5, 4).unwrap();
        let (first, _) = cfg_sample(&oracle, &schedule, &[1], 1.5, 4).unwrap();
        assert_eq!(all.row(0), first.row(0));
    }

    #[test]
    fn zigzag_degenerate_and_counting() {
        let (oracle, schedule) = bench(8);
        let weak = weak_for(&oracle, &schedule);
        let g = GuidanceConfig::default();
        let b = Bundle {
            base: &oracle,
            weak: WeakSource::Reflect(&weak),
            guidance: &g,
            schedule: &schedule,
        };
        let labels = [0, 3];
        let (reference, ref_nfe) = cfg_sample(&oracle, &schedule, &labels, g.omega_cfg, 5).unwrap();
        let run = b.zcore2_sample(&BTreeSet::new(), &labels, 5).unwrap();
        assert_eq!(run.x0, reference);
        assert_eq!(run.nfe, ref_nfe);

        let (o2, s2) = bench(2);
        let w2 = weak_for(&o2, &s2);
        let b2 = Bundle {
            base: &o2,
            weak: WeakSource::Reflect(&w2),
            guidance: &g,
            schedule: &s2,
        };
        let run = b2.zcore2_sample(&BTreeSet::from([2]), &labels, 5).unwrap();
        // zigzag step: slow (cond, uncond, weak) + fast inversion (uncond, weak) + CFG (cond, uncond);
        // the remaining step is plain CFG
        assert_eq!(
            run.nfe,
            NfeCounter {
                base_cond_evals: 2 + 1,
                base_uncond_evals: 3 + 1,
                weak_evals: 2
            }
        );
    }

    #[test]
    fn zigzag_diverges_from_slow_sampling() {
        let (oracle, schedule) = bench(8);
        let weak = weak_for(&oracle, &schedule);
        let g = GuidanceConfig::default();
        let b = Bundle {
            base: &oracle,
            weak: WeakSource::Reflect(&weak),
            guidance: &g,
            schedule: &schedule,
        };
        let labels = [1, 2];
        let zig = b.zcore2_sample(&full_window(8), &labels, 3).unwrap();
        let slow = b
            .sample(&ModeSchedule::all_slow(8).unwrap(), &labels, 3)
            .unwrap();
        assert!(zig.x0.iter().zip(slow.x0.iter()).any(|(a, b)| a != b));
        assert!(zig.x0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_labels_rejected() {
        let (oracle, schedule) = bench(4);
        let weak = weak_for(&oracle, &schedule);
        let g = GuidanceConfig::default();
        let b = Bundle {
            base: &oracle,
            weak: WeakSource::Reflect(&weak),
            guidance: &g,
            schedule: &schedule,
        };
        assert!(matches!(
            b.sample(&ModeSchedule::all_fast(4).unwrap(), &[], 0),
            Err(Error::EmptyBatch)
        ));
    }
}
