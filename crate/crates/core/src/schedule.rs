//! Discrete noise schedules `(α_t, σ_t)` for `t = 0..=T`.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest σ_T a variance-preserving schedule reaches, so α_T stays positive.
pub const SIGMA_MAX: f64 = 0.9999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    VariancePreserving,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    num_steps: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    mode: ScheduleMode,
}

impl NoiseSchedule {
    /// Cosine/sine variance-preserving schedule over `num_steps` steps:
    /// `α_t = cos(π t / (2T + pad))`, `σ_t = sin(π t / (2T + pad))`, with the
    /// pad chosen so that `σ_T == SIGMA_MAX`.
    pub fn vp(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        let t_max = num_steps as f64;
        let end_angle = SIGMA_MAX.asin();
        let pad = t_max * (std::f64::consts::PI / end_angle - 2.0);
        let denom = 2.0 * t_max + pad;
        let mut alphas = Vec::with_capacity(num_steps + 1);
        let mut sigmas = Vec::with_capacity(num_steps + 1);
        for t in 0..=num_steps {
            let angle = std::f64::consts::PI * t as f64 / denom;
            let (s, c) = angle.sin_cos();
            alphas.push(c);
            sigmas.push(s);
        }
        // exact endpoints
        alphas[0] = 1.0;
        sigmas[0] = 0.0;
        Ok(Self {
            num_steps,
            alphas,
            sigmas,
            mode: ScheduleMode::VariancePreserving,
        })
    }

    /// Arbitrary tables; validated against the schedule invariants.
    pub fn custom(alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if alphas.len() != sigmas.len() || alphas.len() < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need equal-length tables with T+1 >= 2 entries, got {} and {}",
                alphas.len(),
                sigmas.len()
            )));
        }
        let schedule = Self {
            num_steps: alphas.len() - 1,
            alphas,
            sigmas,
            mode: ScheduleMode::Custom,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_steps + 1;
        if self.alphas.len() != n || self.sigmas.len() != n {
            return Err(Error::InvalidSchedule("table length != T + 1".into()));
        }
        if self.alphas[0] != 1.0 || self.sigmas[0] != 0.0 {
            return Err(Error::InvalidSchedule("require α_0 = 1 and σ_0 = 0".into()));
        }
        for t in 0..n {
            let (a, s) = (self.alphas[t], self.sigmas[t]);
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "α_{t} = {a} outside (0, 1]"
                )));
            }
            if !(0.0..1.0).contains(&s) {
                return Err(Error::InvalidSchedule(format!(
                    "σ_{t} = {s} outside [0, 1)"
                )));
            }
            if t > 0 && (a > self.alphas[t - 1] || s < self.sigmas[t - 1]) {
                return Err(Error::InvalidSchedule(format!("non-monotone at t = {t}")));
            }
            if self.mode == ScheduleMode::VariancePreserving && (a * a + s * s - 1.0).abs() > 1e-12
            {
                return Err(Error::InvalidSchedule(format!("α² + σ² != 1 at t = {t}")));
            }
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.num_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                min: 0,
                max: self.num_steps,
            });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    /// `x_t = α_t x_0 + σ_t ε`.
    pub fn forward_noise(
        &self,
        x0: ArrayView1<f64>,
        t: usize,
        noise: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_step(t)?;
        if x0.len() != noise.len() {
            return Err(Error::ShapeMismatch {
                what: "noise",
                expected: x0.len(),
                got: noise.len(),
            });
        }
        let (a, s) = (self.alphas[t], self.sigmas[t]);
        Ok(ndarray::Zip::from(&x0)
            .and(&noise)
            .map_collect(|&x, &e| a * x + s * e))
    }
}
