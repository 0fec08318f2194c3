use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use core2::collect::CollectConfig;
use core2::denoiser::TrainConfig;
use core2::eval::{spectral_partition, SweepConfig};
use core2::gmm::{easy_hard_split, Benchmark};
use core2::refine::{GuidanceConfig, ModeSchedule, StrongSource, WeakSourceKind};
use core2::reflect::ReflectConfig;
use core2::{Gmm, MixtureSpec, NoiseSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Mixture JSON; the built-in easy/hard benchmark when absent.
    pub mixture: Option<PathBuf>,
    pub benchmark_seed: u64,
    pub num_steps: usize,
    pub base: TrainConfig,
    pub collect: CollectConfig,
    pub reflect: ReflectConfig,
    pub refine: RefineSettings,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSettings {
    pub guidance: GuidanceConfig,
    /// `default`, `slow`, `fast`, `slow:K` or one `S`/`F` per step from `t = T` down.
    pub modes: String,
    /// Run the zigzag sampler over these steps instead of the mode schedule.
    pub zigzag_window: Option<Vec<usize>>,
    pub samples: usize,
    /// Base checkpoint serving as the strong model when `strong_source` is `external_net`.
    pub strong_checkpoint: Option<PathBuf>,
    /// Base checkpoint whose conditional branch serves as the weak model when
    /// `weak_source` is `external_net`.
    pub weak_checkpoint: Option<PathBuf>,
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig {
                omega_cfg: 1.0,
                ..GuidanceConfig::default()
            },
            modes: "default".into(),
            zigzag_window: None,
            samples: 512,
            strong_checkpoint: None,
            weak_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Noised clean samples used for the partitioned ε error.
    pub queries: usize,
    pub sweep: SweepConfig,
    /// Slow-step counts for the trade-off sweep; quarter steps of `T` when empty.
    pub slow_counts: Vec<usize>,
    pub omegas_w2s: Vec<f64>,
    /// Trajectories whose guidance directions feed the spectrum.
    pub spectrum_trajectories: usize,
    /// Reflect iteration counts for the ablation; skipped when empty.
    pub ablation_iterations: Vec<usize>,
    pub theory_seeds: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            queries: 8000,
            sweep: SweepConfig {
                samples: 2048,
                projections: 128,
            },
            slow_counts: Vec::new(),
            omegas_w2s: vec![0.0, 0.5, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0],
            spectrum_trajectories: 64,
            ablation_iterations: vec![200, 2000, 20000],
            theory_seeds: 200,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mixture: None,
            benchmark_seed: 0,
            num_steps: 28,
            base: TrainConfig {
                iterations: 15000,
                ..TrainConfig::default()
            },
            collect: CollectConfig {
                omega: 1.0,
                ..CollectConfig::default()
            },
            reflect: ReflectConfig {
                hidden: vec![64, 4],
                ..ReflectConfig::default()
            },
            refine: RefineSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.mixture,
            &mut config.refine.strong_checkpoint,
            &mut config.refine.weak_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Loads `path`, or the built-in defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let config = Self::default();
                config.validate()?;
                Ok(config)
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for p in [
            &self.mixture,
            &self.refine.strong_checkpoint,
            &self.refine.weak_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            if !p.is_file() {
                bail!("file not found: {}", p.display());
            }
        }
        if self.refine.guidance.strong_source == StrongSource::ExternalNet
            && self.refine.strong_checkpoint.is_none()
        {
            bail!("strong_source external_net needs refine.strong_checkpoint");
        }
        if self.refine.guidance.weak_source == WeakSourceKind::ExternalNet
            && self.refine.weak_checkpoint.is_none()
        {
            bail!("weak_source external_net needs refine.weak_checkpoint");
        }
        if self.base.batch_size == 0 {
            bail!("base.batch_size must be positive");
        }
        if self.refine.samples == 0 || self.eval.sweep.samples == 0 || self.eval.queries == 0 {
            bail!("sample and query counts must be positive");
        }
        NoiseSchedule::vp(self.num_steps)?;
        ModeSchedule::parse(&self.refine.modes, self.num_steps)?;
        if let Some(w) = &self.refine.zigzag_window {
            if let Some(&t) = w.iter().find(|&&t| t == 0 || t > self.num_steps) {
                bail!("zigzag step {t} outside 1..={}", self.num_steps);
            }
        }
        if let Some(&k) = self.eval.slow_counts.iter().find(|&&k| k > self.num_steps) {
            bail!("slow-step count {k} exceeds T = {}", self.num_steps);
        }
        self.reflect.validate()?;
        self.refine.guidance.validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> anyhow::Result<NoiseSchedule> {
        Ok(NoiseSchedule::vp(self.num_steps)?)
    }

    /// The data mixture with its easy/difficult split.
    pub fn benchmark(&self) -> anyhow::Result<Benchmark> {
        match &self.mixture {
            None => Ok(easy_hard_split(self.benchmark_seed)),
            Some(p) => {
                let spec = MixtureSpec::from_json_file(p)
                    .with_context(|| format!("reading mixture {}", p.display()))?;
                Ok(spectral_partition(Gmm::from_spec(&spec)?))
            }
        }
    }

    pub fn mode_schedule(&self) -> anyhow::Result<ModeSchedule> {
        Ok(ModeSchedule::parse(&self.refine.modes, self.num_steps)?)
    }

    pub fn slow_counts(&self) -> Vec<usize> {
        if !self.eval.slow_counts.is_empty() {
            return self.eval.slow_counts.clone();
        }
        let t = self.num_steps;
        let mut counts: Vec<usize> = (0..=4).map(|q| q * t / 4).collect();
        counts.dedup();
        counts
    }

    /// Hex SHA-256 over the canonical JSON of the config and the bytes of
    /// every file it references.
    pub fn hash(&self) -> anyhow::Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        for p in [
            &self.mixture,
            &self.refine.strong_checkpoint,
            &self.refine.weak_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            h.update(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"reflect": {"alpah": 3}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.reflect.alpha = 3.0;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn missing_mixture_names_path() {
        let c = RunConfig {
            mixture: Some("/nonexistent/mix.json".into()),
            ..RunConfig::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/mix.json"), "{err}");
    }

    #[test]
    fn quarter_slow_counts() {
        assert_eq!(RunConfig::default().slow_counts(), vec![0, 7, 14, 21, 28]);
    }
}
