//! End-to-end run: train base, collect, reflect, refine, evaluate.
//!
//! Every stage writes its outputs into the run directory plus a record in
//! `stages/<name>.json` holding the config hash, seed, output list, metrics
//! and wall time. A stage whose record and outputs all exist is skipped.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use core2::collect::{collect_trajectories, label_plan, read_dataset, write_dataset, Dataset};
use core2::denoiser::{train_denoiser, BaseModel, EpsModel, OracleModel};
use core2::eval::{
    base_predictions, eps_queries, guidance_directions, guidance_spectrum, reference_samples,
    round_robin_labels, sample_mse, sliced_wasserstein, spectrum_rows, tradeoff_sweep, w2s_sweep,
    weak_predictions, write_csv, MseSplit, TradeoffPoint, W2sPoint,
};
use core2::gmm::Benchmark;
use core2::refine::{
    Bundle, ModeSchedule, NfeCounter, SampleRun, StrongSource, WeakSource, WeakSourceKind,
};
use core2::reflect::{train_reflect, ReflectConfig, WeakModel};
use core2::rng::derive_seed;
use core2::theory::{build_instance, verify_theorem, InstanceParams};
use core2::NoiseSchedule;
use ndarray::Array2;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Failure;

pub const BASE_CKPT: &str = "base.ckpt";
pub const WEAK_CKPT: &str = "weak.ckpt";
pub const DATASET: &str = "data.core2ds";
pub const SAMPLES: &str = "samples.jsonl";
pub const PARTITION_CSV: &str = "partition_mse.csv";
pub const SPECTRUM_CSV: &str = "spectrum.csv";
pub const TRADEOFF_CSV: &str = "tradeoff.csv";
pub const W2S_CSV: &str = "w2s_sweep.csv";
pub const ABLATION_CSV: &str = "reflect_ablation.csv";
pub const THEOREM_CSV: &str = "theorem_report.csv";
pub const MANIFEST: &str = "manifest.json";

const SEED_BASE: u64 = 1;
const SEED_COLLECT: u64 = 2;
const SEED_REFLECT: u64 = 3;
const SEED_REFINE: u64 = 4;
const SEED_QUERIES: u64 = 5;
const SEED_SPECTRUM: u64 = 6;
const SEED_TRADEOFF: u64 = 7;
const SEED_W2S: u64 = 8;
const SEED_ABLATION: u64 = 9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord<M> {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub seconds: f64,
    pub metrics: M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseMetrics {
    pub iterations: usize,
    /// Mean loss over the last tenth of training.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectMetrics {
    pub trajectories: usize,
    pub records: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectMetrics {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub per_step_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineMetrics {
    pub samples: usize,
    pub modes: String,
    pub nfe: NfeCounter,
    pub sample_mse: f64,
    pub swd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub base: MseSplit,
    pub weak: MseSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMetrics {
    pub hf_w2s: f64,
    pub hf_cfg: f64,
    pub hf_difference: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub iterations: usize,
    pub final_loss: f64,
    pub swd_fast: f64,
    pub mse_fast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryMetrics {
    pub instances: u64,
    pub passed: u64,
    pub constraints_met: u64,
    pub max_argmin_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PartitionRow {
    model: &'static str,
    mse_easy: f64,
    mse_difficult: f64,
    ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremRow {
    pub seed: u64,
    pub omega_star: f64,
    pub grid_argmin: f64,
    pub e0: f64,
    pub e1: f64,
    pub e_star: f64,
    pub constraints_met: bool,
    pub pass: bool,
}

/// Everything the pipeline measured, gathered from the stage records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub base: BaseMetrics,
    pub collect: CollectMetrics,
    pub reflect: ReflectMetrics,
    pub refine: RefineMetrics,
    pub partition: PartitionMetrics,
    pub spectrum: SpectrumMetrics,
    pub tradeoff: Vec<TradeoffPoint>,
    pub w2s: Vec<W2sPoint>,
    pub ablation: Vec<AblationPoint>,
    pub theory: TheoryMetrics,
    /// Wall time per stage in run order.
    pub stage_seconds: Vec<(String, f64)>,
}

impl PipelineReport {
    pub fn total_seconds(&self) -> f64 {
        self.stage_seconds.iter().map(|(_, s)| s).sum()
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub hash: String,
    pub force: bool,
    /// Print stage notices on stderr.
    pub verbose: bool,
}

type StageResult<T> = Result<T, Failure>;

fn stage_err(stage: &'static str) -> impl Fn(anyhow::Error) -> Failure {
    move |source| Failure::Stage { stage, source }
}

impl Pipeline {
    /// Opens `runs_root/<hash>`, creating it if needed.
    pub fn new(config: RunConfig, runs_root: &Path, force: bool) -> Result<Self, Failure> {
        let hash = config.hash().map_err(Failure::Config)?;
        let dir = runs_root.join(&hash[..16]);
        std::fs::create_dir_all(dir.join("stages"))
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::Config)?;
        Ok(Self {
            config,
            dir,
            hash,
            force,
            verbose: true,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn comment(&self, what: &str) -> String {
        format!("{what}; config {} seed {}", self.hash, self.config.seed)
    }

    fn notice(&self, msg: std::fmt::Arguments<'_>) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn record_path(&self, stage: &str) -> PathBuf {
        self.dir.join("stages").join(format!("{stage}.json"))
    }

    fn cached<M: DeserializeOwned>(&self, stage: &str, outputs: &[&str]) -> Option<StageRecord<M>> {
        if self.force || !outputs.iter().all(|o| self.path(o).is_file()) {
            return None;
        }
        let text = std::fs::read_to_string(self.record_path(stage)).ok()?;
        let record: StageRecord<M> = serde_json::from_str(&text).ok()?;
        (record.config_hash == self.hash).then_some(record)
    }

    /// Runs `body` unless a matching record exists; either way returns the record.
    fn stage<M, F>(
        &self,
        stage: &'static str,
        outputs: &[&str],
        body: F,
    ) -> StageResult<StageRecord<M>>
    where
        M: Serialize + DeserializeOwned,
        F: FnOnce() -> anyhow::Result<M>,
    {
        if let Some(record) = self.cached(stage, outputs) {
            self.notice(format_args!("stage {stage} cached"));
            return Ok(record);
        }
        self.notice(format_args!("stage {stage} running"));
        let start = Instant::now();
        let metrics = body().map_err(stage_err(stage))?;
        let record = StageRecord {
            stage: stage.to_string(),
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            seconds: start.elapsed().as_secs_f64(),
            metrics,
        };
        let text = serde_json::to_string_pretty(&record)
            .context("encoding stage record")
            .map_err(stage_err(stage))?;
        std::fs::write(self.record_path(stage), text + "\n")
            .context("writing stage record")
            .map_err(stage_err(stage))?;
        self.notice(format_args!(
            "stage {stage} done in {:.1} s",
            record.seconds
        ));
        Ok(record)
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.config.seed, stream)
    }

    pub fn run(&self) -> StageResult<PipelineReport> {
        let config = &self.config;
        let bench = config.benchmark().map_err(stage_err("setup"))?;
        let schedule = config.schedule().map_err(stage_err("setup"))?;
        let num_labels = bench.gmm.labels().len();
        if num_labels == 0 {
            return Err(Failure::Config(anyhow::anyhow!(
                "mixture has no labelled components"
            )));
        }
        let mut seconds = Vec::new();

        let base_rec = self.stage("base", &[BASE_CKPT], || {
            let trained =
                train_denoiser(&config.base, &bench.gmm, &schedule, self.seed(SEED_BASE))?;
            trained.model.save(self.path(BASE_CKPT))?;
            let tail = (trained.losses.len() / 10).max(1);
            let final_loss = trained.losses.iter().rev().take(tail).sum::<f64>() / tail as f64;
            Ok(BaseMetrics {
                iterations: trained.losses.len(),
                final_loss,
            })
        })?;
        seconds.push(("base".to_string(), base_rec.seconds));
        let base =
            BaseModel::load(self.path(BASE_CKPT)).map_err(|e| stage_err("base")(e.into()))?;

        let collect_rec = self.stage("collect", &[DATASET], || {
            let labels = label_plan(num_labels, config.collect.trajectories_per_label);
            let ds = collect_trajectories(
                &base,
                &base.cond,
                &labels,
                &schedule,
                config.collect.omega,
                config.collect.rank,
                self.seed(SEED_COLLECT),
                config.collect.store_xt,
            )?;
            let bytes = write_dataset(&ds, self.path(DATASET))?;
            Ok(CollectMetrics {
                trajectories: ds.header.num_trajectories,
                records: ds.records.len(),
                bytes,
            })
        })?;
        seconds.push(("collect".to_string(), collect_rec.seconds));

        let reflect_rec = self.stage("reflect", &[WEAK_CKPT], || {
            let ds = read_dataset(self.path(DATASET))?;
            let (model, metrics) = reflect_with(&ds, &config.reflect, self.seed(SEED_REFLECT))?;
            model.save(self.path(WEAK_CKPT))?;
            Ok(metrics)
        })?;
        seconds.push(("reflect".to_string(), reflect_rec.seconds));
        let weak =
            WeakModel::load(self.path(WEAK_CKPT)).map_err(|e| stage_err("reflect")(e.into()))?;

        let sources = Sources::resolve(config, &bench, &schedule, Some(&base))
            .map_err(stage_err("refine"))?;
        let bundle = sources.bundle(&weak, config, &schedule);

        let refine_rec = self.stage("refine", &[SAMPLES], || {
            let labels = round_robin_labels(config.refine.samples, num_labels);
            let run = refine_run(&bundle, config, &labels, self.seed(SEED_REFINE))?;
            write_samples(&self.path(SAMPLES), &run.x0, &labels)?;
            let reference =
                reference_samples(&bench.gmm, &labels, derive_seed(self.seed(SEED_REFINE), 1))?;
            Ok(RefineMetrics {
                samples: labels.len(),
                modes: match &config.refine.zigzag_window {
                    Some(w) => format!("zigzag:{w:?}"),
                    None => config.refine.modes.clone(),
                },
                nfe: run.nfe,
                sample_mse: sample_mse(&bench.gmm, &run.x0, &labels)?,
                swd: sliced_wasserstein(&run.x0, &reference, config.eval.sweep.projections, 0)?,
            })
        })?;
        seconds.push(("refine".to_string(), refine_rec.seconds));

        let partition_rec = self.stage("partition", &[PARTITION_CSV], || {
            let q = eps_queries(&bench, &schedule, config.eval.queries, self.seed(SEED_QUERIES))?;
            let split = |p: &Array2<f64>| -> anyhow::Result<MseSplit> {
                let (easy, difficult) = core2::eval::partitioned_mse(p, &q.oracle, &q.easy)?;
                Ok(MseSplit { easy, difficult })
            };
            let metrics = PartitionMetrics {
                base: split(&base_predictions(&base, &q)?)?,
                weak: split(&weak_predictions(&base, &weak, &q)?)?,
            };
            let rows = [("base", metrics.base), ("weak", metrics.weak)].map(|(model, s)| PartitionRow {
                model,
                mse_easy: s.easy,
                mse_difficult: s.difficult,
                ratio: s.ratio(),
            });
            write_csv(
                self.path(PARTITION_CSV),
                &self.comment("model, mean squared eps error against the oracle on easy and difficult queries, difficult/easy ratio"),
                &rows,
            )?;
            Ok(metrics)
        })?;
        seconds.push(("partition".to_string(), partition_rec.seconds));

        let spectrum_rec = self.stage("spectrum", &[SPECTRUM_CSV], || {
            let labels = round_robin_labels(config.eval.spectrum_trajectories, num_labels);
            let (w2s, cfg) = guidance_directions(&bundle, &labels, self.seed(SEED_SPECTRUM))?;
            let s = guidance_spectrum(&w2s, &cfg)?;
            write_csv(
                self.path(SPECTRUM_CSV),
                &self.comment(&format!(
                    "bin, mean DFT energy of the W2S and CFG directions; hf fraction w2s {:.6} cfg {:.6}",
                    s.w2s.high_frequency_fraction, s.cfg.high_frequency_fraction
                )),
                &spectrum_rows(&s),
            )?;
            Ok(SpectrumMetrics {
                hf_w2s: s.w2s.high_frequency_fraction,
                hf_cfg: s.cfg.high_frequency_fraction,
                hf_difference: s.hf_difference,
            })
        })?;
        seconds.push(("spectrum".to_string(), spectrum_rec.seconds));

        let tradeoff_rec = self.stage("tradeoff", &[TRADEOFF_CSV], || {
            let points = tradeoff_sweep(
                &bundle,
                &bench.gmm,
                &config.slow_counts(),
                &config.eval.sweep,
                self.seed(SEED_TRADEOFF),
            )?;
            write_csv(
                self.path(TRADEOFF_CSV),
                &self.comment("slow steps (first), base evaluations per sample, sample mse, sliced Wasserstein distance"),
                &points,
            )?;
            Ok(points)
        })?;
        seconds.push(("tradeoff".to_string(), tradeoff_rec.seconds));

        let w2s_rec = self.stage("w2s_sweep", &[W2S_CSV], || {
            let points = w2s_sweep(
                &bundle,
                &bench.gmm,
                &config.eval.omegas_w2s,
                &config.eval.sweep,
                self.seed(SEED_W2S),
            )?;
            write_csv(
                self.path(W2S_CSV),
                &self.comment("W2S scale, sliced Wasserstein distance of all-slow, default-schedule and all-fast samples"),
                &points,
            )?;
            Ok(points)
        })?;
        seconds.push(("w2s_sweep".to_string(), w2s_rec.seconds));

        let ablation_rec = self.stage("ablation", &[ABLATION_CSV], || {
            let ds = read_dataset(self.path(DATASET))?;
            let points = ablation(&ds, &bundle, &bench, config, self.seed(SEED_REFLECT), self.seed(SEED_ABLATION))?;
            write_csv(
                self.path(ABLATION_CSV),
                &self.comment("reflect iterations, final reflect loss, sliced Wasserstein distance and mse of all-fast samples"),
                &points,
            )?;
            Ok(points)
        })?;
        seconds.push(("ablation".to_string(), ablation_rec.seconds));

        let theory_rec = self.stage("theory", &[THEOREM_CSV], || {
            let rows = theory_rows(config.eval.theory_seeds)?;
            write_csv(
                self.path(THEOREM_CSV),
                &self.comment("seed, closed-form and grid optimal W2S scale, E(0), E(1), E(omega*), constraints met, pass"),
                &rows,
            )?;
            Ok(theory_metrics(&rows))
        })?;
        seconds.push(("theory".to_string(), theory_rec.seconds));

        let report = PipelineReport {
            run_dir: self.dir.clone(),
            config_hash: self.hash.clone(),
            seed: config.seed,
            base: base_rec.metrics,
            collect: collect_rec.metrics,
            reflect: reflect_rec.metrics,
            refine: refine_rec.metrics,
            partition: partition_rec.metrics,
            spectrum: spectrum_rec.metrics,
            tradeoff: tradeoff_rec.metrics,
            w2s: w2s_rec.metrics,
            ablation: ablation_rec.metrics,
            theory: theory_rec.metrics,
            stage_seconds: seconds,
        };
        self.write_manifest(&report)
            .map_err(stage_err("manifest"))?;
        Ok(report)
    }

    fn write_manifest(&self, report: &PipelineReport) -> anyhow::Result<()> {
        let mut outputs = serde_json::Map::new();
        for name in [
            BASE_CKPT,
            DATASET,
            WEAK_CKPT,
            SAMPLES,
            PARTITION_CSV,
            SPECTRUM_CSV,
            TRADEOFF_CSV,
            W2S_CSV,
            ABLATION_CSV,
            THEOREM_CSV,
        ] {
            let bytes =
                std::fs::read(self.path(name)).with_context(|| format!("hashing {name}"))?;
            outputs.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)).into());
        }
        let mut report_value = serde_json::to_value(report)?;
        if let Some(obj) = report_value.as_object_mut() {
            // keep the manifest relocatable
            obj.remove("run_dir");
        }
        let manifest = serde_json::json!({
            "config_hash": self.hash,
            "seed": self.config.seed,
            "config": self.config,
            "outputs": outputs,
            "report": report_value,
        });
        std::fs::write(
            self.path(MANIFEST),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }
}

/// Strong and weak models resolved from the guidance config.
pub struct Sources {
    strong: Box<dyn EpsModel>,
    external_weak: Option<BaseModel>,
    guidance: core2::refine::GuidanceConfig,
}

impl Sources {
    pub fn resolve(
        config: &RunConfig,
        bench: &Benchmark,
        schedule: &NoiseSchedule,
        base: Option<&BaseModel>,
    ) -> anyhow::Result<Self> {
        let g = &config.refine.guidance;
        let strong: Box<dyn EpsModel> = match g.strong_source {
            StrongSource::TrainedNet => Box::new(
                base.context("a trained base checkpoint is required")?
                    .clone(),
            ),
            StrongSource::Oracle => Box::new(OracleModel {
                gmm: bench.gmm.clone(),
                schedule: schedule.clone(),
            }),
            StrongSource::ExternalNet => {
                let p = config
                    .refine
                    .strong_checkpoint
                    .as_ref()
                    .context("missing strong checkpoint")?;
                Box::new(BaseModel::load(p).with_context(|| format!("loading {}", p.display()))?)
            }
        };
        let external_weak = match g.weak_source {
            WeakSourceKind::ReflectModel => None,
            WeakSourceKind::ExternalNet => {
                let p = config
                    .refine
                    .weak_checkpoint
                    .as_ref()
                    .context("missing weak checkpoint")?;
                Some(BaseModel::load(p).with_context(|| format!("loading {}", p.display()))?)
            }
        };
        Ok(Self {
            strong,
            external_weak,
            guidance: g.clone(),
        })
    }

    pub fn bundle<'a>(
        &'a self,
        weak: &'a WeakModel,
        _config: &RunConfig,
        schedule: &'a NoiseSchedule,
    ) -> Bundle<'a> {
        Bundle {
            base: self.strong.as_ref(),
            weak: match &self.external_weak {
                Some(m) => WeakSource::External(m),
                None => WeakSource::Reflect(weak),
            },
            guidance: &self.guidance,
            schedule,
        }
    }
}

/// Samples with the configured mode schedule, or the zigzag sampler when a
/// window is set.
pub fn refine_run(
    bundle: &Bundle<'_>,
    config: &RunConfig,
    labels: &[usize],
    seed: u64,
) -> anyhow::Result<SampleRun> {
    Ok(match &config.refine.zigzag_window {
        Some(w) => {
            bundle.zcore2_sample(&w.iter().copied().collect::<BTreeSet<_>>(), labels, seed)?
        }
        None => bundle.sample(&config.mode_schedule()?, labels, seed)?,
    })
}

pub fn reflect_with(
    ds: &Dataset,
    config: &ReflectConfig,
    seed: u64,
) -> anyhow::Result<(WeakModel, ReflectMetrics)> {
    let out = train_reflect(ds, config, seed)?;
    let tail = (out.losses.len() / 10).max(1);
    let head = tail.min(out.losses.len());
    let metrics = ReflectMetrics {
        iterations: out.losses.len(),
        initial_loss: out.losses.iter().take(head).sum::<f64>() / head.max(1) as f64,
        final_loss: out.losses.iter().rev().take(tail).sum::<f64>() / tail as f64,
        per_step_mse: out.per_step_mse,
    };
    Ok((out.model, metrics))
}

/// Fast-mode sample quality of weak models trained for each configured
/// iteration count on the same dataset and seed.
pub fn ablation(
    ds: &Dataset,
    bundle: &Bundle<'_>,
    bench: &Benchmark,
    config: &RunConfig,
    reflect_seed: u64,
    seed: u64,
) -> anyhow::Result<Vec<AblationPoint>> {
    let labels = round_robin_labels(config.eval.sweep.samples, bench.gmm.labels().len());
    let reference = reference_samples(&bench.gmm, &labels, derive_seed(seed, 1))?;
    let fast = ModeSchedule::all_fast(bundle.schedule.num_steps())?;
    config
        .eval
        .ablation_iterations
        .iter()
        .map(|&iterations| {
            let rc = ReflectConfig {
                iterations,
                ..config.reflect.clone()
            };
            let (weak, metrics) = reflect_with(ds, &rc, reflect_seed)?;
            let b = Bundle {
                weak: WeakSource::Reflect(&weak),
                ..*bundle
            };
            let run = b.sample(&fast, &labels, derive_seed(seed, 0))?;
            Ok(AblationPoint {
                iterations,
                final_loss: metrics.final_loss,
                swd_fast: sliced_wasserstein(
                    &run.x0,
                    &reference,
                    config.eval.sweep.projections,
                    derive_seed(seed, 2),
                )?,
                mse_fast: sample_mse(&bench.gmm, &run.x0, &labels)?,
            })
        })
        .collect()
}

/// One report row per instance seed `0..seeds`.
pub fn theory_rows(seeds: u64) -> anyhow::Result<Vec<TheoremRow>> {
    let params = InstanceParams::default();
    (0..seeds)
        .into_par_iter()
        .map(|seed| {
            let inst = build_instance(seed, &params)?;
            let r = verify_theorem(&inst)?;
            Ok(TheoremRow {
                seed,
                omega_star: r.omega_star,
                grid_argmin: r.grid_argmin,
                e0: r.e0,
                e1: r.e1,
                e_star: r.e_star,
                constraints_met: r.constraints_met,
                pass: r.pass(),
            })
        })
        .collect()
}

pub fn theory_metrics(rows: &[TheoremRow]) -> TheoryMetrics {
    TheoryMetrics {
        instances: rows.len() as u64,
        passed: rows.iter().filter(|r| r.pass).count() as u64,
        constraints_met: rows.iter().filter(|r| r.constraints_met).count() as u64,
        max_argmin_gap: rows
            .iter()
            .map(|r| (r.omega_star - r.grid_argmin).abs())
            .fold(0.0, f64::max),
    }
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    index: usize,
    label: usize,
    x0: Vec<f64>,
}

pub fn write_samples(path: &Path, x0: &Array2<f64>, labels: &[usize]) -> anyhow::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (index, (row, &label)) in x0.rows().into_iter().zip(labels).enumerate() {
        let line = SampleLine {
            index,
            label,
            x0: row.to_vec(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> anyhow::Result<(Array2<f64>, Vec<usize>)> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<SampleLine> = text
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    let dim = lines.first().map_or(0, |l| l.x0.len());
    let mut x = Array2::zeros((lines.len(), dim));
    let mut labels = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        if l.x0.len() != dim {
            bail!("sample {i} has {} coordinates, expected {dim}", l.x0.len());
        }
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&l.x0));
        labels.push(l.label);
    }
    Ok((x, labels))
}
