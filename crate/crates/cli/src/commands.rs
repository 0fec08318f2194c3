use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use core2::collect::{collect_trajectories, label_plan, read_dataset, write_dataset};
use core2::denoiser::{BaseModel, EpsModel, OracleModel};
use core2::eval::{round_robin_labels, write_csv};
use core2::refine::{cfg_sample, full_window, StrongSource};
use core2::reflect::WeakModel;
use core2::rng::derive_seed;
use serde_json::json;

use crate::config::RunConfig;
use crate::pipeline::{self, Pipeline, Sources};
use crate::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "core2",
    version,
    about = "Collect, reflect and refine on Gaussian-mixture diffusion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train base, collect, reflect, refine and evaluate into runs/<hash>
    Pipeline(PipelineArgs),
    /// Sweep seeded weak/strong instances and report the optimal W2S scale
    Theory(TheoryArgs),
    /// Run guided trajectories with a base checkpoint and store both branches
    Collect(CollectArgs),
    /// Train the weak model on a collected dataset
    Reflect(ReflectArgs),
    /// Sample with slow/fast modes, the zigzag sampler or plain CFG
    Refine(RefineArgs),
    /// Summarise a finished run directory
    Report(ReportArgs),
    /// Fast-mode sample quality against reflect iteration count
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run config JSON; built-in defaults when omitted
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Directory holding one subdirectory per config hash
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub runs: PathBuf,
    /// Rerun stages even when their outputs exist
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    /// Number of instance seeds, starting at 0
    #[arg(long, default_value_t = 200)]
    pub seeds: u64,
    #[arg(long, value_name = "PATH", default_value = "theorem_report.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Base checkpoint
    #[arg(long, value_name = "PATH")]
    pub base: PathBuf,
    #[arg(long, value_name = "PATH", default_value = "data.core2ds")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReflectArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Collected dataset
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH", default_value = "weak.ckpt")]
    pub out: PathBuf,
    /// Override the configured iteration count
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Base checkpoint, or `oracle` for the analytic mixture ε
    #[arg(long, value_name = "PATH|oracle")]
    pub base: PathBuf,
    /// Weak checkpoint; not needed with --cfg-only
    #[arg(long, value_name = "PATH")]
    pub weak: Option<PathBuf>,
    #[arg(long, value_name = "PATH", default_value = "samples.jsonl")]
    pub out: PathBuf,
    /// Override the CFG scale
    #[arg(long)]
    pub omega_cfg: Option<f64>,
    /// Override the W2S scale
    #[arg(long)]
    pub omega_w2s: Option<f64>,
    /// Mode schedule: default, slow, fast, slow:K or one S/F per step
    #[arg(long, visible_alias = "mode-schedule")]
    pub modes: Option<String>,
    /// Zigzag sampler over every step
    #[arg(long, conflicts_with = "modes")]
    pub zigzag: bool,
    /// Plain CFG sampling with the base model only
    #[arg(long, conflicts_with_all = ["zigzag", "modes", "omega_w2s"])]
    pub cfg_only: bool,
    /// Override the sample count
    #[arg(long, visible_alias = "n")]
    pub samples: Option<usize>,
    /// Override the sampling seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory containing manifest.json
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Base checkpoint
    #[arg(long, value_name = "PATH")]
    pub base: PathBuf,
    /// Collected dataset
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Comma-separated reflect iteration counts
    #[arg(long, value_delimiter = ',', default_value = "200,2000,20000")]
    pub iterations: Vec<usize>,
    #[arg(long, value_name = "PATH", default_value = "reflect_ablation.csv")]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Theory(a) => cmd_theory(a),
        Command::Collect(a) => cmd_collect(a),
        Command::Reflect(a) => cmd_reflect(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Report(a) => cmd_report(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Failure> {
    RunConfig::load_or_default(arg.config.as_deref()).map_err(Failure::Config)
}

fn stage<T>(stage: &'static str) -> impl Fn(anyhow::Error) -> Failure {
    move |source| Failure::Stage { stage, source }
}

fn io_stage(stage: &'static str) -> impl Fn(core2::Error) -> Failure {
    move |e| Failure::Stage {
        stage,
        source: e.into(),
    }
}

fn load_base(path: &Path) -> Result<BaseModel, Failure> {
    if !path.is_file() {
        return Err(Failure::Config(anyhow::anyhow!(
            "file not found: {}",
            path.display()
        )));
    }
    BaseModel::load(path)
        .with_context(|| format!("loading base checkpoint {}", path.display()))
        .map_err(Failure::Config)
}

/// `<out>.json` next to an output: config hash, seed and command details.
fn write_sidecar(out: &Path, config: &RunConfig, extra: serde_json::Value) -> anyhow::Result<()> {
    let mut value = json!({
        "config_hash": config.hash()?,
        "seed": config.seed,
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (value.as_object_mut(), extra) {
        obj.extend(more);
    }
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    std::fs::write(
        PathBuf::from(name),
        serde_json::to_string_pretty(&value)? + "\n",
    )?;
    Ok(())
}

pub fn cmd_pipeline(a: PipelineArgs) -> Result<(), Failure> {
    let config = load_config(&a.config)?;
    let p = Pipeline::new(config, &a.runs, a.force)?;
    let report = p.run()?;
    println!("{}", p.dir.display());
    print_summary(&report);
    Ok(())
}

pub fn cmd_theory(a: TheoryArgs) -> Result<(), Failure> {
    let rows = pipeline::theory_rows(a.seeds).map_err(stage::<()>("theory"))?;
    write_csv(
        &a.out,
        &format!(
            "seed, closed-form and grid optimal W2S scale, E(0), E(1), E(omega*), constraints met, pass; seeds 0..{}",
            a.seeds
        ),
        &rows,
    )
    .map_err(io_stage("theory"))?;
    let m = pipeline::theory_metrics(&rows);
    println!(
        "{} / {} instances pass; max |omega* - grid argmin| = {:.2e}",
        m.passed, m.instances, m.max_argmin_gap
    );
    Ok(())
}

pub fn cmd_collect(a: CollectArgs) -> Result<(), Failure> {
    let config = load_config(&a.config)?;
    let base = load_base(&a.base)?;
    let schedule = config.schedule().map_err(Failure::Config)?;
    let bench = config.benchmark().map_err(Failure::Config)?;
    let labels = label_plan(
        bench.gmm.labels().len(),
        config.collect.trajectories_per_label,
    );
    let seed = derive_seed(config.seed, 2);
    let ds = collect_trajectories(
        &base,
        &base.cond,
        &labels,
        &schedule,
        config.collect.omega,
        config.collect.rank,
        seed,
        config.collect.store_xt,
    )
    .map_err(io_stage("collect"))?;
    let bytes = write_dataset(&ds, &a.out).map_err(io_stage("collect"))?;
    write_sidecar(
        &a.out,
        &config,
        json!({"command": "collect", "trajectories": labels.len(), "bytes": bytes}),
    )
    .map_err(stage::<()>("collect"))?;
    println!(
        "{} records, {bytes} bytes -> {}",
        ds.records.len(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_reflect(a: ReflectArgs) -> Result<(), Failure> {
    let mut config = load_config(&a.config)?;
    if let Some(n) = a.iterations {
        config.reflect.iterations = n;
    }
    if !a.data.is_file() {
        return Err(Failure::Config(anyhow::anyhow!(
            "file not found: {}",
            a.data.display()
        )));
    }
    let ds = read_dataset(&a.data)
        .with_context(|| format!("reading dataset {}", a.data.display()))
        .map_err(Failure::Config)?;
    let (weak, metrics) = pipeline::reflect_with(&ds, &config.reflect, derive_seed(config.seed, 3))
        .map_err(stage::<()>("reflect"))?;
    weak.save(&a.out).map_err(io_stage("reflect"))?;
    write_sidecar(
        &a.out,
        &config,
        json!({"command": "reflect", "metrics": metrics}),
    )
    .map_err(stage::<()>("reflect"))?;
    println!(
        "{} iterations, loss {:.4} -> {:.4}; weak model -> {}",
        metrics.iterations,
        metrics.initial_loss,
        metrics.final_loss,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_refine(a: RefineArgs) -> Result<(), Failure> {
    let mut config = load_config(&a.config)?;
    if let Some(w) = a.omega_cfg {
        config.refine.guidance.omega_cfg = w;
    }
    if let Some(w) = a.omega_w2s {
        config.refine.guidance.omega_w2s = w;
    }
    if let Some(m) = &a.modes {
        config.refine.modes = m.clone();
    }
    if a.zigzag {
        config.refine.zigzag_window = Some(full_window(config.num_steps).into_iter().collect());
    }
    if let Some(n) = a.samples {
        config.refine.samples = n;
    }
    let oracle = a.base.as_os_str() == "oracle";
    if oracle {
        config.refine.guidance.strong_source = StrongSource::Oracle;
    }
    config.validate().map_err(Failure::Config)?;
    let schedule = config.schedule().map_err(Failure::Config)?;
    let bench = config.benchmark().map_err(Failure::Config)?;
    let trained = if oracle {
        None
    } else {
        Some(load_base(&a.base)?)
    };
    let analytic = OracleModel {
        gmm: bench.gmm.clone(),
        schedule: schedule.clone(),
    };
    let labels = round_robin_labels(config.refine.samples, bench.gmm.labels().len());
    let seed = a.seed.unwrap_or_else(|| derive_seed(config.seed, 4));

    let (x0, nfe, mode) = if a.cfg_only {
        let (x0, nfe) = cfg_sample(
            trained
                .as_ref()
                .map_or(&analytic as &dyn EpsModel, |m| m as &dyn EpsModel),
            &schedule,
            &labels,
            config.refine.guidance.omega_cfg,
            seed,
        )
        .map_err(io_stage("refine"))?;
        (x0, nfe, "cfg".to_string())
    } else {
        let weak_path = a.weak.as_ref().ok_or_else(|| {
            Failure::Config(anyhow::anyhow!(
                "--weak is required unless --cfg-only is set"
            ))
        })?;
        if !weak_path.is_file() {
            return Err(Failure::Config(anyhow::anyhow!(
                "file not found: {}",
                weak_path.display()
            )));
        }
        let weak = WeakModel::load(weak_path)
            .with_context(|| format!("loading weak checkpoint {}", weak_path.display()))
            .map_err(Failure::Config)?;
        let sources = Sources::resolve(&config, &bench, &schedule, trained.as_ref())
            .map_err(Failure::Config)?;
        let bundle = sources.bundle(&weak, &config, &schedule);
        let run =
            pipeline::refine_run(&bundle, &config, &labels, seed).map_err(stage::<()>("refine"))?;
        let mode = match &config.refine.zigzag_window {
            Some(w) => format!("zigzag:{}", w.iter().collect::<BTreeSet<_>>().len()),
            None => config.refine.modes.clone(),
        };
        (run.x0, run.nfe, mode)
    };
    pipeline::write_samples(&a.out, &x0, &labels).map_err(stage::<()>("refine"))?;
    write_sidecar(
        &a.out,
        &config,
        json!({"command": "refine", "sampling_seed": seed, "mode": mode, "nfe": nfe}),
    )
    .map_err(stage::<()>("refine"))?;
    println!(
        "{} samples ({mode}), base evals {} (cond {}, uncond {}), weak evals {} -> {}",
        labels.len(),
        nfe.base_evals(),
        nfe.base_cond_evals,
        nfe.base_uncond_evals,
        nfe.weak_evals,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_report(a: ReportArgs) -> Result<(), Failure> {
    let path = a.run.join(pipeline::MANIFEST);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    let manifest: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Config)?;
    let mut report: pipeline::PipelineReport = serde_json::from_value({
        let mut r = manifest["report"].clone();
        r["run_dir"] = json!(a.run);
        r
    })
    .with_context(|| format!("parsing report in {}", path.display()))
    .map_err(Failure::Config)?;
    report.run_dir = a.run.clone();
    println!("{}", a.run.display());
    print_summary(&report);
    Ok(())
}

pub fn cmd_ablate(a: AblateArgs) -> Result<(), Failure> {
    let mut config = load_config(&a.config)?;
    config.eval.ablation_iterations = a.iterations.clone();
    let base = load_base(&a.base)?;
    if !a.data.is_file() {
        return Err(Failure::Config(anyhow::anyhow!(
            "file not found: {}",
            a.data.display()
        )));
    }
    let ds = read_dataset(&a.data)
        .with_context(|| format!("reading dataset {}", a.data.display()))
        .map_err(Failure::Config)?;
    let schedule = config.schedule().map_err(Failure::Config)?;
    let bench = config.benchmark().map_err(Failure::Config)?;
    let sources =
        Sources::resolve(&config, &bench, &schedule, Some(&base)).map_err(Failure::Config)?;
    // the weak slot is replaced per point
    let placeholder = WeakModel::new(
        &config.reflect,
        ds.header.dim,
        ds.header.num_steps,
        base.cond.clone(),
        0,
    )
    .map_err(io_stage("ablate"))?;
    let bundle = sources.bundle(&placeholder, &config, &schedule);
    let points = pipeline::ablation(
        &ds,
        &bundle,
        &bench,
        &config,
        derive_seed(config.seed, 3),
        derive_seed(config.seed, 9),
    )
    .map_err(stage::<()>("ablate"))?;
    write_csv(
        &a.out,
        &format!(
            "reflect iterations, final reflect loss, sliced Wasserstein distance and mse of all-fast samples; config {} seed {}",
            config.hash().map_err(Failure::Config)?,
            config.seed
        ),
        &points,
    )
    .map_err(io_stage("ablate"))?;
    for p in &points {
        println!(
            "iterations {:>6}  loss {:.4}  fast swd {:.4}  fast mse {:.4}",
            p.iterations, p.final_loss, p.swd_fast, p.mse_fast
        );
    }
    Ok(())
}

pub fn print_summary(r: &pipeline::PipelineReport) {
    let p = &r.partition;
    println!("config {} seed {}", r.config_hash, r.seed);
    println!(
        "partitioned eps mse  base easy {:.4} difficult {:.4} ratio {:.4}",
        p.base.easy,
        p.base.difficult,
        p.base.ratio()
    );
    println!(
        "                     weak easy {:.4} difficult {:.4} ratio {:.4}",
        p.weak.easy,
        p.weak.difficult,
        p.weak.ratio()
    );
    println!(
        "high-frequency fraction  w2s {:.4} cfg {:.4}",
        r.spectrum.hf_w2s, r.spectrum.hf_cfg
    );
    println!(
        "samples ({})  mse {:.4} swd {:.4}  base evals {}",
        r.refine.modes,
        r.refine.sample_mse,
        r.refine.swd,
        r.refine.nfe.base_evals()
    );
    for t in &r.tradeoff {
        println!(
            "tradeoff slow {:>3} nfe {:>4} mse {:.4} swd {:.4}",
            t.slow_steps, t.nfe, t.mse, t.swd
        );
    }
    for w in &r.w2s {
        println!(
            "w2s {:>5.2} slow {:.4} mixed {:.4} fast {:.4}",
            w.omega_w2s, w.swd_slow, w.swd_mixed, w.swd_fast
        );
    }
    for a in &r.ablation {
        println!("ablation {:>6} fast swd {:.4}", a.iterations, a.swd_fast);
    }
    println!(
        "theory {} / {} pass, max argmin gap {:.2e}",
        r.theory.passed, r.theory.instances, r.theory.max_argmin_gap
    );
    println!("total {:.1} s", r.total_seconds());
}
