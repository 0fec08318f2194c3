//! Orchestration for the `core2` binary: run configuration, the staged
//! pipeline with on-disk caching, and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::RunConfig;
pub use pipeline::{Pipeline, PipelineReport};

/// Why a command stopped. Configuration problems exit with 1, stage
/// failures with 2.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Stage {
        stage: &'static str,
        source: anyhow::Error,
    },
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Stage { .. } => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e:#}"),
            Failure::Stage { stage, source } => write!(f, "stage {stage} failed: {source:#}"),
        }
    }
}

impl std::error::Error for Failure {}

/// Caps the global rayon pool at `CORE2_THREADS` when set.
pub fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("CORE2_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Config(anyhow::anyhow!(
            "CORE2_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}
