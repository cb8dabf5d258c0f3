use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use pcl_core::{run, Mode, RunConfig};

use crate::Usage;

/// Environment variable that supplies the seed when `--seed` is absent.
pub const SEED_ENV: &str = "PC_SEED";

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = crate::parse_mode)]
    pub mode: Option<Mode>,
    /// Stream preset (class_inc_default, domain_inc_default, task_agnostic_default).
    #[arg(long)]
    pub stream: Option<String>,
    /// Overrides the config seed and `PC_SEED`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Dotted-key override such as `train.lambda=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    /// Config file, then flags, then `--set` overrides, then resolution.
    pub fn build(&self) -> Result<RunConfig> {
        self.layer().and_then(|cfg| resolve(cfg, &[]))
    }

    /// Like [`ConfigArgs::build`] with `extra` overrides applied last.
    pub fn build_with(&self, extra: &[(String, String)]) -> Result<RunConfig> {
        self.layer().and_then(|cfg| resolve(cfg, extra))
    }

    fn layer(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Usage(format!("{}: {e}", path.display())))?;
                serde_json::from_str::<RunConfig>(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed.map(Ok).or_else(env_seed).transpose()? {
            cfg.seed = seed;
        }
        if let Some(name) = &self.stream {
            cfg.preset = Some(name.clone());
        }
        if let Some(mode) = self.mode {
            cfg.train.mode = mode;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        let overrides = self
            .set
            .iter()
            .map(|s| run::parse_override(s).map_err(|e| Usage(e.to_string())))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        cfg.with_overrides(&overrides).map_err(|e| Usage(e.to_string()).into())
    }
}

fn resolve(cfg: RunConfig, extra: &[(String, String)]) -> Result<RunConfig> {
    let cfg = cfg.with_overrides(extra).map_err(|e| Usage(e.to_string()))?;
    cfg.resolve().map_err(|e| Usage(e.to_string()).into())
}

fn env_seed() -> Option<Result<u64>> {
    let raw = std::env::var(SEED_ENV).ok()?;
    Some(
        raw.trim()
            .parse()
            .map_err(|_| Usage(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")).into()),
    )
}
