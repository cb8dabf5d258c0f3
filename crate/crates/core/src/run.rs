//! Experiment runs: resolved configuration, run directory layout and
//! manifests.
//!
//! A run directory holds `config.json`, `manifest.json`, `matrix.csv`,
//! `loss.csv`, `stages.json`, `checkpoint/` and `fingerprint.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{Mode, ModelConfig, ToyModel};
use crate::datagen::{self, StreamSpec, TaskStream};
use crate::error::{io_err, Error, Result};
use crate::io;
use crate::trainer::{StageReport, StepLog, StreamOutcome, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Copied into the stream, model and training seeds on resolve.
    pub seed: u64,
    /// Stream preset name, expanded into `stream` on resolve.
    pub preset: Option<String>,
    pub stream: StreamSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: None,
            stream: StreamSpec::class_inc_default(0),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn new(preset: &str, mode: Mode, seed: u64) -> Result<Self> {
        let mut cfg = Self {
            preset: Some(preset.to_string()),
            seed,
            ..Self::default()
        };
        cfg.train.mode = mode;
        cfg.resolve()
    }

    /// Replaces `stream` with the named preset, if any.
    pub fn expand_preset(mut self) -> Result<Self> {
        if let Some(name) = self.preset.take() {
            self.stream = StreamSpec::preset(&name, self.seed)
                .ok_or_else(|| Error::Config(format!("unknown stream preset `{name}`")))?;
        }
        Ok(self)
    }

    /// Expands the preset, propagates the seed and fills the class count.
    pub fn resolve(self) -> Result<Self> {
        let mut cfg = self.expand_preset()?;
        cfg.stream.seed = cfg.seed;
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.model.classes = cfg.stream.total_classes();
        cfg.stream.validate()?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        if (cfg.stream.patches, cfg.stream.patch_dim) != (cfg.model.patches, cfg.model.patch_dim) {
            return Err(Error::Config(format!(
                "stream geometry {}x{} differs from model geometry {}x{}",
                cfg.stream.patches, cfg.stream.patch_dim, cfg.model.patches, cfg.model.patch_dim
            )));
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides addressed by dotted paths, e.g.
    /// `train.lambda=0.5`. Values parse as JSON when possible and as plain
    /// strings otherwise. The preset is expanded first so stream fields can
    /// be overridden.
    pub fn with_overrides(self, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self.expand_preset()?)?;
        for (key, raw) in overrides {
            set_path(&mut tree, key, raw)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("override: {e}")))
    }

    /// Hash of the resolved configuration.
    pub fn run_id(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }
}

/// Parses `key=value`.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn set_path(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked");
    }
    Err(Error::Config("empty override key".into()))
}

/// Hash over the crate sources compiled into this binary.
pub fn code_hash() -> String {
    const SOURCES: &[&str] = &[
        include_str!("backbone.rs"),
        include_str!("baselines.rs"),
        include_str!("codebook.rs"),
        include_str!("datagen.rs"),
        include_str!("gradcheck.rs"),
        include_str!("io.rs"),
        include_str!("metrics.rs"),
        include_str!("optim.rs"),
        include_str!("pgm.rs"),
        include_str!("pmm.rs"),
        include_str!("run.rs"),
        include_str!("trainer.rs"),
        include_str!("../../tensor/src/tape.rs"),
        include_str!("../../tensor/src/tensor.rs"),
    ];
    let mut h = Sha256::new();
    for s in SOURCES {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: RunConfig,
    pub stream_hash: String,
    pub code_hash: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            run_id: cfg.run_id(),
            config: cfg.clone(),
            stream_hash: cfg.stream.hash(),
            code_hash: code_hash(),
            outputs: [
                "config.json",
                "manifest.json",
                "matrix.csv",
                "loss.csv",
                "stages.json",
                "checkpoint",
                "fingerprint.json",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

#[derive(Debug, Serialize)]
struct Fingerprint {
    os: &'static str,
    arch: &'static str,
    package_version: &'static str,
    frozen_hash_before: String,
    frozen_hash_after: String,
    float: &'static str,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub outcome: StreamOutcome,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub model: ToyModel,
}

/// Loss log as CSV, one row per optimizer step.
pub fn loss_csv(log: &[StepLog]) -> String {
    let mut out = String::from("task,epoch,step,ce,orth,reg,matching,total\n");
    for s in log {
        let t = &s.terms;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.task + 1,
            s.epoch + 1,
            s.step,
            t.ce,
            t.orth,
            t.reg,
            t.matching,
            t.total
        )
        .expect("string write");
    }
    out
}

/// Trains the configured stream end to end. With `out` set, every artifact
/// is written below it. `hook` sees the trainer after each stage.
pub fn run(
    cfg: &RunConfig,
    out: Option<&Path>,
    hook: impl FnMut(&Trainer, &StageReport) -> Result<()>,
) -> Result<RunResult> {
    let cfg = cfg.clone().resolve()?;
    let stream = datagen::generate(&cfg.stream)?;
    run_on(&cfg, &stream, out, hook)
}

/// As [`run`], on an already generated stream that must match the
/// configured one.
pub fn run_on(
    cfg: &RunConfig,
    stream: &TaskStream,
    out: Option<&Path>,
    mut hook: impl FnMut(&Trainer, &StageReport) -> Result<()>,
) -> Result<RunResult> {
    let cfg = cfg.clone().resolve()?;
    if stream.spec != cfg.stream {
        return Err(Error::Config("stream does not match the configured stream".into()));
    }
    let model = ToyModel::new(cfg.model.clone(), &cfg.stream)?;
    let before = model.frozen_hash();
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let outcome = trainer.train_stream(stream, |t, r| hook(t, r))?;
    let after = trainer.model.frozen_hash();
    let manifest = RunManifest::new(&cfg);
    if let Some(dir) = out {
        write_artifacts(dir, &cfg, &manifest, &outcome, &trainer.model, &before, &after)?;
    }
    Ok(RunResult {
        manifest,
        outcome,
        frozen_hash_before: before,
        frozen_hash_after: after,
        model: trainer.model,
    })
}

fn write_artifacts(
    dir: &Path,
    cfg: &RunConfig,
    manifest: &RunManifest,
    outcome: &StreamOutcome,
    model: &ToyModel,
    before: &str,
    after: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    io::write_json(&dir.join("config.json"), cfg)?;
    io::write_json(&dir.join("manifest.json"), manifest)?;
    outcome.matrix.write_csv(&dir.join("matrix.csv"))?;
    let loss = dir.join("loss.csv");
    std::fs::write(&loss, loss_csv(&outcome.log)).map_err(io_err(&loss))?;
    io::write_json(&dir.join("stages.json"), &outcome.stages)?;
    model.save(&dir.join("checkpoint"))?;
    io::write_json(
        &dir.join("fingerprint.json"),
        &Fingerprint {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            package_version: env!("CARGO_PKG_VERSION"),
            frozen_hash_before: before.to_string(),
            frozen_hash_after: after.to_string(),
            float: "f64",
        },
    )
}

/// Default run directory name for a config.
pub fn default_run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{}-{}", cfg.train.mode, cfg.run_id()))
}
