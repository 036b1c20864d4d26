//! Run configuration: a TOML file, environment overrides and `key=value`
//! overrides, merged in that order of increasing precedence.
//!
//! Environment variables named `KFATT__SECTION__KEY` mirror `--set
//! section.key=value`; a lone `KFATT__SEED` sets the top-level seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::GenConfig;
use crate::error::{Error, Result};
use crate::eval::TieMode;
use crate::model::{KernelMode, ModelConfig, TrainConfig};

pub const ENV_PREFIX: &str = "KFATT__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ties: TieMode,
    pub bench_kernels: Vec<String>,
    pub bench_lengths: Vec<usize>,
    pub bench_reps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ties: TieMode::Half,
            bench_kernels: vec!["transformer".into(), "transformer_full".into(), "kfatt_freq".into()],
            bench_lengths: vec![25, 50, 100, 250],
            bench_reps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub metrics: PathBuf,
    pub bench_report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "run/data".into(),
            checkpoint: "run/model.ckpt".into(),
            loss_log: "run/loss.log".into(),
            metrics: "run/metrics.txt".into(),
            bench_report: "run/bench.txt".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization and batch order.
    pub seed: u64,
    pub datagen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

/// The parts of a config that determine results; paths are excluded.
#[derive(Serialize)]
struct DigestView<'a> {
    seed: u64,
    datagen: &'a GenConfig,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    eval: &'a EvalConfig,
}

impl RunConfig {
    /// Hex SHA-256 of the canonical JSON of everything except `paths`.
    pub fn digest(&self) -> String {
        let view = DigestView {
            seed: self.seed,
            datagen: &self.datagen,
            model: &self.model,
            train: &self.train,
            eval: &self.eval,
        };
        let canonical = serde_json::to_string(&view).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.datagen.validate();
        errs.extend(self.model.validate());
        errs.extend(self.train.validate());
        if self.eval.bench_lengths.contains(&0) {
            errs.push("eval.bench_lengths must be positive".into());
        }
        for k in &self.eval.bench_kernels {
            if k != "transformer_full" && k.parse::<KernelMode>().is_err() {
                errs.push(format!("eval.bench_kernels: unknown kernel `{k}`"));
            }
        }
        errs
    }

    /// Parses TOML text and applies overrides (`section.key=value`).
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut root: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(vec![format!("config: {}", e.message())]))?;
        for (key, raw) in overrides {
            set_path(&mut root, key, parse_value(raw))?;
        }
        check_kernel(&root)?;
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("config: {}", e.message())]))?;
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(cfg)
    }

    /// Reads `path`, then applies environment overrides, then `sets`.
    pub fn load(path: &Path, sets: &[String], env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("config file {}: {e}", path.display())]))?;
        let mut overrides = env_overrides(env);
        for s in sets {
            overrides.push(parse_assignment(s)?);
        }
        Self::from_toml_str(&text, &overrides)
    }

    /// Canonical TOML rendering.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `section.key=value` → (`section.key`, `value`).
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(vec![format!("override `{s}` is not key=value")])),
    }
}

/// Overrides from `KFATT__SECTION__KEY=value` variables, sorted by name.
pub fn env_overrides(env: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let path = rest.split("__").map(str::to_ascii_lowercase).collect::<Vec<_>>().join(".");
            (!path.is_empty()).then_some((path, v))
        })
        .collect();
    out.sort();
    out
}

/// TOML scalar or array if it parses as one, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("{key}: `{}` is not a section", parts[..i].join("."))]))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

fn check_kernel(root: &toml::Value) -> Result<()> {
    if let Some(k) = root.get("model").and_then(|m| m.get("kernel")) {
        match k.as_str() {
            Some(s) => {
                s.parse::<KernelMode>()?;
            }
            None => return Err(Error::Config(vec!["model.kernel: expected a string".into()])),
        }
    }
    Ok(())
}
