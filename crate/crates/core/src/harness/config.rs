//! Run configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DegradationSpec, MissingPolicy};
use crate::distill::TrainSchedule;
use crate::error::{Error, Result};
use crate::exec;
use crate::network::NetworkConfig;

pub const DEVICE_ENV: &str = "GMENET_DEVICE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_kd: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { lambda_kd: 5.0 }
    }
}

/// Built-in pattern dataset written to `data.source_dir` by `prepare-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub per_class: usize,
    pub size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            per_class: 100,
            size: 112,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source_dir: PathBuf,
    /// Defaults to `<source_dir>_lr<target>`.
    pub lr_dir: Option<PathBuf>,
    /// Defaults to `<output_dir>/manifest.jsonl`.
    pub manifest: Option<PathBuf>,
    pub test_fraction: f64,
    pub degradation: DegradationSpec,
    pub missing: MissingPolicy,
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_dir: PathBuf::from("data/source"),
            lr_dir: None,
            manifest: None,
            test_fraction: 0.1,
            degradation: DegradationSpec::default(),
            missing: MissingPolicy::FailFast,
            synthetic: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test-split evaluation period in epochs; the last epoch is always evaluated.
    pub every: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every: 1,
            batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Scalar width for training and evaluation: 32 or 64.
    pub precision: u32,
    pub network: NetworkConfig,
    pub schedule: TrainSchedule,
    pub distill: DistillConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            precision: 32,
            network: NetworkConfig::default(),
            schedule: TrainSchedule::default(),
            distill: DistillConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::Config(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        self.network.validate()?;
        self.schedule.validate()?;
        let l = self.distill.lambda_kd;
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::Config(format!("distill.lambda_kd must be finite and non-negative, got {l}")));
        }
        self.data.degradation.validate()?;
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config(format!(
                "data.test_fraction must lie in [0, 1), got {}",
                self.data.test_fraction
            )));
        }
        if self.eval.every == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("eval.every and eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data
            .manifest
            .clone()
            .unwrap_or_else(|| self.output_dir.join("manifest.jsonl"))
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.network.input_size[0], self.network.input_size[1])
    }
}

/// Everything needed to replay a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub package_version: String,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub precision: u32,
    pub device: String,
    pub config: RunConfig,
}

impl Provenance {
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serialises")
    }
}

#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub provenance: Provenance,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()))
}

/// `key=value` assignment whose value is always read back as a string.
pub fn string_override(key: &str, value: &str) -> String {
    format!("{key}={}", toml::Value::String(value.to_owned()))
}

/// Applies one `dotted.key=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    node.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

fn device_label() -> Result<String> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(if cfg!(feature = "parallel") { "cpu" } else { "cpu-seq" }.into()),
        Ok(v) => match v.as_str() {
            "cpu" | "cpu-seq" => Ok(v),
            other => Err(Error::Config(format!("{DEVICE_ENV}={other:?}: expected \"cpu\" or \"cpu-seq\""))),
        },
    }
}

/// Selects parallel or sequential kernels from the environment; returns the device label.
pub fn apply_device_from_env() -> Result<String> {
    let label = device_label()?;
    exec::set_parallel(label == "cpu");
    Ok(label)
}

/// Reads the optional config file, applies overrides in order, validates.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    let provenance = Provenance {
        package_version: env!("CARGO_PKG_VERSION").to_owned(),
        config_path: path.map(Path::to_path_buf),
        overrides: overrides.to_vec(),
        seed: config.seed,
        precision: config.precision,
        device: device_label()?,
        config: config.clone(),
    };
    Ok(ResolvedConfig { config, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.schedule.lr0, 0.1);
        assert_eq!(c.schedule.lr_decay, 0.4);
        assert_eq!(c.schedule.decay_every, 20);
        assert_eq!(c.schedule.momentum, 0.9);
        assert_eq!(c.schedule.batch_size, 64);
        assert_eq!(c.schedule.epochs, 100);
        assert_eq!(c.distill.lambda_kd, 5.0);
        assert_eq!(c.network.initial_channels, 32);
    }

    #[test]
    fn overrides_win_and_are_typed() {
        let r = resolve_config(
            None,
            &[
                "schedule.epochs=3".into(),
                "network.stage_widths=[8, 16]".into(),
                "network.blocks_per_stage=[1, 1]".into(),
                "network.reduction_ratio=4".into(),
                "output_dir=out/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(r.config.schedule.epochs, 3);
        assert_eq!(r.config.network.stage_widths, vec![8, 16]);
        assert_eq!(r.config.output_dir, PathBuf::from("out/x"));
        assert_eq!(r.provenance.overrides.len(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(resolve_config(None, &["schedule.epoch=3".into()]), Err(Error::Config(_))));
        assert!(matches!(resolve_config(None, &["nonsense".into()]), Err(Error::Config(_))));
    }
}
