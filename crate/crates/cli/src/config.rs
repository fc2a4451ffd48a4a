//! Run configuration files and their resolution into experiment configs.

use std::fs;
use std::path::Path;

use mixlsq::experiments::{PlainExperimentConfig, PsrExperimentConfig};
use mixlsq::LossKind;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 100 mixtures × 100 starts, 20 configurations × 100 runs.
    Desk,
    /// 1000 mixtures × 100 starts, 100 configurations × 1000 runs.
    Paper,
}

/// A config file as written by the user. Every field is optional; experiment
/// entries may be partial objects.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    seed: Option<u64>,
    scale: Option<Scale>,
    losses: Option<Vec<LossKind>>,
    plain: Option<Vec<Value>>,
    psr: Option<Vec<Value>>,
}

/// Fully resolved settings of one invocation; written next to the outputs and
/// accepted back through `--config` for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub scale: Scale,
    pub losses: Vec<LossKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plain: Vec<PlainExperimentConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub psr: Vec<PsrExperimentConfig>,
}

impl Manifest {
    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Values given on the command line; they win over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scale: Option<Scale>,
    pub losses: Option<Vec<LossKind>>,
    /// Restricts the default experiment list to these dimensions.
    pub dims: Option<Vec<usize>>,
}

pub enum Experiment {
    Plain,
    Psr,
}

fn load_raw(path: Option<&Path>) -> Result<RawConfig, CliError> {
    let Some(path) = path else { return Ok(RawConfig::default()) };
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let raw: RawConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
    match raw.schema_version {
        Some(SCHEMA_VERSION) => Ok(raw),
        Some(v) => Err(CliError::Config(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}"))),
        None => Err(CliError::Config(format!("{} has no schema_version field", path.display()))),
    }
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn preset_counts(experiment: &Experiment, scale: Scale) -> Map<String, Value> {
    let pairs: &[(&str, u64)] = match (experiment, scale) {
        (Experiment::Plain, Scale::Desk) => &[("mixtures", 100), ("starts", 100)],
        (Experiment::Plain, Scale::Paper) => &[("mixtures", 1000), ("starts", 100)],
        (Experiment::Psr, Scale::Desk) => &[("configurations", 20), ("runs", 100)],
        (Experiment::Psr, Scale::Paper) => &[("configurations", 100), ("runs", 1000)],
    };
    pairs.iter().map(|(k, v)| (k.to_string(), Value::from(*v))).collect()
}

/// Defaults, then the scale preset, then the entry itself; the seed always comes from the run.
fn resolve_entry<T>(default: &T, entry: &Value, experiment: &Experiment, scale: Scale, seed: u64) -> Result<T, CliError>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut value = serde_json::to_value(default).expect("defaults serialize");
    merge(&mut value, &Value::Object(preset_counts(experiment, scale)));
    merge(&mut value, entry);
    merge(&mut value, &serde_json::json!({ "seed": seed }));
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid experiment entry: {e}")))
}

pub fn resolve(path: Option<&Path>, experiment: Experiment, overrides: &Overrides) -> Result<Manifest, CliError> {
    let raw = load_raw(path)?;
    let seed = overrides.seed.or(raw.seed).unwrap_or(42);
    let scale = overrides.scale.or(raw.scale).unwrap_or(Scale::Desk);
    // DCS has no registration form, so registration runs default to the mixture losses.
    let default_losses = match experiment {
        Experiment::Plain => LossKind::ALL.to_vec(),
        Experiment::Psr => LossKind::ALL.into_iter().filter(|k| k.is_mixture()).collect(),
    };
    let losses = overrides.losses.clone().or(raw.losses).unwrap_or(default_losses);
    if losses.is_empty() {
        return Err(CliError::Config("the loss selection is empty".into()));
    }
    let keep = |dim: usize| overrides.dims.as_ref().is_none_or(|d| d.contains(&dim));
    let mut manifest =
        Manifest { schema_version: SCHEMA_VERSION, seed, scale, losses, plain: Vec::new(), psr: Vec::new() };
    match experiment {
        Experiment::Plain => {
            let entries = raw.plain.unwrap_or_else(|| {
                [(1, true), (1, false), (2, true), (2, false)]
                    .iter()
                    .map(|(d, s)| serde_json::json!({ "dimension": d, "symmetric": s }))
                    .collect()
            });
            for e in &entries {
                let c: PlainExperimentConfig =
                    resolve_entry(&PlainExperimentConfig::default(), e, &experiment, scale, seed)?;
                c.validate().map_err(|e| CliError::Config(e.to_string()))?;
                if keep(c.dimension) {
                    manifest.plain.push(c);
                }
            }
            if manifest.plain.is_empty() {
                return Err(CliError::Config("no plain experiment left to run".into()));
            }
        }
        Experiment::Psr => {
            let entries =
                raw.psr.unwrap_or_else(|| [2, 3].iter().map(|d| serde_json::json!({ "dimension": d })).collect());
            for e in &entries {
                let c: PsrExperimentConfig =
                    resolve_entry(&PsrExperimentConfig::default(), e, &experiment, scale, seed)?;
                c.validate().map_err(|e| CliError::Config(e.to_string()))?;
                if keep(c.dimension) {
                    manifest.psr.push(c);
                }
            }
            if manifest.psr.is_empty() {
                return Err(CliError::Config("no registration experiment left to run".into()));
            }
        }
    }
    Ok(manifest)
}
