//! Pipeline config: one TOML file, every key overridable with `--set`.

use std::path::{Path, PathBuf};

use kvg_core::data_engine::SynthConfig;
use kvg_core::evaluation::EvalConfig;
use kvg_core::grpo::GrpoConfig;
use kvg_core::reward::RewardConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub toy_env: ToyEnvConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
}

/// Inputs and the output directory. Relative paths in a config file are
/// taken relative to that file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: Option<PathBuf>,
    pub sources: Option<PathBuf>,
    pub scenes: Option<PathBuf>,
    pub cots: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEnvConfig {
    pub scenes: usize,
    pub candidates: usize,
}

impl Default for ToyEnvConfig {
    fn default() -> Self {
        ToyEnvConfig { scenes: 16, candidates: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_samples: usize,
    pub threshold: f64,
    /// Per-sample hit rate of the bundled toy scorer.
    pub scorer_accuracy: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { n_samples: 4, threshold: 0.5, scorer_accuracy: 0.5 }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let check = |what: &str, r: kvg_core::Result<()>| r.map_err(|e| CliError::config(format!("[{what}] {e}")));
        check("synth", self.synth.validate())?;
        check("reward", self.reward.validate())?;
        check("grpo", self.grpo.validate())?;
        check("eval", self.eval.validate())?;
        if self.toy_env.scenes == 0 || self.toy_env.candidates < 2 {
            return Err(CliError::config("[toy_env] needs scenes >= 1 and candidates >= 2"));
        }
        let f = &self.filter;
        if f.n_samples == 0 {
            return Err(CliError::config("[filter] n_samples must be positive"));
        }
        if !(f.threshold > 0.0 && f.threshold <= 1.0) {
            return Err(CliError::config(format!("[filter] threshold must be in (0, 1], got {}", f.threshold)));
        }
        if !(0.0..=1.0).contains(&f.scorer_accuracy) {
            return Err(CliError::config(format!("[filter] scorer_accuracy must be in [0, 1], got {}", f.scorer_accuracy)));
        }
        Ok(())
    }
}

/// One `key.path = value` assignment applied on top of the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(key: &str, value: impl Into<toml::Value>) -> Self {
        Override { key: key.to_string(), value: value.into() }
    }

    /// Parses `key=value`; the value is TOML, or a bare string if it is not.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override `{s}` is not key=value")))?;
        Ok(Override { key: key.trim().to_string(), value: parse_value(raw.trim()) })
    }

    pub fn path(key: &str, p: &Path) -> Self {
        Override::new(key, p.to_string_lossy().into_owned())
    }
}

/// Reads `file` (if any), applies the overrides in order, and validates.
pub fn load(file: Option<&Path>, overrides: &[Override]) -> Result<PipelineConfig, CliError> {
    let mut root = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        set_key(&mut root, &o.key, o.value.clone())?;
    }
    let mut cfg: PipelineConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(format!("config: {}", e.message())))?;
    if let Some(base) = file.and_then(Path::parent) {
        resolve_paths(&mut cfg.paths, base, overrides);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_key(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Rebases relative paths that came from the config file, not from overrides.
fn resolve_paths(paths: &mut Paths, base: &Path, overrides: &[Override]) {
    let overridden = |name: &str| overrides.iter().any(|o| o.key == format!("paths.{name}"));
    let fields: [(&str, &mut Option<PathBuf>); 10] = [
        ("out_dir", &mut paths.out_dir),
        ("sources", &mut paths.sources),
        ("scenes", &mut paths.scenes),
        ("cots", &mut paths.cots),
        ("responses", &mut paths.responses),
        ("pairs", &mut paths.pairs),
        ("gt", &mut paths.gt),
        ("predictions", &mut paths.predictions),
        ("baseline", &mut paths.baseline),
        ("traces", &mut paths.traces),
    ];
    for (name, slot) in fields {
        if overridden(name) {
            continue;
        }
        if let Some(p) = slot.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
