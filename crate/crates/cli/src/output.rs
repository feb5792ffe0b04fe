use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::CliError;

/// Effective config plus what produced an artifact. Written as the first
/// line of every manifest and as a field of every report.
#[derive(Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    /// `paths.out_dir` is left out so relocating a run does not change
    /// its artifacts.
    pub config: PipelineConfig,
}

pub struct Context {
    pub command: &'static str,
    pub cfg: PipelineConfig,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(command: &'static str, cfg: PipelineConfig) -> Result<Self, CliError> {
        let out_dir = cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out_dir)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", out_dir.display())))?;
        Ok(Context { command, cfg, out_dir })
    }

    pub fn provenance(&self) -> Provenance {
        let mut config = self.cfg.clone();
        config.paths.out_dir = None;
        Provenance {
            tool: "kvg",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config,
        }
    }

    /// An input path that must exist: from the config, else `fallback`
    /// under the output directory.
    pub fn input(&self, key: &str, value: &Option<PathBuf>, fallback: Option<&str>) -> Result<PathBuf, CliError> {
        let path = match (value, fallback) {
            (Some(p), _) => p.clone(),
            (None, Some(f)) => self.out_dir.join(f),
            (None, None) => return Err(CliError::config(format!("missing input: set paths.{key} or pass --{key}"))),
        };
        if !path.exists() {
            return Err(CliError::config(format!("paths.{key}: {} does not exist", path.display())));
        }
        Ok(path)
    }

    pub fn write_manifest<'a, T: Serialize + 'a>(
        &self,
        name: &str,
        records: impl IntoIterator<Item = &'a T>,
    ) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(name);
        kvg_core::manifest::write_jsonl_with(&path, Some(&self.provenance()), records)?;
        Ok(path)
    }

    /// Pretty JSON object `{"provenance": .., key: value}`.
    pub fn write_report<T: Serialize>(&self, name: &str, key: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut doc = serde_json::Map::new();
        doc.insert("provenance".into(), to_value(&self.provenance())?);
        doc.insert(key.into(), to_value(value)?);
        let mut text = serde_json::to_string_pretty(&doc).map_err(internal)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Writes a text report and echoes it to stdout.
    pub fn write_table(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        print!("{text}");
        let mut full = text.to_string();
        let _ = writeln!(full, "\nconfig: {}", serde_json::to_string(&self.provenance().config).map_err(internal)?);
        self.write_text(name, &full)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(name);
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(internal)
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError { code: 3, message: format!("serialization failed: {e}") }
}

/// Left-aligned first column, right-aligned numbers.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &mut headers.iter().copied());
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for r in rows {
        line(&mut out, &mut r.iter().map(String::as_str));
    }
    out
}
