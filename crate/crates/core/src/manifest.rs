//! Line-delimited JSON manifests: one record per line, UTF-8.
//!
//! A manifest may open with a provenance line, `{"provenance": {...}}`,
//! recording how it was produced. Readers skip it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?);
    parse_lines(reader, path)
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    parse_lines(text.as_bytes(), Path::new("<memory>"))
}

pub const PROVENANCE_KEY: &str = "provenance";

fn is_provenance(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.as_object().map(|o| o.len() == 1 && o.contains_key(PROVENANCE_KEY)))
        .unwrap_or(false)
}

fn parse_lines<T: DeserializeOwned>(reader: impl BufRead, path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut first = true;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if std::mem::take(&mut first) && is_provenance(&line) {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn to_jsonl<'a, T: Serialize + 'a>(records: impl IntoIterator<Item = &'a T>) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    write_jsonl_with(path, None::<&()>, records)
}

/// Like [`write_jsonl`], with an optional provenance line first.
pub fn write_jsonl_with<'a, P: Serialize, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    provenance: Option<&P>,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(p) = provenance {
        serde_json::to_writer(&mut w, &serde_json::json!({ PROVENANCE_KEY: p }))?;
        w.write_all(b"\n")?;
    }
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        id: u32,
        name: String,
    }

    #[test]
    fn blank_lines_skipped_and_errors_carry_line_numbers() {
        let rows: Vec<Row> = parse_jsonl("{\"id\":1,\"name\":\"a\"}\n\n{\"id\":2,\"name\":\"b\"}\n").unwrap();
        assert_eq!(rows.len(), 2);

        let err = parse_jsonl::<Row>("{\"id\":1,\"name\":\"a\"}\nnot json\n").unwrap_err();
        match err {
            Error::Manifest { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/rows.jsonl");
        let rows = vec![
            Row { id: 1, name: "x".into() },
            Row { id: 2, name: "y".into() },
        ];
        write_jsonl(&path, &rows).unwrap();
        let back: Vec<Row> = read_jsonl(&path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), to_jsonl(&rows).unwrap());
    }

    #[test]
    fn provenance_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let rows = vec![Row { id: 7, name: "z".into() }];
        write_jsonl_with(&path, Some(&serde_json::json!({"seed": 3})), &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"provenance\":{\"seed\":3}}\n"));
        assert_eq!(read_jsonl::<Row>(&path).unwrap(), rows);
        // only a leading line counts
        assert!(parse_jsonl::<Row>("{\"id\":1,\"name\":\"a\"}\n{\"provenance\":1}\n").is_err());
    }
}
