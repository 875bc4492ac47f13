//! CSV / JSON result files.
//!
//! JSON files hold `{"schema_version", "kind", "metadata", "rows"}`. CSV
//! files start with a `schema_version` column followed by the row fields in
//! declaration order; absent values are empty cells in CSV and `null` in
//! JSON, so every row type keeps the same columns across mechanisms.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::InvalidArgument(format!("unknown format `{other}` (csv|json)"))),
        }
    }
}

/// Provenance stored with every exported table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Configuration text exactly as read, includes expanded.
    pub config_text: String,
    /// Effective settings after defaults and command-line overrides.
    pub settings: Value,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table<R> {
    pub schema_version: u32,
    pub kind: String,
    pub metadata: Metadata,
    pub rows: Vec<R>,
}

impl<R> Table<R> {
    pub fn new(kind: impl Into<String>, metadata: Metadata, rows: Vec<R>) -> Self {
        Table {
            schema_version: SCHEMA_VERSION,
            kind: kind.into(),
            metadata,
            rows,
        }
    }
}

fn flatten<R: Serialize>(row: &R) -> Result<Vec<(String, String)>> {
    match serde_json::to_value(row)? {
        Value::Object(map) => Ok(map
            .into_iter()
            .map(|(k, v)| {
                let cell = match v {
                    Value::Null => String::new(),
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, cell)
            })
            .collect()),
        _ => Err(Error::InvalidArgument("table rows must be records".into())),
    }
}

pub fn csv_header<R: Serialize>(row: &R) -> Result<Vec<String>> {
    let mut h = vec!["schema_version".to_string()];
    h.extend(flatten(row)?.into_iter().map(|(k, _)| k));
    Ok(h)
}

fn csv_record<R: Serialize>(row: &R) -> Result<Vec<String>> {
    let mut r = vec![SCHEMA_VERSION.to_string()];
    r.extend(flatten(row)?.into_iter().map(|(_, v)| v));
    Ok(r)
}

pub fn write_csv<R: Serialize, W: Write>(rows: &[R], out: W) -> Result<()> {
    let first = rows.first().ok_or(Error::Empty("result table"))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(first)?)?;
    for r in rows {
        w.write_record(csv_record(r)?)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Writes `<dir>/<table.kind>.<ext>`, creating `dir` if needed.
pub fn export_table<R: Serialize>(table: &Table<R>, dir: &Path, format: Format) -> Result<PathBuf> {
    if table.rows.is_empty() {
        return Err(Error::Empty("result table"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{}.{}", table.kind, format.extension()));
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    match format {
        Format::Csv => write_csv(&table.rows, file)?,
        Format::Json => {
            let mut w = std::io::BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, table)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(path)
}

pub fn read_json_table<R: DeserializeOwned>(path: &Path) -> Result<Table<R>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: Table<R> = serde_json::from_str(&text)?;
    if table.schema_version != SCHEMA_VERSION {
        return Err(Error::Unsupported(format!(
            "schema version {} (expected {SCHEMA_VERSION})",
            table.schema_version
        )));
    }
    Ok(table)
}

/// Appends CSV rows to a file as they arrive, flushing after each one.
/// Shared between worker threads.
pub struct CsvAppender {
    path: PathBuf,
    state: Mutex<(csv::Writer<fs::File>, bool)>,
}

impl CsvAppender {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(CsvAppender {
            path: path.to_path_buf(),
            state: Mutex::new((csv::Writer::from_writer(file), false)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<R: Serialize>(&self, row: &R) -> Result<()> {
        let mut guard = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let (w, started) = &mut *guard;
        if !*started {
            w.write_record(csv_header(row)?)?;
            *started = true;
        }
        w.write_record(csv_record(row)?)?;
        w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        name: String,
        value: Option<f64>,
        flag: bool,
    }

    fn rows() -> Vec<Row> {
        vec![
            Row { name: "a".into(), value: Some(1.5), flag: true },
            Row { name: "b,c".into(), value: None, flag: false },
            Row { name: "d".into(), value: Some(-2e-9), flag: true },
        ]
    }

    #[test]
    fn csv_shape_and_nulls() {
        let mut buf = Vec::new();
        write_csv(&rows(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "schema_version,name,value,flag");
        assert_eq!(lines[2], "1,\"b,c\",,false");
        assert!(write_csv::<Row, _>(&[], Vec::new()).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Table::new("demo", Metadata::default(), rows());
        let path = export_table(&t, dir.path(), Format::Json).unwrap();
        let back: Table<Row> = read_json_table(&path).unwrap();
        assert_eq!(back, t);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"value\": null"));
        let empty: Table<Row> = Table::new("none", Metadata::default(), vec![]);
        assert!(export_table(&empty, dir.path(), Format::Csv).is_err());
    }

    #[test]
    fn appender_writes_incrementally() {
        let dir = tempfile::tempdir().unwrap();
        let a = CsvAppender::create(&dir.path().join("sub/rows.csv")).unwrap();
        a.append(&rows()[0]).unwrap();
        let partial = fs::read_to_string(a.path()).unwrap();
        assert_eq!(partial.lines().count(), 2);
        a.append(&rows()[1]).unwrap();
        assert_eq!(fs::read_to_string(a.path()).unwrap().lines().count(), 3);
    }
}
