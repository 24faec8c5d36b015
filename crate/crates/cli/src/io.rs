//! CSV and JSON file formats.
//!
//! Every CSV starts with `# key: value` metadata lines, then one header row,
//! then data rows. Floats are written as `{:.16e}` (17 significant digits),
//! which round-trips every finite `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dissipative::numerics::DenseMatrix;
use serde::Serialize;

use crate::error::CliError;

/// Provenance echoed at the top of every export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Meta {
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
}

impl Meta {
    pub fn new(command: impl Into<String>, seed: Option<u64>) -> Self {
        Self {
            version: format!("dissipative {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            seed,
        }
    }

    pub fn comment_lines(&self) -> Vec<String> {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        vec![
            format!("version: {}", self.version),
            format!("command: {}", self.command),
            format!("seed: {seed}"),
        ]
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A tabular export: metadata comments, column names, and rows of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(meta: &Meta, columns: Vec<String>) -> Self {
        Self {
            comments: meta.comment_lines(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            let _ = writeln!(out, "# {c}");
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        out.push_str(std::str::from_utf8(&w.into_inner().expect("flush")).expect("utf8 cells"));
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_text(path, &self.to_csv())
    }
}

/// Points read from CSV, keeping the comment lines and column names so the
/// file can be written back unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFile {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub points: DenseMatrix,
}

impl PointFile {
    pub fn new(meta: &Meta, points: DenseMatrix) -> Self {
        Self {
            comments: meta.comment_lines(),
            columns: coordinate_columns(points.cols()),
            points,
        }
    }

    pub fn to_table(&self) -> Table {
        Table {
            comments: self.comments.clone(),
            columns: self.columns.clone(),
            rows: (0..self.points.rows())
                .map(|p| self.points.row(p).iter().map(|v| fmt_f64(*v)).collect())
                .collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        self.to_table().write(path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let bad = |msg: String| CliError::Parse {
            path: path.to_path_buf(),
            msg,
        };
        let comments = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .map(|l| l.trim_start_matches('#').trim_start().to_string())
            .collect();
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut columns: Option<Vec<String>> = None;
        let mut data = Vec::new();
        let mut width = None;
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let is_header = line == 0 && rec.iter().any(|c| c.parse::<f64>().is_err());
            if is_header {
                columns = Some(rec.iter().map(str::to_string).collect());
                width = Some(rec.len());
                continue;
            }
            let w = *width.get_or_insert(rec.len());
            if rec.len() != w {
                return Err(bad(format!("record {} has {} fields, expected {w}", line + 1, rec.len())));
            }
            for cell in rec.iter() {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| bad(format!("record {}: '{cell}' is not a number", line + 1)))?;
                if !v.is_finite() {
                    return Err(bad(format!("record {}: non-finite coordinate", line + 1)));
                }
                data.push(v);
            }
        }
        let d = width.unwrap_or(0);
        let n = if d == 0 { 0 } else { data.len() / d };
        let points = DenseMatrix::new(n, d, data).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            comments,
            columns: columns.unwrap_or_else(|| coordinate_columns(d)),
            points,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// `x0, x1, …`.
pub fn coordinate_columns(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("x{i}")).collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("sidecar serializes");
    s.push('\n');
    write_text(path, &s)
}
