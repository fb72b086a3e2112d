//! Plain CSV output: `#`-prefixed header lines, one column-name line, then
//! comma-separated rows. Floats carry 17 significant digits, enough to
//! recover every `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// One cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    F(f64),
    I(i64),
    U(usize),
    B(bool),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}
impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::I(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::U(v)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::B(v)
    }
}

pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Table assembled in memory and written in one go.
#[derive(Debug, Clone)]
pub struct Table {
    text: String,
    columns: usize,
}

impl Table {
    /// `header` lines are written as `# key: value`.
    pub fn new(header: &[(&str, String)], columns: &[&str]) -> Self {
        let mut text = String::new();
        for (k, v) in header {
            writeln!(text, "# {k}: {v}").expect("write to string");
        }
        text.push_str(&columns.join(","));
        text.push('\n');
        Self {
            text,
            columns: columns.len(),
        }
    }

    pub fn row(&mut self, cells: &[Cell]) {
        assert_eq!(cells.len(), self.columns, "row width");
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            match c {
                Cell::F(v) => self.text.push_str(&format_f64(*v)),
                Cell::I(v) => write!(self.text, "{v}").expect("write to string"),
                Cell::U(v) => write!(self.text, "{v}").expect("write to string"),
                Cell::B(v) => self.text.push_str(if *v { "1" } else { "0" }),
            }
        }
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<(), CsvError> {
        fs::write(path, &self.text).map_err(|source| CsvError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Data rows of a CSV written by [`Table`], split into cells, with the
/// column names.
pub fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CsvError> {
    let text = fs::read_to_string(path).map_err(|source| CsvError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let columns = lines
        .next()
        .ok_or_else(|| CsvError::Parse {
            path: path.to_path_buf(),
            message: "missing column line".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((columns, rows))
}
