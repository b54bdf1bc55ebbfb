//! File helpers shared by the subcommands.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use relcirc_core::tensor_io::{self, DType, Tensor};

use crate::error::{CliError, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(relcirc_core::Error::from)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

/// Writes to `path`, or to stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Header plus rows of a CSV file, all as strings.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<String>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].clone()).collect())
    }
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let wrap = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(wrap)?;
    let header = rdr.headers().map_err(wrap)?.iter().map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec.map_err(wrap)?.iter().map(|s| s.trim().to_string()).collect());
    }
    Ok(Table { header, rows })
}

pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Argument(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Argument(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Loads an `[n, d]` matrix, or row `token` of every item of an `[n, L, D]` tensor.
pub fn load_matrix(path: &Path, token: Option<usize>) -> Result<DMatrix<f64>> {
    let t = tensor_io::read_tensor(path)?;
    match (t.dims.as_slice(), token) {
        (&[n, d], None) => Ok(DMatrix::from_row_iterator(n, d, t.data.iter().map(|&v| v as f64))),
        (&[n, l, d], Some(tok)) => {
            if tok >= l {
                return Err(CliError::Argument(format!("token {tok} outside {l} positions")));
            }
            Ok(DMatrix::from_fn(n, d, |i, j| t.data[(i * l + tok) * d + j] as f64))
        }
        (&[_, _, _], None) => Err(CliError::Argument(format!(
            "{} is [n, L, D]; pick a position with --token",
            path.display()
        ))),
        (dims, _) => Err(CliError::Argument(format!(
            "{}: expected [n, d] or [n, L, D], got {dims:?}",
            path.display()
        ))),
    }
}

pub fn matrix_to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let data = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| m[(i, j)] as f32).collect();
    Tensor::new(vec![r, c], data).expect("dims match data")
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(tensor_io::write_tensor(path, &t.dims, DType::F32, &t.data)?)
}
