//! File formats: the HSG1 binary grid container, CSV tables and JSON run
//! manifests. All writes go through a temporary file and a rename.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::space::{Element, SampleSet};

pub const GRID_MAGIC: &[u8; 4] = b"HSG1";
pub const GRID_VERSION: u8 = 1;

/// Values on a row-major grid of any dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GridData {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl GridData {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::Config(format!("grids need 1 to 255 axes, got {}", dims.len())));
        }
        if values.len() != expected {
            return Err(Error::Conformance {
                what: "grid payload",
                expected,
                found: values.len(),
            });
        }
        Ok(Self { dims, values })
    }

    /// One element on a grid of shape `dims`.
    pub fn from_element(dims: &[usize], element: &Element) -> Result<Self> {
        Self::new(dims.to_vec(), element.values().to_vec())
    }

    /// A sample stored with a leading observation axis: `[n, dims...]`.
    pub fn from_sample(dims: &[usize], sample: &SampleSet) -> Result<Self> {
        let m = sample.matrix();
        let mut values = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            values.extend(m.row(i).iter());
        }
        let mut full = vec![sample.n()];
        full.extend_from_slice(dims);
        Self::new(full, values)
    }

    /// Interpret as a sample: the first axis indexes observations.
    pub fn into_sample(self) -> Result<(Vec<usize>, SampleSet)> {
        if self.dims.len() < 2 {
            return Err(Error::Config(
                "a sample grid needs a leading observation axis plus at least one spatial axis".into(),
            ));
        }
        let n = self.dims[0];
        let v: usize = self.dims[1..].iter().product();
        let m = DMatrix::from_row_slice(n, v, &self.values);
        Ok((self.dims[1..].to_vec(), SampleSet::from_matrix(m)?))
    }

    pub fn into_element(self) -> Result<Element> {
        Element::new(self.values)
    }
}

/// Serialise to HSG1 bytes.
pub fn encode_grid(grid: &GridData) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * grid.dims.len() + 8 * grid.values.len());
    out.extend_from_slice(GRID_MAGIC);
    out.push(GRID_VERSION);
    out.push(grid.dims.len() as u8);
    for d in &grid.dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parse HSG1 bytes, rejecting bad headers, truncation and trailing data.
pub fn decode_grid(bytes: &[u8]) -> Result<GridData> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "file ends inside the magic number"));
    }
    if &bytes[..4] != GRID_MAGIC {
        return Err(format_err(
            0,
            format!(
                "bad magic {:?}, expected \"HSG1\"",
                String::from_utf8_lossy(&bytes[..4])
            ),
        ));
    }
    let version = *bytes
        .get(4)
        .ok_or_else(|| format_err(4, "file ends before the version byte"))?;
    if version != GRID_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let ndim = *bytes
        .get(5)
        .ok_or_else(|| format_err(5, "file ends before the axis count"))? as usize;
    if ndim == 0 {
        return Err(format_err(5, "axis count is zero"));
    }
    let mut pos = 6;
    let mut dims = Vec::with_capacity(ndim);
    for axis in 0..ndim {
        let chunk = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| format_err(pos, format!("file ends inside extent of axis {axis}")))?;
        let d = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        dims.push(usize::try_from(d).map_err(|_| format_err(pos, "extent does not fit in memory"))?);
        pos += 8;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| format_err(6, "grid size overflows"))?;
    let payload = count
        .checked_mul(8)
        .ok_or_else(|| format_err(6, "grid size overflows"))?;
    let remaining = bytes.len() - pos;
    if remaining < payload {
        return Err(format_err(
            bytes.len(),
            format!("payload truncated: {payload} bytes expected, {remaining} present"),
        ));
    }
    if remaining > payload {
        return Err(format_err(
            pos + payload,
            format!("{} trailing bytes after payload", remaining - payload),
        ));
    }
    let values: Vec<f64> = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(GridData { dims, values })
}

/// Replace `path` with `bytes` through a temporary file in the same
/// directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_grid(path: &Path, grid: &GridData) -> Result<()> {
    atomic_write(path, &encode_grid(grid))
}

pub fn read_grid(path: &Path) -> Result<GridData> {
    decode_grid(&std::fs::read(path)?)
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// A CSV table whose cells are kept as text.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: vec![] }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Table {
                column: String::new(),
                row: self.rows.len() + 1,
                message: format!("{} cells for {} columns", row.len(), self.header.len()),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Table {
            column: name.to_string(),
            row: 0,
            message: "column not found".into(),
        })
    }

    /// Parse one column as floats. Rows are counted from 1 after the header.
    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| parse_cell(&row[c], name, r + 1))
            .collect()
    }

    /// All columns except `skip` as an `n × k` matrix, with their names.
    pub fn numeric_matrix(&self, skip: &[&str]) -> Result<(Vec<String>, DMatrix<f64>)> {
        let cols: Vec<usize> = (0..self.header.len())
            .filter(|&c| !skip.contains(&self.header[c].as_str()))
            .collect();
        let mut m = DMatrix::zeros(self.rows.len(), cols.len());
        for (r, row) in self.rows.iter().enumerate() {
            for (k, &c) in cols.iter().enumerate() {
                m[(r, k)] = parse_cell(&row[c], &self.header[c], r + 1)?;
            }
        }
        Ok((cols.iter().map(|&c| self.header[c].clone()).collect(), m))
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(vec![]);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn from_csv_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(bytes);
        let header: Vec<String> = rd.headers()?.iter().map(|s| s.to_string()).collect();
        if header.is_empty() || header.iter().all(|h| h.is_empty()) {
            return Err(Error::Table {
                column: String::new(),
                row: 0,
                message: "missing header row".into(),
            });
        }
        let mut table = Table::new(header);
        for (r, rec) in rd.records().enumerate() {
            let rec = rec?;
            if rec.len() != table.header.len() {
                return Err(Error::Table {
                    column: table.header.get(rec.len()).cloned().unwrap_or_default(),
                    row: r + 1,
                    message: format!("{} cells for {} columns", rec.len(), table.header.len()),
                });
            }
            for (c, cell) in rec.iter().enumerate() {
                if cell.trim().is_empty() {
                    return Err(Error::Table {
                        column: table.header[c].clone(),
                        row: r + 1,
                        message: "missing value".into(),
                    });
                }
            }
            table.rows.push(rec.iter().map(|s| s.to_string()).collect());
        }
        Ok(table)
    }
}

fn parse_cell(cell: &str, column: &str, row: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Table {
        column: column.to_string(),
        row,
        message: format!("'{cell}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Table {
            column: column.to_string(),
            row,
            message: "non-finite value".into(),
        });
    }
    Ok(v)
}

pub fn write_table(path: &Path, table: &Table) -> Result<()> {
    atomic_write(path, &table.to_csv_bytes()?)
}

pub fn read_table(path: &Path) -> Result<Table> {
    Table::from_csv_bytes(&std::fs::read(path)?)
}

/// Deserialise a JSON configuration file.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub wall_seconds: f64,
    /// SHA-256 (hex) of each output file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            wall_seconds: 0.0,
            checksums: BTreeMap::new(),
        }
    }

    /// Hash the file at `path` and record it under its file name.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.checksums.insert(name, sha256_hex(&std::fs::read(path)?));
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(manifest)?;
    text.push(b'\n');
    atomic_write(path, &text)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    read_config(path)
}
