//! On-disk activation datasets.
//!
//! A dataset is one directory per (model, layer):
//!
//! * `meta.json`: `{"rows", "neurons", "layer", "model", "dtype": "f32le", "version": 1}`
//! * `activations.bin`: `rows * neurons` little-endian binary32 values, row-major, no header
//! * `tokens.tsv`: one `sentence_id \t position \t token \t label` line per row, LF endings
//!
//! Rows are token occurrences, columns are the neurons of the layer.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const META_FILE: &str = "meta.json";
pub const ACTIVATIONS_FILE: &str = "activations.bin";
pub const TOKENS_FILE: &str = "tokens.tsv";
pub const DTYPE: &str = "f32le";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("activation payload is {actual} bytes, expected {expected} (rows x neurons x 4)")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("tokens.tsv has {actual} lines, expected {expected} rows")]
    RowCountMismatch { expected: usize, actual: usize },
    #[error("non-finite activation at flat index {index} (row {row}, neuron {neuron})")]
    NonFiniteValue {
        index: usize,
        row: usize,
        neuron: usize,
    },
    #[error("token table has {records} records but matrix has {rows} rows")]
    AlignmentError { rows: usize, records: usize },
    #[error("invalid meta.json: {0}")]
    InvalidMeta(String),
    #[error("tokens.tsv line {line}: {reason}")]
    MalformedTokens { line: usize, reason: String },
    #[error("invalid matrix shape: {0}")]
    InvalidShape(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    pub fn kind(&self) -> &'static str {
        match self {
            StoreError::MissingFile(_) => "MissingFile",
            StoreError::SizeMismatch { .. } => "SizeMismatch",
            StoreError::RowCountMismatch { .. } => "RowCountMismatch",
            StoreError::NonFiniteValue { .. } => "NonFiniteValue",
            StoreError::AlignmentError { .. } => "AlignmentError",
            StoreError::InvalidMeta(_) => "InvalidMeta",
            StoreError::MalformedTokens { .. } => "MalformedTokens",
            StoreError::InvalidShape(_) => "InvalidShape",
            StoreError::IoFailure { .. } => "IoFailure",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// Dense `rows x neurons` activations of one layer, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    data: Vec<f32>,
    rows: usize,
    neurons: usize,
    layer: u32,
    model: String,
}

impl ActivationMatrix {
    pub fn new(
        data: Vec<f32>,
        rows: usize,
        neurons: usize,
        layer: u32,
        model: impl Into<String>,
    ) -> Result<Self, StoreError> {
        if rows == 0 || neurons == 0 {
            return Err(StoreError::InvalidShape(format!(
                "rows ({rows}) and neurons ({neurons}) must be positive"
            )));
        }
        if data.len() != rows * neurons {
            return Err(StoreError::InvalidShape(format!(
                "data length {} != {rows} x {neurons}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue {
                index,
                row: index / neurons,
                neuron: index % neurons,
            });
        }
        Ok(Self {
            data,
            rows,
            neurons,
            layer,
            model: model.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, neuron: usize) -> f32 {
        self.data[row * self.neurons + neuron]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.neurons..(row + 1) * self.neurons]
    }

    /// Values of one neuron over the given rows, widened to f64.
    pub fn column_over(&self, neuron: usize, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.get(r, neuron) as f64).collect()
    }

    /// Returns a copy with columns reordered: column `j` of the result is
    /// column `order[j]` of `self`.
    pub fn permute_columns(&self, order: &[usize]) -> Result<Self, StoreError> {
        if order.len() != self.neurons {
            return Err(StoreError::InvalidShape(format!(
                "permutation has length {}, expected {}",
                order.len(),
                self.neurons
            )));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(order.iter().map(|&c| row[c]));
        }
        Self::new(data, self.rows, self.neurons, self.layer, self.model.clone())
    }

    /// Applies `f(neuron, value)` to every cell.
    pub fn map_cells(&self, f: impl Fn(usize, f32) -> f32) -> Result<Self, StoreError> {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i % self.neurons, v))
            .collect();
        Self::new(data, self.rows, self.neurons, self.layer, self.model.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub sentence_id: u64,
    pub position: u32,
    pub token: String,
    pub label: String,
}

/// Token annotations aligned 1:1 with activation rows.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenTable {
    records: Vec<TokenRecord>,
}

impl TokenTable {
    pub fn new(records: Vec<TokenRecord>) -> Result<Self, StoreError> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if !seen.insert((rec.sentence_id, rec.position)) {
                return Err(StoreError::MalformedTokens {
                    line: i + 1,
                    reason: format!(
                        "duplicate (sentence_id, position) = ({}, {})",
                        rec.sentence_id, rec.position
                    ),
                });
            }
            for (name, field) in [("token", &rec.token), ("label", &rec.label)] {
                if field.contains(['\t', '\n', '\r']) {
                    return Err(StoreError::MalformedTokens {
                        line: i + 1,
                        reason: format!("{name} contains a tab or line break"),
                    });
                }
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TokenRecord] {
        &self.records
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub rows: usize,
    pub neurons: usize,
    pub layer: u32,
    pub model: String,
    pub dtype: String,
    pub version: u32,
}

impl DatasetMeta {
    fn check(&self) -> Result<(), StoreError> {
        if self.dtype != DTYPE {
            return Err(StoreError::InvalidMeta(format!(
                "dtype must be \"{DTYPE}\", got \"{}\"",
                self.dtype
            )));
        }
        if self.version != FORMAT_VERSION {
            return Err(StoreError::InvalidMeta(format!(
                "unsupported version {}",
                self.version
            )));
        }
        if self.rows == 0 || self.neurons == 0 {
            return Err(StoreError::InvalidMeta(
                "rows and neurons must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn require(path: PathBuf) -> Result<PathBuf, StoreError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(StoreError::MissingFile(path))
    }
}

fn parse_token_line(line: &str, lineno: usize) -> Result<TokenRecord, StoreError> {
    let bad = |reason: String| StoreError::MalformedTokens {
        line: lineno,
        reason,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
    }
    Ok(TokenRecord {
        sentence_id: fields[0]
            .parse()
            .map_err(|e| bad(format!("sentence_id: {e}")))?,
        position: fields[1]
            .parse()
            .map_err(|e| bad(format!("position: {e}")))?,
        token: fields[2].to_string(),
        label: fields[3].to_string(),
    })
}

/// Reads and cross-validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(ActivationMatrix, TokenTable), StoreError> {
    let dir = dir.as_ref();
    let meta_path = require(dir.join(META_FILE))?;
    let bin_path = require(dir.join(ACTIVATIONS_FILE))?;
    let tsv_path = require(dir.join(TOKENS_FILE))?;

    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| StoreError::InvalidMeta(e.to_string()))?;
    meta.check()?;

    let payload = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let expected = (meta.rows as u64) * (meta.neurons as u64) * 4;
    if payload.len() as u64 != expected {
        return Err(StoreError::SizeMismatch {
            expected,
            actual: payload.len() as u64,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let tsv = fs::read_to_string(&tsv_path).map_err(io_err(&tsv_path))?;
    let lines: Vec<&str> = if tsv.is_empty() {
        Vec::new()
    } else {
        tsv.strip_suffix('\n').unwrap_or(&tsv).split('\n').collect()
    };
    if lines.len() != meta.rows {
        return Err(StoreError::RowCountMismatch {
            expected: meta.rows,
            actual: lines.len(),
        });
    }
    let records = lines
        .iter()
        .enumerate()
        .map(|(i, l)| parse_token_line(l, i + 1))
        .collect::<Result<Vec<_>, _>>()?;

    let matrix = ActivationMatrix::new(data, meta.rows, meta.neurons, meta.layer, meta.model)?;
    let table = TokenTable::new(records)?;
    Ok((matrix, table))
}

/// Loads a dataset and returns its metadata if every check passes.
pub fn validate_dataset(dir: impl AsRef<Path>) -> Result<DatasetMeta, StoreError> {
    let (matrix, _) = load_dataset(dir)?;
    Ok(meta_for(&matrix))
}

fn meta_for(matrix: &ActivationMatrix) -> DatasetMeta {
    DatasetMeta {
        rows: matrix.rows(),
        neurons: matrix.neurons(),
        layer: matrix.layer(),
        model: matrix.model().to_string(),
        dtype: DTYPE.to_string(),
        version: FORMAT_VERSION,
    }
}

/// Writes `meta.json`, `activations.bin` and `tokens.tsv` into `dir`,
/// creating it if needed.
pub fn save_dataset(
    matrix: &ActivationMatrix,
    table: &TokenTable,
    dir: impl AsRef<Path>,
) -> Result<(), StoreError> {
    let dir = dir.as_ref();
    if table.len() != matrix.rows() {
        return Err(StoreError::AlignmentError {
            rows: matrix.rows(),
            records: table.len(),
        });
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let meta_path = dir.join(META_FILE);
    let mut meta_json = serde_json::to_string_pretty(&meta_for(matrix))
        .map_err(|e| StoreError::InvalidMeta(e.to_string()))?;
    meta_json.push('\n');
    fs::write(&meta_path, meta_json).map_err(io_err(&meta_path))?;

    let bin_path = dir.join(ACTIVATIONS_FILE);
    let mut payload = Vec::with_capacity(matrix.data().len() * 4);
    for v in matrix.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, payload).map_err(io_err(&bin_path))?;

    let tsv_path = dir.join(TOKENS_FILE);
    let mut out = std::io::BufWriter::new(fs::File::create(&tsv_path).map_err(io_err(&tsv_path))?);
    for rec in table.records() {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            rec.sentence_id, rec.position, rec.token, rec.label
        )
        .map_err(io_err(&tsv_path))?;
    }
    out.flush().map_err(io_err(&tsv_path))?;
    Ok(())
}
