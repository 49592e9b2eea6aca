//! Labeled embedding tables: ingestion, validation, normalization and
//! synthetic generation.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic  b"SCRL"          4 bytes
//! version u16 = 1
//! n       u32             number of rows
//! d       u32             embedding width
//! k       u32             number of distinct classes
//! data    n * d * f32     row-major
//! labels  n * u32
//! ```
//!
//! The CSV layout is a header `f0,...,f{d-1},label` followed by one row per
//! sample with the integer label last.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrollError};

pub const TABLE_MAGIC: &[u8; 4] = b"SCRL";
pub const TABLE_VERSION: u16 = 1;

/// Rows whose norm is within this distance of 1 are left untouched by
/// [`normalize`], which makes normalization exactly idempotent on `f32` data.
const UNIT_NORM_SLACK: f64 = 4.0 * f32::EPSILON as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Binary,
    Csv,
}

impl std::str::FromStr for TableFormat {
    type Err = ScrollError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "bin" => Ok(TableFormat::Binary),
            "csv" => Ok(TableFormat::Csv),
            other => Err(ScrollError::Config(format!("unknown table format `{other}`"))),
        }
    }
}

/// N embeddings of width `dim` with dense class labels `0..class_count`.
///
/// `is_normalized` reports whether every row is unit-norm to `f32` precision.
///
/// Vectors are stored as `f32`, matching the on-disk precision, so a binary
/// save/load cycle is bit-exact. All arithmetic downstream is done in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<f32>,
    labels: Vec<u32>,
    class_count: usize,
    normalized: bool,
}

impl EmbeddingTable {
    /// Builds a table from row-major `vectors`, checking every invariant.
    pub fn new(dim: usize, vectors: Vec<f32>, labels: Vec<u32>, class_count: usize) -> Result<Self> {
        if dim == 0 {
            return Err(ScrollError::Data("embedding dimension must be positive".into()));
        }
        if vectors.len() != labels.len() * dim {
            return Err(ScrollError::Shape {
                expected: labels.len() * dim,
                actual: vectors.len(),
            });
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(ScrollError::Data(format!(
                "non-finite value in row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        let mut present = vec![false; class_count];
        for (row, &label) in labels.iter().enumerate() {
            let slot = present.get_mut(label as usize).ok_or_else(|| {
                ScrollError::Data(format!(
                    "row {row} has label {label} outside 0..{class_count}"
                ))
            })?;
            *slot = true;
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(ScrollError::Data(format!("class {missing} has no samples")));
        }
        let normalized = vectors.chunks_exact(dim).all(|row| (row_norm(row) - 1.0).abs() <= UNIT_NORM_SLACK);
        Ok(Self {
            dim,
            vectors,
            labels,
            class_count,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f32], usize)> + '_ {
        self.vectors
            .chunks_exact(self.dim)
            .zip(self.labels.iter().map(|&l| l as usize))
    }

    /// Indices of all rows belonging to `class`, ascending.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.label(i) == class).collect()
    }

    /// Exact mean of all rows of `class`, accumulated in `f64`.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim];
        let mut count = 0usize;
        for (row, label) in self.rows() {
            if label == class {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v as f64;
                }
                count += 1;
            }
        }
        if count > 0 {
            sum.iter_mut().for_each(|s| *s /= count as f64);
        }
        sum
    }
}

/// A loaded table plus the original label of each dense class id.
#[derive(Clone, Debug)]
pub struct LoadedTable {
    pub table: EmbeddingTable,
    pub original_labels: Vec<i64>,
}

impl LoadedTable {
    pub fn label_mapping(&self) -> BTreeMap<i64, usize> {
        self.original_labels
            .iter()
            .enumerate()
            .map(|(dense, &orig)| (orig, dense))
            .collect()
    }
}

/// Reads a table and remaps its labels onto `0..K` in ascending order of the
/// original ids.
pub fn load_embeddings(path: impl AsRef<Path>, format: TableFormat) -> Result<LoadedTable> {
    let raw = read_raw(path.as_ref(), format)?;
    let mut distinct: Vec<i64> = raw.labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if let Some(k) = raw.declared_classes {
        if k != distinct.len() {
            return Err(ScrollError::Data(format!(
                "header declares {k} classes but {} distinct labels are present",
                distinct.len()
            )));
        }
    }
    let mapping: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let labels = raw.labels.iter().map(|l| mapping[l] as u32).collect();
    let table = EmbeddingTable::new(raw.dim, raw.vectors, labels, distinct.len())?;
    Ok(LoadedTable {
        table,
        original_labels: distinct,
    })
}

/// Reads a table whose labels must be translated through an existing
/// mapping (e.g. a test split that shares the training split's classes).
pub fn load_embeddings_with_mapping(
    path: impl AsRef<Path>,
    format: TableFormat,
    mapping: &BTreeMap<i64, usize>,
) -> Result<EmbeddingTable> {
    let raw = read_raw(path.as_ref(), format)?;
    let labels = raw
        .labels
        .iter()
        .enumerate()
        .map(|(row, l)| {
            mapping.get(l).map(|&d| d as u32).ok_or_else(|| {
                ScrollError::Data(format!("row {row} has label {l} unknown to the training split"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingTable::new(raw.dim, raw.vectors, labels, mapping.len())
}

pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>, format: TableFormat) -> Result<()> {
    match format {
        TableFormat::Binary => fs::write(path, encode_binary(table))?,
        TableFormat::Csv => write_csv(table, path.as_ref())?,
    }
    Ok(())
}

pub fn encode_binary(table: &EmbeddingTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + table.vectors.len() * 4 + table.labels.len() * 4);
    out.extend_from_slice(TABLE_MAGIC);
    out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    out.extend_from_slice(&(table.dim as u32).to_le_bytes());
    out.extend_from_slice(&(table.class_count as u32).to_le_bytes());
    for v in &table.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &table.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

fn write_csv(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = (0..table.dim).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    writer.write_record(&header).map_err(csv_io)?;
    for (row, label) in table.rows() {
        let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        record.push(label.to_string());
        writer.write_record(&record).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(err: csv::Error) -> ScrollError {
    ScrollError::Io(std::io::Error::other(err))
}

struct RawTable {
    dim: usize,
    vectors: Vec<f32>,
    labels: Vec<i64>,
    declared_classes: Option<usize>,
}

fn read_raw(path: &Path, format: TableFormat) -> Result<RawTable> {
    match format {
        TableFormat::Binary => decode_binary(&fs::read(path)?),
        TableFormat::Csv => read_csv(path),
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ScrollError::format(
                "byte",
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_binary(bytes: &[u8]) -> Result<RawTable> {
    let mut cur = ByteCursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != TABLE_MAGIC {
        return Err(ScrollError::format("byte", 0, "bad magic, expected SCRL"));
    }
    let version = cur.u16("version")?;
    if version != TABLE_VERSION {
        return Err(ScrollError::format("byte", 4, format!("unsupported version {version}")));
    }
    let n = cur.u32("row count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let k = cur.u32("class count")? as usize;
    if d == 0 {
        return Err(ScrollError::format("byte", 10, "dimension must be positive"));
    }
    let mut vectors = Vec::with_capacity(n.saturating_mul(d).min(1 << 28));
    for i in 0..n * d {
        let offset = cur.pos as u64;
        let v = f32::from_le_bytes(cur.take(4, &format!("row {}", i / d))?.try_into().unwrap());
        if !v.is_finite() {
            return Err(ScrollError::Data(format!(
                "non-finite value at byte {offset} (row {}, column {})",
                i / d,
                i % d
            )));
        }
        vectors.push(v);
    }
    let mut labels = Vec::with_capacity(n.min(1 << 28));
    for _ in 0..n {
        labels.push(cur.u32("labels")? as i64);
    }
    if cur.pos != bytes.len() {
        return Err(ScrollError::format(
            "byte",
            cur.pos as u64,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    Ok(RawTable {
        dim: d,
        vectors,
        labels,
        declared_classes: Some(k),
    })
}

fn read_csv(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    let header = reader
        .headers()
        .map_err(|e| csv_format(&e, 1))?
        .clone();
    let width = header.len();
    if width < 2 || header.get(width - 1) != Some("label") {
        return Err(ScrollError::format("line", 1, "header must end with `label`"));
    }
    for (j, name) in header.iter().take(width - 1).enumerate() {
        if name != format!("f{j}") {
            return Err(ScrollError::format(
                "line",
                1,
                format!("expected column `f{j}`, found `{name}`"),
            ));
        }
    }
    let dim = width - 1;
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_format(&e, 0))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        for (j, field) in record.iter().take(dim).enumerate() {
            let v: f32 = field.parse().map_err(|_| {
                ScrollError::format("line", line, format!("column f{j}: `{field}` is not a number"))
            })?;
            if !v.is_finite() {
                return Err(ScrollError::Data(format!(
                    "non-finite value on line {line}, column f{j}"
                )));
            }
            vectors.push(v);
        }
        let label_field = &record[dim];
        let label: i64 = label_field.parse().map_err(|_| {
            ScrollError::format("line", line, format!("label `{label_field}` is not an integer"))
        })?;
        labels.push(label);
    }
    Ok(RawTable {
        dim,
        vectors,
        labels,
        declared_classes: None,
    })
}

fn csv_format(err: &csv::Error, fallback_line: u64) -> ScrollError {
    let line = err.position().map(|p| p.line()).unwrap_or(fallback_line);
    ScrollError::format("line", line, err.to_string())
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Scales every row to unit Euclidean norm.
pub fn normalize(table: &EmbeddingTable) -> Result<EmbeddingTable> {
    let mut vectors = table.vectors.clone();
    for (row_idx, row) in vectors.chunks_exact_mut(table.dim).enumerate() {
        let norm = row_norm(row);
        if norm == 0.0 {
            return Err(ScrollError::Degenerate {
                row: row_idx,
                message: "zero-norm row cannot be normalized".into(),
            });
        }
        if (norm - 1.0).abs() <= UNIT_NORM_SLACK {
            continue;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
    Ok(EmbeddingTable {
        vectors,
        normalized: true,
        ..table.clone()
    })
}

/// Parameters of the synthetic class-cluster generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    #[serde(default)]
    pub cluster_spread: f64,
    /// Magnitude of the per-class mean perturbation applied to the test split.
    #[serde(default)]
    pub shift_strength: f64,
    /// Test rows per class; defaults to `samples_per_class`.
    #[serde(default)]
    pub test_samples_per_class: Option<usize>,
    /// Number of shared random directions carrying class-independent noise.
    #[serde(default)]
    pub nuisance_rank: usize,
    /// Standard deviation of the noise along each nuisance direction.
    #[serde(default)]
    pub nuisance_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// Noise-free clusters with no shift; adjust fields from here.
    pub fn new(class_count: usize, dim: usize, samples_per_class: usize, seed: u64) -> Self {
        Self {
            class_count,
            dim,
            samples_per_class,
            cluster_spread: 0.0,
            shift_strength: 0.0,
            test_samples_per_class: None,
            nuisance_rank: 0,
            nuisance_scale: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(ScrollError::Config("synthetic class_count must be >= 2".into()));
        }
        if self.dim < 2 {
            return Err(ScrollError::Config("synthetic dim must be >= 2".into()));
        }
        if self.samples_per_class == 0 || self.test_samples_per_class == Some(0) {
            return Err(ScrollError::Config("synthetic samples_per_class must be >= 1".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(ScrollError::Config("cluster_spread must be finite and >= 0".into()));
        }
        if !(self.shift_strength >= 0.0 && self.shift_strength.is_finite()) {
            return Err(ScrollError::Config("shift_strength must be finite and >= 0".into()));
        }
        if !(self.nuisance_scale >= 0.0 && self.nuisance_scale.is_finite()) {
            return Err(ScrollError::Config("nuisance_scale must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct Nuisance {
    basis: Vec<Vec<f64>>,
    scale: f64,
}

fn sample_split(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    per_class: usize,
    spread: f64,
    nuisance: &Nuisance,
) -> Result<EmbeddingTable> {
    let dim = means[0].len();
    let mut vectors = Vec::with_capacity(means.len() * per_class * dim);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let mut row: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let noise: f64 = rng.sample(StandardNormal);
                    m + spread * noise
                })
                .collect();
            for u in &nuisance.basis {
                let a: f64 = rng.sample(StandardNormal);
                for (r, &ui) in row.iter_mut().zip(u) {
                    *r += nuisance.scale * a * ui;
                }
            }
            let mut norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                row = unit_gaussian(rng, dim);
                norm = 1.0;
            }
            vectors.extend(row.iter().map(|&x| (x / norm) as f32));
            labels.push(class as u32);
        }
    }
    let table = EmbeddingTable::new(dim, vectors, labels, means.len())?;
    normalize(&table)
}

/// Generates `(train, test)` splits of unit-norm class clusters.
///
/// Class means are uniform on the unit sphere. The test split draws its
/// samples around means displaced by `shift_strength` in a random direction
/// per class. Both splits share optional noise along `nuisance_rank`
/// random directions.
pub fn synthesize(spec: &SyntheticSpec) -> Result<(EmbeddingTable, EmbeddingTable)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| unit_gaussian(&mut rng, spec.dim))
        .collect();
    let nuisance = Nuisance {
        basis: (0..spec.nuisance_rank).map(|_| unit_gaussian(&mut rng, spec.dim)).collect(),
        scale: spec.nuisance_scale,
    };
    let train = sample_split(&mut rng, &means, spec.samples_per_class, spec.cluster_spread, &nuisance)?;
    let shifted: Vec<Vec<f64>> = means
        .iter()
        .map(|mean| {
            let direction = unit_gaussian(&mut rng, spec.dim);
            mean.iter()
                .zip(&direction)
                .map(|(m, u)| m + spec.shift_strength * u)
                .collect()
        })
        .collect();
    let test_n = spec.test_samples_per_class.unwrap_or(spec.samples_per_class);
    let test = sample_split(&mut rng, &shifted, test_n, spec.cluster_spread, &nuisance)?;
    Ok((train, test))
}
