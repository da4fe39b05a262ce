//! Toy 2-D generators and CSV ingestion, both exposed as [`DataSource`]s.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::batch::{Batch, Origin};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::trainer::DataSource;

#[derive(Debug, Clone, PartialEq)]
pub enum Builtin {
    /// Equal-weight modes evenly spaced on a circle.
    GaussianMixture {
        modes: usize,
        radius: f64,
        std: f64,
    },
    SwissRoll {
        noise: f64,
    },
    TwoMoons {
        noise: f64,
    },
}

impl Builtin {
    pub fn mixture() -> Self {
        Builtin::GaussianMixture {
            modes: 8,
            radius: 2.0,
            std: 0.1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Builtin::GaussianMixture { .. } => "gaussian-mixture",
            Builtin::SwissRoll { .. } => "swiss-roll",
            Builtin::TwoMoons { .. } => "two-moons",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Builtin::GaussianMixture { modes, radius, std } => {
                modes >= 1 && radius.is_finite() && std.is_finite() && std > 0.0
            }
            Builtin::SwissRoll { noise } | Builtin::TwoMoons { noise } => noise.is_finite() && noise >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Dataset(format!(
                "invalid parameters for {}: {self:?}",
                self.name()
            )))
        }
    }

    fn draw(&self, rng: &mut impl Rng, out: &mut [f64]) {
        match *self {
            Builtin::GaussianMixture { modes, radius, std } => {
                let a = 2.0 * PI * rng.random_range(0..modes) as f64 / modes as f64;
                let (zx, zy): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                out[0] = radius * a.cos() + std * zx;
                out[1] = radius * a.sin() + std * zy;
            }
            Builtin::SwissRoll { noise } => {
                let r = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                let (zx, zy): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                out[0] = r * r.cos() / 5.0 + noise * zx;
                out[1] = r * r.sin() / 5.0 + noise * zy;
            }
            Builtin::TwoMoons { noise } => {
                let a = PI * rng.random::<f64>();
                let (x, y) = if rng.random::<bool>() {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                let (zx, zy): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                out[0] = x - 0.5 + noise * zx;
                out[1] = y - 0.25 + noise * zy;
            }
        }
    }

    /// `n` draws, one independent stream per row.
    pub fn sample(&self, n: usize, rng: &StreamRng) -> Result<Batch> {
        let mut data = vec![0.0; n * 2];
        crate::par::for_each_row_mut(&mut data, 2, |i, row| self.draw(&mut rng.stream(i as u64), row));
        Batch::new(data, 2, 0, Origin::Data)
    }
}

impl DataSource for Builtin {
    fn dim(&self) -> usize {
        2
    }

    fn batch(&self, n: usize, _step: u64, _which: u64, rng: &StreamRng) -> Result<Batch> {
        self.sample(n, rng)
    }

    fn id(&self) -> String {
        match *self {
            Builtin::GaussianMixture { modes, radius, std } => {
                format!("gaussian-mixture(modes={modes},radius={radius},std={std})")
            }
            Builtin::SwissRoll { noise } => format!("swiss-roll(noise={noise})"),
            Builtin::TwoMoons { noise } => format!("two-moons(noise={noise})"),
        }
    }
}

/// Per-dimension affine map applied at ingest: `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// An in-memory CSV dataset served in seed-shuffled epochs.
///
/// Batch positions are laid out on a global stream: the `which`-th batch of
/// step k starts at `(2k + which)·n`. Position p maps to row
/// `perm_e[p mod N]` with `e = p / N` and `perm_e` a permutation keyed by
/// `(seed, e)`, so every epoch visits each row once in a fresh order.
#[derive(Debug, Clone)]
pub struct CsvSource {
    path: PathBuf,
    rows: Vec<f64>,
    dim: usize,
    seed: u64,
    standardization: Option<Standardization>,
}

impl CsvSource {
    /// Reads `path`, expecting `dim` numeric columns per row. A first row
    /// whose cells are all non-numeric is treated as a header.
    pub fn ingest(path: &Path, dim: usize, standardize: bool, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dataset("dimension must be positive".into()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut rows = Vec::new();
        let mut first = true;
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let line = record.position().map_or(0, |p| p.line());
            if record.iter().all(|c| c.is_empty()) {
                continue;
            }
            if first {
                first = false;
                if record.iter().all(|c| c.parse::<f64>().is_err()) {
                    continue;
                }
            }
            if record.len() != dim {
                return Err(Error::Dataset(format!(
                    "{}: row {line} has {} columns, expected {dim}",
                    path.display(),
                    record.len()
                )));
            }
            for (j, cell) in record.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Dataset(format!(
                        "{}: row {line}, column {}: `{cell}` is not a number",
                        path.display(),
                        j + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Dataset(format!(
                        "{}: row {line}, column {}: non-finite value",
                        path.display(),
                        j + 1
                    )));
                }
                rows.push(v);
            }
        }
        if rows.is_empty() {
            return Err(Error::Dataset(format!("{}: dataset is empty", path.display())));
        }
        let mut src = CsvSource {
            path: path.to_path_buf(),
            rows,
            dim,
            seed,
            standardization: None,
        };
        if standardize {
            src.standardize()?;
        }
        Ok(src)
    }

    fn standardize(&mut self) -> Result<()> {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for row in self.rows.chunks(self.dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; self.dim];
        for row in self.rows.chunks(self.dim) {
            for j in 0..self.dim {
                var[j] += (row[j] - mean[j]).powi(2) / n;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Dataset(format!(
                "{}: column {} is constant and cannot be standardized",
                self.path.display(),
                j + 1
            )));
        }
        for row in self.rows.chunks_mut(self.dim) {
            for j in 0..self.dim {
                row[j] = (row[j] - mean[j]) / std[j];
            }
        }
        self.standardization = Some(Standardization { mean, std });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// All rows as one data batch.
    pub fn all(&self) -> Batch {
        Batch::new(self.rows.clone(), self.dim, 0, Origin::Data).expect("non-empty by construction")
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut StreamRng::new(self.seed).stream(epoch));
        perm
    }

    /// Rows at global positions `start..start + n`.
    pub fn positions(&self, start: u64, n: usize) -> Vec<usize> {
        let len = self.len() as u64;
        let mut out = Vec::with_capacity(n);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for p in start..start + n as u64 {
            let epoch = p / len;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.permutation(epoch)));
            }
            out.push(cached.as_ref().unwrap().1[(p % len) as usize]);
        }
        out
    }
}

impl DataSource for CsvSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn batch(&self, n: usize, step: u64, which: u64, _rng: &StreamRng) -> Result<Batch> {
        if n == 0 {
            return Err(Error::BatchSize { need: 1, got: 0 });
        }
        let start = (2 * step + which) * n as u64;
        let mut data = Vec::with_capacity(n * self.dim);
        for i in self.positions(start, n) {
            data.extend_from_slice(self.row(i));
        }
        Batch::new(data, self.dim, 0, Origin::Data)
    }

    fn id(&self) -> String {
        format!(
            "csv({},rows={},standardized={})",
            self.path.display(),
            self.len(),
            self.standardization.is_some()
        )
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Dataset(match line {
            Some(l) => format!("{}: row {l}: {other:?}", path.display()),
            None => format!("{}: {other:?}", path.display()),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Builtin(Builtin),
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub dim: usize,
    pub standardize: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DatasetSource::Builtin(Builtin::mixture()),
            dim: 2,
            standardize: false,
        }
    }
}

/// A loaded dataset of either kind.
#[derive(Debug, Clone)]
pub enum Dataset {
    Builtin(Builtin),
    Csv(CsvSource),
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match &self.source {
            DatasetSource::Builtin(b) => {
                b.validate()?;
                if self.dim != 2 {
                    return Err(Error::Dataset(format!(
                        "{} is 2-dimensional, but K = {}",
                        b.name(),
                        self.dim
                    )));
                }
                if self.standardize {
                    return Err(Error::Dataset("standardization applies to csv datasets only".into()));
                }
                Ok(Dataset::Builtin(b.clone()))
            }
            DatasetSource::Csv(path) => Ok(Dataset::Csv(CsvSource::ingest(path, self.dim, self.standardize, seed)?)),
        }
    }
}

impl Dataset {
    pub fn source(&self) -> &dyn DataSource {
        match self {
            Dataset::Builtin(b) => b,
            Dataset::Csv(c) => c,
        }
    }
}

impl DataSource for Dataset {
    fn dim(&self) -> usize {
        self.source().dim()
    }

    fn batch(&self, n: usize, step: u64, which: u64, rng: &StreamRng) -> Result<Batch> {
        self.source().batch(n, step, which, rng)
    }

    fn id(&self) -> String {
        self.source().id()
    }
}
