//! Sample batches: N vectors of dimension K sharing one time index.

use std::fmt;

use crate::error::{Error, Result};

/// Where the vectors of a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Data,
    Forward,
    Backward,
    Bootstrap,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Data => "data",
            Origin::Forward => "forward",
            Origin::Backward => "backward",
            Origin::Bootstrap => "bootstrap",
        })
    }
}

/// Row-major `n × dim` matrix of samples at time index `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    data: Vec<f64>,
    n: usize,
    dim: usize,
    t: usize,
    origin: Origin,
}

impl Batch {
    pub fn new(data: Vec<f64>, dim: usize, t: usize, origin: Origin) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("batch dimension must be positive".into()));
        }
        if data.is_empty() {
            return Err(Error::BatchSize { need: 1, got: 0 });
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Invalid(format!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if origin == Origin::Data && t != 0 {
            return Err(Error::Invalid(format!("data batch must sit at t = 0, got {t}")));
        }
        Ok(Batch {
            n: data.len() / dim,
            data,
            dim,
            t,
            origin,
        })
    }

    /// Data batch from explicit rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.len())
            .ok_or(Error::BatchSize { need: 1, got: 0 })?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Batch::new(data, dim, 0, Origin::Data)
    }

    pub fn zeros(n: usize, dim: usize, t: usize, origin: Origin) -> Result<Self> {
        Batch::new(vec![0.0; n * dim], dim, t, origin)
    }

    pub(crate) fn from_parts(data: Vec<f64>, dim: usize, t: usize, origin: Origin) -> Self {
        debug_assert!(dim > 0 && !data.is_empty() && data.len().is_multiple_of(dim));
        Batch {
            n: data.len() / dim,
            data,
            dim,
            t,
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Same values relabelled with a new time index and origin.
    pub fn retag(mut self, t: usize, origin: Origin) -> Self {
        self.t = t;
        self.origin = origin;
        self
    }

    /// Rows `idx` gathered into a new batch with the same tags.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Batch::from_parts(data, self.dim, self.t, self.origin)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.n as f64);
        m
    }

    /// Sample covariance (divisor n − 1), row-major `dim × dim`.
    pub fn covariance(&self) -> Vec<f64> {
        let m = self.mean();
        let d = self.dim;
        let mut c = vec![0.0; d * d];
        for r in self.rows() {
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] += (r[i] - m[i]) * (r[j] - m[j]);
                }
            }
        }
        let denom = (self.n.max(2) - 1) as f64;
        c.iter_mut().for_each(|v| *v /= denom);
        c
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim != expected {
            Err(Error::Dimension {
                expected,
                got: self.dim,
            })
        } else {
            Ok(())
        }
    }
}
