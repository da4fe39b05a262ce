//! The ε-predictor: an MLP over `[x, emb(t)]` with SiLU hidden activations
//! and a linear output layer, evaluated and differentiated by hand.
//!
//! # Parameter enumeration
//!
//! Parameters are flattened layer by layer, input side first. Within a
//! layer the weight matrix comes first in row-major `(out, in)` order,
//! followed by the bias vector. The first layer's input columns are the
//! `dim` data coordinates followed by the `time_dim` embedding features.
//! Checkpoints and [`GradientVector`]s use this order.
//!
//! # Time embedding
//!
//! The integer step `t` is embedded without normalization as
//! `[sin(t f_0), …, sin(t f_{h−1}), cos(t f_0), …, cos(t f_{h−1})]` with
//! `h = time_dim / 2` and `f_i = 10000^(−i / h)`.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::batch::{Batch, Origin};
use crate::error::{Error, Result};
use crate::forward::forward_jump;
use crate::par;
use crate::rng::{tags, StreamRng};
use crate::schedule::NoiseSchedule;

/// Anything that predicts the noise component of `x_t`.
pub trait EpsPredictor: Sync {
    fn dim(&self) -> usize;
    fn predict_eps(&self, x: &Batch, t: usize) -> Result<Batch>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetShape {
    pub dim: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
}

impl NetShape {
    pub fn new(dim: usize, time_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("network dimension must be positive".into()));
        }
        if !time_dim.is_multiple_of(2) {
            return Err(Error::Invalid(format!("time_dim must be even, got {time_dim}")));
        }
        if hidden.contains(&0) {
            return Err(Error::Invalid("hidden widths must be positive".into()));
        }
        Ok(NetShape { dim, time_dim, hidden })
    }

    /// `(fan_in, fan_out)` of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.dim + self.time_dim;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat gradient aligned with the parameter enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.0.iter_mut().for_each(|v| *v *= scale);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: Array2<f64>,
    b: Array1<f64>,
}

#[derive(Debug)]
pub struct EpsNet {
    shape: NetShape,
    layers: Vec<Dense>,
    freqs: Vec<f64>,
    evals: AtomicU64,
}

impl Clone for EpsNet {
    fn clone(&self) -> Self {
        EpsNet {
            shape: self.shape.clone(),
            layers: self.layers.clone(),
            freqs: self.freqs.clone(),
            evals: AtomicU64::new(0),
        }
    }
}

impl PartialEq for EpsNet {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.layers == other.layers
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl EpsNet {
    /// All weights and biases zero.
    pub fn zeros(shape: NetShape) -> Self {
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense {
                w: Array2::zeros((o, i)),
                b: Array1::zeros(o),
            })
            .collect();
        Self::assemble(shape, layers)
    }

    /// Fan-in scaled uniform initialization, `U(−1/√fan_in, 1/√fan_in)` for
    /// weights and biases, drawn from a stream keyed by `seed`.
    pub fn init(shape: NetShape, seed: u64) -> Self {
        let root = StreamRng::new(seed).derive(tags::INIT);
        let layers = shape
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| {
                let bound = 1.0 / (i as f64).sqrt();
                let mut rng = root.stream(l as u64);
                let w = Array2::from_shape_fn((o, i), |_| rng.random_range(-bound..bound));
                let b = Array1::from_shape_fn(o, |_| rng.random_range(-bound..bound));
                Dense { w, b }
            })
            .collect();
        Self::assemble(shape, layers)
    }

    fn assemble(shape: NetShape, layers: Vec<Dense>) -> Self {
        let half = shape.time_dim / 2;
        let freqs = (0..half)
            .map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp())
            .collect();
        EpsNet {
            shape,
            layers,
            freqs,
            evals: AtomicU64::new(0),
        }
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn num_params(&self) -> usize {
        self.shape.num_params()
    }

    /// Number of per-vector network evaluations since construction or the
    /// last [`reset_evals`](Self::reset_evals).
    pub fn evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_evals(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    /// Flat parameter vector in enumeration order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = flat[off];
                off += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
        Ok(())
    }

    pub fn time_embedding(&self, t: usize) -> Vec<f64> {
        let tf = t as f64;
        let mut e: Vec<f64> = self.freqs.iter().map(|f| (tf * f).sin()).collect();
        e.extend(self.freqs.iter().map(|f| (tf * f).cos()));
        e
    }

    fn input_matrix(&self, x: &[f64], rows: std::ops::Range<usize>, emb: &[f64]) -> Array2<f64> {
        let d = self.shape.dim;
        let width = d + emb.len();
        let n = rows.len();
        let mut m = Array2::zeros((n, width));
        for (r, i) in rows.enumerate() {
            let mut row = m.row_mut(r);
            for k in 0..d {
                row[k] = x[i * d + k];
            }
            for (k, e) in emb.iter().enumerate() {
                row[d + k] = *e;
            }
        }
        m
    }

    fn forward_block(&self, input: Array2<f64>, keep: bool) -> (Array2<f64>, BlockCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = input;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w.t());
            z += &layer.b;
            if l < last {
                let act = z.mapv(silu);
                if keep {
                    inputs.push(h);
                    pre.push(z);
                }
                h = act;
            } else {
                if keep {
                    inputs.push(h);
                }
                h = z;
            }
        }
        (h, BlockCache { inputs, pre })
    }

    fn check_input(&self, x: &[f64]) -> Result<usize> {
        let d = self.shape.dim;
        if x.is_empty() || !x.len().is_multiple_of(d) {
            return Err(Error::Dimension {
                expected: d,
                got: if x.is_empty() { 0 } else { x.len() % d },
            });
        }
        Ok(x.len() / d)
    }

    /// ε̂ for a row-major `n × dim` slice, all rows at step `t`.
    pub fn predict_rows(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let n = self.check_input(x)?;
        let emb = self.time_embedding(t);
        let blocks = par::map_blocks(n, |r| {
            let input = self.input_matrix(x, r, &emb);
            self.forward_block(input, false).0
        });
        self.evals.fetch_add(n as u64, Ordering::Relaxed);
        let mut out = Vec::with_capacity(n * self.shape.dim);
        for b in blocks {
            out.extend(b.iter());
        }
        Ok(out)
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_tape(&self, x: &[f64], t: usize) -> Result<Tape> {
        let n = self.check_input(x)?;
        let emb = self.time_embedding(t);
        let blocks = par::map_blocks(n, |r| {
            let input = self.input_matrix(x, r, &emb);
            self.forward_block(input, true)
        });
        self.evals.fetch_add(n as u64, Ordering::Relaxed);
        let mut output = Vec::with_capacity(n * self.shape.dim);
        let mut caches = Vec::with_capacity(blocks.len());
        for (o, c) in blocks {
            output.extend(o.iter());
            caches.push(c);
        }
        Ok(Tape { output, caches, n })
    }

    fn backward_block(&self, cache: &BlockCache, grad_out: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let nl = self.layers.len();
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(nl);
        let mut g = grad_out.to_owned();
        for l in (0..nl).rev() {
            if l < nl - 1 {
                let z = &cache.pre[l];
                g.zip_mut_with(z, |gv, zv| *gv *= silu_grad(*zv));
            }
            let dw = g.t().dot(&cache.inputs[l]);
            let db = g.sum_axis(Axis(0));
            let g_in = g.dot(&self.layers[l].w);
            grads.push((dw, db));
            g = g_in;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (dw, db) in grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        let gx = g.slice(s![.., ..self.shape.dim]).to_owned();
        (flat, gx)
    }
}

#[derive(Debug)]
struct BlockCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Recorded forward pass over a batch (blocked as in [`par::map_blocks`]).
#[derive(Debug)]
pub struct Tape {
    output: Vec<f64>,
    caches: Vec<BlockCache>,
    n: usize,
}

impl Tape {
    /// Row-major `n × dim` predictions.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Vector-Jacobian product: given ∂L/∂ε̂ (row-major `n × dim`), returns
    /// ∂L/∂θ and ∂L/∂x. Block gradients are combined in block order.
    pub fn backward(&self, net: &EpsNet, grad_out: &[f64]) -> Result<(GradientVector, Vec<f64>)> {
        let d = net.shape.dim;
        if grad_out.len() != self.n * d {
            return Err(Error::Dimension {
                expected: self.n * d,
                got: grad_out.len(),
            });
        }
        let parts = par::map_indices(self.caches.len(), |b| {
            let lo = b * par::BLOCK_ROWS;
            let hi = (lo + par::BLOCK_ROWS).min(self.n);
            let view = ArrayView2::from_shape((hi - lo, d), &grad_out[lo * d..hi * d]).expect("block shape");
            net.backward_block(&self.caches[b], view)
        });
        let mut total = GradientVector::zeros(net.num_params());
        let mut gx = Vec::with_capacity(self.n * d);
        for (flat, g) in parts {
            for (a, v) in total.0.iter_mut().zip(&flat) {
                *a += v;
            }
            gx.extend(g.iter());
        }
        Ok((total, gx))
    }
}

impl EpsPredictor for EpsNet {
    fn dim(&self) -> usize {
        self.shape.dim
    }

    fn predict_eps(&self, x: &Batch, t: usize) -> Result<Batch> {
        x.check_dim(self.shape.dim)?;
        let out = self.predict_rows(x.as_slice(), t)?;
        Ok(Batch::from_parts(out, self.shape.dim, t, Origin::Backward))
    }
}

fn squared_error_mean(eps: &[f64], pred: &[f64], n: usize) -> f64 {
    let dim = eps.len() / n;
    par::sum_blocks(n, |r| {
        let mut acc = 0.0;
        for i in r {
            for k in 0..dim {
                let d = eps[i * dim + k] - pred[i * dim + k];
                acc += d * d;
            }
        }
        acc
    }) / n as f64
}

/// Simplified loss at step t, `mean_i ‖ε_i − ε̂(√ᾱ_t x0_i + √(1−ᾱ_t) ε_i, t)‖²`,
/// with its exact gradient.
pub fn loss_nll_t(
    net: &EpsNet,
    x0: &Batch,
    t: usize,
    sched: &NoiseSchedule,
    rng: &StreamRng,
) -> Result<(f64, GradientVector)> {
    x0.check_dim(net.shape.dim)?;
    let (xt, eps) = forward_jump(x0, t, sched, rng)?;
    let n = xt.len();
    let tape = net.forward_tape(xt.as_slice(), t)?;
    let pred = tape.output();
    let loss = squared_error_mean(eps.as_slice(), pred, n);
    let scale = 2.0 / n as f64;
    let grad_out: Vec<f64> = pred.iter().zip(eps.as_slice()).map(|(p, e)| scale * (p - e)).collect();
    let (grad, _) = tape.backward(net, &grad_out)?;
    Ok((loss, grad))
}

/// Value of the simplified loss for any predictor (no gradient).
pub fn nll_loss<P: EpsPredictor + ?Sized>(
    predictor: &P,
    x0: &Batch,
    t: usize,
    sched: &NoiseSchedule,
    rng: &StreamRng,
) -> Result<f64> {
    x0.check_dim(predictor.dim())?;
    let (xt, eps) = forward_jump(x0, t, sched, rng)?;
    let pred = predictor.predict_eps(&xt, t)?;
    Ok(squared_error_mean(eps.as_slice(), pred.as_slice(), xt.len()))
}
