//! Kernel two-sample statistics.
//!
//! The default estimator is the V-statistic
//! `(1/N²)ΣK(x,x') + (1/M²)ΣK(y,y') − (2/NM)ΣK(x,y)` with the diagonal
//! self-pairs included; the U-statistic drops the diagonals and
//! normalizes the within-set sums by `N(N−1)` and `M(M−1)`.
//!
//! Kernels (all equal to 1 at zero distance):
//!
//! | family | k(x, y) |
//! |--------|---------|
//! | rbf | `exp(−γ‖x−y‖²)` |
//! | laplace | `exp(−γ‖x−y‖₁)` |
//! | rational-quadratic | `(1 + γ‖x−y‖²)^(−1)` (shape parameter fixed at 1) |
//!
//! The median heuristic sets `γ = 1/(2·med²)` for rbf and
//! rational-quadratic (med over Euclidean distances) and `γ = 1/med` for
//! laplace (med over L1 distances), on the pooled sample.
//!
//! Sums are accumulated in row blocks of [`par::BLOCK_ROWS`] and combined
//! in block order, and the two inputs are put in a canonical order first,
//! so `mmd_estimate(X, Y)` and `mmd_estimate(Y, X)` agree bit for bit
//! regardless of thread count.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::par;

/// Pooled points beyond this count are subsampled (evenly strided) before
/// the median heuristic, bounding its cost at about 2·10⁶ distances.
pub const MEDIAN_MAX_POINTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    Rbf,
    Laplace,
    RationalQuadratic,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 3] = [
        KernelFamily::Rbf,
        KernelFamily::Laplace,
        KernelFamily::RationalQuadratic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Laplace => "laplace",
            KernelFamily::RationalQuadratic => "rq",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rbf" | "gaussian" => Ok(KernelFamily::Rbf),
            "laplace" | "laplacian" => Ok(KernelFamily::Laplace),
            "rq" | "rational-quadratic" | "rational_quadratic" => Ok(KernelFamily::RationalQuadratic),
            other => Err(Error::Invalid(format!("unknown kernel family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: Bandwidth,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: Bandwidth) -> Result<Self> {
        if let Bandwidth::Fixed(g) = bandwidth {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Invalid(format!("kernel bandwidth must be positive, got {g}")));
            }
        }
        Ok(KernelSpec { family, bandwidth })
    }

    pub fn median(family: KernelFamily) -> Self {
        KernelSpec {
            family,
            bandwidth: Bandwidth::Median,
        }
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> Bandwidth {
        self.bandwidth
    }

    /// Fixes the bandwidth for a concrete pair of samples.
    pub fn resolve(&self, x: &Batch, y: &Batch) -> Result<ResolvedKernel> {
        match self.bandwidth {
            Bandwidth::Fixed(gamma) => Ok(ResolvedKernel {
                kernel: Kernel {
                    family: self.family,
                    gamma,
                },
                fallback: false,
            }),
            Bandwidth::Median => {
                let (a, b, _) = canonical(x, y);
                median_heuristic(a, b, self.family)
            }
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bandwidth {
            Bandwidth::Fixed(g) => write!(f, "{}(gamma={g})", self.family),
            Bandwidth::Median => write!(f, "{}(median)", self.family),
        }
    }
}

/// A kernel with a concrete bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub family: KernelFamily,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedKernel {
    pub kernel: Kernel,
    /// True when the median distance was zero and γ fell back to 1.
    pub fallback: bool,
}

impl Kernel {
    pub fn new(family: KernelFamily, gamma: f64) -> Result<Self> {
        KernelSpec::new(family, Bandwidth::Fixed(gamma))?;
        Ok(Kernel { family, gamma })
    }

    #[inline]
    fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Rbf => (-self.gamma * sq_dist(x, y)).exp(),
            KernelFamily::Laplace => (-self.gamma * l1_dist(x, y)).exp(),
            KernelFamily::RationalQuadratic => 1.0 / (1.0 + self.gamma * sq_dist(x, y)),
        }
    }

    /// Adds `scale · ∂k(x, y)/∂x` to `out`.
    #[inline]
    fn add_grad_x(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        match self.family {
            KernelFamily::Rbf => {
                let k = (-self.gamma * sq_dist(x, y)).exp();
                let c = -2.0 * self.gamma * k * scale;
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o += c * (a - b);
                }
            }
            KernelFamily::Laplace => {
                let k = (-self.gamma * l1_dist(x, y)).exp();
                let c = -self.gamma * k * scale;
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    let d = a - b;
                    if d != 0.0 {
                        *o += c * d.signum();
                    }
                }
            }
            KernelFamily::RationalQuadratic => {
                let k = 1.0 / (1.0 + self.gamma * sq_dist(x, y));
                let c = -2.0 * self.gamma * k * k * scale;
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o += c * (a - b);
                }
            }
        }
    }
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
fn l1_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()
}

pub fn kernel_eval(k: &Kernel, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(k.eval_unchecked(x, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    #[default]
    V,
    U,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::V => "v",
            Estimator::U => "u",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v" | "v-statistic" => Ok(Estimator::V),
            "u" | "u-statistic" => Ok(Estimator::U),
            other => Err(Error::Invalid(format!("unknown estimator `{other}` (expected v or u)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmdEstimate {
    pub value: f64,
    pub estimator: Estimator,
    pub n: usize,
    pub m: usize,
    pub kernel: KernelSpec,
    pub gamma: f64,
    pub bandwidth_fallback: bool,
    pub kernel_evals: u64,
}

/// Orders the pair by (size, contents) so symmetric callers see the same
/// argument order. The flag is true when the inputs were swapped.
fn canonical<'a>(x: &'a Batch, y: &'a Batch) -> (&'a Batch, &'a Batch, bool) {
    let ord = x.len().cmp(&y.len()).then_with(|| {
        x.as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    if ord == Ordering::Greater {
        (y, x, true)
    } else {
        (x, y, false)
    }
}

fn check_pair(x: &Batch, y: &Batch, estimator: Estimator) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    let need = if estimator == Estimator::U { 2 } else { 1 };
    for b in [x, y] {
        if b.len() < need {
            return Err(Error::BatchSize { need, got: b.len() });
        }
    }
    Ok(())
}

/// Σ_{i<j} k(x_i, x_j), blocked over i.
fn within_upper(k: &Kernel, x: &Batch) -> f64 {
    let n = x.len();
    par::sum_blocks(n, |rows| {
        let mut s = 0.0;
        for i in rows {
            let xi = x.row(i);
            for j in i + 1..n {
                s += k.eval_unchecked(xi, x.row(j));
            }
        }
        s
    })
}

/// Σ_{i,j} k(a_i, b_j) for `a.len() <= b.len()`. The leading square part
/// is traversed like [`within_upper`] (diagonal plus symmetrized upper
/// pairs), so a sample compared against itself cancels exactly.
fn cross(k: &Kernel, a: &Batch, b: &Batch) -> f64 {
    let (n, m) = (a.len(), b.len());
    debug_assert!(n <= m);
    let parts = par::map_blocks(n, |rows| {
        let (mut diag, mut off, mut rect) = (0.0, 0.0, 0.0);
        for i in rows {
            let (ai, bi) = (a.row(i), b.row(i));
            diag += k.eval_unchecked(ai, bi);
            for j in i + 1..n {
                off += 0.5 * (k.eval_unchecked(ai, b.row(j)) + k.eval_unchecked(a.row(j), bi));
            }
            for j in n..m {
                rect += k.eval_unchecked(ai, b.row(j));
            }
        }
        (diag, off, rect)
    });
    let (diag, off, rect) = parts
        .into_iter()
        .fold((0.0, 0.0, 0.0), |(d, o, r), (a, b, c)| (d + a, o + b, r + c));
    diag + 2.0 * off + rect
}

fn pairs(n: usize) -> u64 {
    (n as u64) * (n as u64).saturating_sub(1) / 2
}

/// MMD² between two samples with an already resolved kernel. Returns the
/// value and the number of kernel evaluations spent.
pub fn mmd_with_kernel(x: &Batch, y: &Batch, k: &Kernel, estimator: Estimator) -> Result<(f64, u64)> {
    check_pair(x, y, estimator)?;
    let (a, b, _) = canonical(x, y);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let saa = within_upper(k, a);
    let sbb = within_upper(k, b);
    let sab = cross(k, a, b);
    // k(x, x) = 1 for every supported family, so the diagonal adds N.
    let (taa, tbb) = match estimator {
        Estimator::V => ((n + 2.0 * saa) / (n * n), (m + 2.0 * sbb) / (m * m)),
        Estimator::U => (2.0 * saa / (n * (n - 1.0)), 2.0 * sbb / (m * (m - 1.0))),
    };
    let value = taa + tbb - 2.0 * sab / (n * m);
    let evals = pairs(a.len()) + pairs(b.len()) + (a.len() * b.len()) as u64;
    Ok((value, evals))
}

pub fn mmd_estimate(x: &Batch, y: &Batch, spec: &KernelSpec, estimator: Estimator) -> Result<MmdEstimate> {
    check_pair(x, y, estimator)?;
    let resolved = spec.resolve(x, y)?;
    let (value, evals) = mmd_with_kernel(x, y, &resolved.kernel, estimator)?;
    Ok(MmdEstimate {
        value,
        estimator,
        n: x.len(),
        m: y.len(),
        kernel: *spec,
        gamma: resolved.kernel.gamma,
        bandwidth_fallback: resolved.fallback,
        kernel_evals: evals,
    })
}

/// Gradient of MMD²(X, Y) with respect to the rows of X (row-major, same
/// layout as `x`), holding the kernel bandwidth fixed. Returns the
/// gradient and the number of kernel evaluations spent.
pub fn mmd_grad_x(x: &Batch, y: &Batch, k: &Kernel, estimator: Estimator) -> Result<(Vec<f64>, u64)> {
    check_pair(x, y, estimator)?;
    let (n, m, dim) = (x.len(), y.len(), x.dim());
    let nf = n as f64;
    let within = match estimator {
        Estimator::V => 2.0 / (nf * nf),
        Estimator::U => 2.0 / (nf * (nf - 1.0)),
    };
    let between = -2.0 / (nf * m as f64);
    let mut grad = vec![0.0; n * dim];
    par::for_each_row_mut(&mut grad, dim, |i, g| {
        let xi = x.row(i);
        for j in 0..n {
            if j != i {
                k.add_grad_x(xi, x.row(j), within, g);
            }
        }
        for yj in y.rows() {
            k.add_grad_x(xi, yj, between, g);
        }
    });
    let evals = (n * (n - 1) + n * m) as u64;
    Ok((grad, evals))
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (lower, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *upper;
    if n % 2 == 1 {
        hi
    } else {
        let lo = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Median-heuristic bandwidth for the pooled sample `x ∪ y`.
pub fn median_heuristic(x: &Batch, y: &Batch, family: KernelFamily) -> Result<ResolvedKernel> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    let total = x.len() + y.len();
    if total < 2 {
        return Err(Error::BatchSize { need: 2, got: total });
    }
    let pooled: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    let pts: Vec<&[f64]> = if total > MEDIAN_MAX_POINTS {
        (0..MEDIAN_MAX_POINTS)
            .map(|i| pooled[i * total / MEDIAN_MAX_POINTS])
            .collect()
    } else {
        pooled
    };
    let p = pts.len();
    let l1 = family == KernelFamily::Laplace;
    let mut dists: Vec<f64> = par::map_indices(p, |i| {
        pts[i + 1..]
            .iter()
            .map(|q| {
                if l1 {
                    l1_dist(pts[i], q)
                } else {
                    sq_dist(pts[i], q).sqrt()
                }
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let med = median_in_place(&mut dists);
    if !(med > 0.0) {
        log::warn!("median pairwise distance is zero; using gamma = 1 for {family}");
        return Ok(ResolvedKernel {
            kernel: Kernel { family, gamma: 1.0 },
            fallback: true,
        });
    }
    let gamma = if l1 { 1.0 / med } else { 1.0 / (2.0 * med * med) };
    Ok(ResolvedKernel {
        kernel: Kernel { family, gamma },
        fallback: false,
    })
}

/// Gram matrices of a fixed pair of samples, kept so the V-statistic can be
/// re-evaluated under resampling weights without new kernel evaluations.
/// Stored in single precision to halve memory at N = M = 4000.
pub struct GramCache {
    n: usize,
    m: usize,
    kxx: Vec<f32>,
    kyy: Vec<f32>,
    kxy: Vec<f32>,
}

impl GramCache {
    pub fn new(x: &Batch, y: &Batch, k: &Kernel) -> Result<Self> {
        check_pair(x, y, Estimator::V)?;
        let gram = |a: &Batch, b: &Batch| -> Vec<f32> {
            par::map_indices(a.len(), |i| {
                b.rows()
                    .map(|r| k.eval_unchecked(a.row(i), r) as f32)
                    .collect::<Vec<_>>()
            })
            .into_iter()
            .flatten()
            .collect()
        };
        Ok(GramCache {
            n: x.len(),
            m: y.len(),
            kxx: gram(x, x),
            kyy: gram(y, y),
            kxy: gram(x, y),
        })
    }

    /// V-statistic with multiplicity weights (each summing to N and M
    /// respectively); unit weights reproduce the plain estimate.
    pub fn weighted_v(&self, wx: &[f64], wy: &[f64]) -> f64 {
        fn quad(g: &[f32], wa: &[f64], wb: &[f64]) -> f64 {
            let cols = wb.len();
            par::sum_blocks(wa.len(), |rows| {
                let mut s = 0.0;
                for i in rows {
                    if wa[i] == 0.0 {
                        continue;
                    }
                    let row = &g[i * cols..(i + 1) * cols];
                    let r: f64 = row.iter().zip(wb).map(|(k, w)| *k as f64 * w).sum();
                    s += wa[i] * r;
                }
                s
            })
        }
        let sx: f64 = wx.iter().sum();
        let sy: f64 = wy.iter().sum();
        debug_assert_eq!(wx.len(), self.n);
        debug_assert_eq!(wy.len(), self.m);
        quad(&self.kxx, wx, wx) / (sx * sx) + quad(&self.kyy, wy, wy) / (sy * sy)
            - 2.0 * quad(&self.kxy, wx, wy) / (sx * sy)
    }
}
