//! Drift series: MMD between backward-chain samples and a reference sample
//! at a grid of time indices.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::batch::{Batch, Origin};
use crate::eps_net::EpsPredictor;
use crate::error::{Error, Result};
use crate::forward::forward_jump;
use crate::mmd::{mmd_estimate, Estimator, KernelFamily, KernelSpec};
use crate::rng::{tags, StreamRng};
use crate::sampler::{bootstrap_backward, sample_chain, DenoiseOptions};
use crate::schedule::NoiseSchedule;
use crate::trainer::DataSource;

/// What the backward samples at `t − 1` are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reference {
    /// Forward-process samples `q(x_{t−1})`.
    #[default]
    Forward,
    /// Bootstrap short-chain samples, the inputs the module sees in
    /// regularized training.
    Bootstrap,
}

impl Reference {
    pub fn name(self) -> &'static str {
        match self {
            Reference::Forward => "forward",
            Reference::Bootstrap => "bootstrap",
        }
    }
}

impl std::str::FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forward" | "q" => Ok(Reference::Forward),
            "bootstrap" => Ok(Reference::Bootstrap),
            other => Err(Error::Invalid(format!(
                "unknown drift reference `{other}` (expected forward or bootstrap)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftOptions {
    pub n: usize,
    pub m: usize,
    pub t_grid: Vec<usize>,
    pub kernels: Vec<KernelSpec>,
    pub estimator: Estimator,
    pub reference: Reference,
    /// Bootstrap span used when `reference` is [`Reference::Bootstrap`].
    pub span: usize,
    pub seed: u64,
    pub denoise: DenoiseOptions,
}

impl DriftOptions {
    /// N = M = 1000, the default grid, all three kernel families with
    /// median bandwidth, V-statistic, forward reference.
    pub fn new(steps: usize, seed: u64) -> Self {
        DriftOptions {
            n: 1000,
            m: 1000,
            t_grid: default_t_grid(steps),
            kernels: KernelFamily::ALL.iter().map(|&f| KernelSpec::median(f)).collect(),
            estimator: Estimator::V,
            reference: Reference::Forward,
            span: 5,
            seed,
            denoise: DenoiseOptions::default(),
        }
    }
}

/// Ten (or fewer, for T < 10) equally spaced indices from 1 to T inclusive.
pub fn default_t_grid(steps: usize) -> Vec<usize> {
    let points = steps.min(10);
    if points <= 1 {
        return vec![steps.max(1)];
    }
    let mut grid: Vec<usize> = (0..points)
        .map(|i| 1 + ((steps - 1) as f64 * i as f64 / (points - 1) as f64).round() as usize)
        .collect();
    grid.dedup();
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftRecord {
    pub t: usize,
    pub kernel: KernelFamily,
    pub estimator: Estimator,
    pub value: f64,
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSeries {
    /// Ordered by decreasing t, kernels in request order within each t.
    pub records: Vec<DriftRecord>,
    pub seed: u64,
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub reference: Reference,
}

pub const DRIFT_SCHEMA: &str = "# driftlab drift v1";
pub const DRIFT_HEADER: &str = "t,kernel,estimator,value,N,M";

impl DriftSeries {
    pub fn value(&self, t: usize, kernel: KernelFamily) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.t == t && r.kernel == kernel)
            .map(|r| r.value)
    }

    /// `value(t = 1) / value(t = T)` for one kernel; `None` when either end
    /// is missing from the grid.
    pub fn ratio(&self, kernel: KernelFamily, steps: usize) -> Option<f64> {
        Some(self.value(1, kernel)? / self.value(steps, kernel)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(DRIFT_SCHEMA);
        s.push('\n');
        let _ = writeln!(s, "# seed = {}", self.seed);
        let _ = writeln!(s, "# checkpoint = {}", self.checkpoint_id);
        let _ = writeln!(s, "# dataset = {}", self.dataset_id);
        let _ = writeln!(s, "# reference = {}", self.reference.name());
        s.push_str(DRIFT_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{:e},{},{}", r.t, r.kernel, r.estimator, r.value, r.n, r.m);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Samples the full backward chain once (N draws, recorded at `t − 1` for
/// every grid point) and compares each recorded batch with M reference
/// draws at the same index under every requested kernel.
pub fn measure_drift<P: EpsPredictor + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    data: &dyn DataSource,
    opts: &DriftOptions,
    checkpoint_id: &str,
) -> Result<DriftSeries> {
    let big_t = sched.steps();
    if data.dim() != predictor.dim() {
        return Err(Error::Dimension {
            expected: predictor.dim(),
            got: data.dim(),
        });
    }
    if opts.t_grid.is_empty() {
        return Err(Error::Invalid("empty t grid".into()));
    }
    if opts.kernels.is_empty() {
        return Err(Error::Invalid("no kernels requested".into()));
    }
    if opts.n < 2 || opts.m < 2 {
        return Err(Error::BatchSize {
            need: 2,
            got: opts.n.min(opts.m),
        });
    }
    for &t in &opts.t_grid {
        if t < 1 || t > big_t {
            return Err(Error::TimeRange { t, lo: 1, hi: big_t });
        }
    }
    let grid: BTreeSet<usize> = opts.t_grid.iter().copied().collect();
    let record_at: BTreeSet<usize> = grid.iter().map(|t| t - 1).collect();
    let root = StreamRng::new(opts.seed).derive(tags::DRIFT);
    let backward = sample_chain(
        predictor,
        opts.n,
        sched,
        &root.derive(tags::DENOISE),
        &record_at,
        opts.denoise,
    )?;
    let ref_rng = root.derive(tags::FORWARD_REF);
    let x0 = data.batch(opts.m, 0, 0, &ref_rng.derive(tags::DATA))?;
    let mut records = Vec::with_capacity(grid.len() * opts.kernels.len());
    for &t in grid.iter().rev() {
        let at = t - 1;
        let reference = reference_at(predictor, sched, data, &x0, at, opts, &ref_rng)?;
        let back = &backward[&at];
        for spec in &opts.kernels {
            let est = mmd_estimate(back, &reference, spec, opts.estimator)?;
            records.push(DriftRecord {
                t,
                kernel: spec.family(),
                estimator: opts.estimator,
                value: est.value,
                n: opts.n,
                m: opts.m,
            });
        }
    }
    Ok(DriftSeries {
        records,
        seed: opts.seed,
        checkpoint_id: checkpoint_id.to_string(),
        dataset_id: data.id(),
        reference: opts.reference,
    })
}

fn reference_at<P: EpsPredictor + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    data: &dyn DataSource,
    x0: &Batch,
    at: usize,
    opts: &DriftOptions,
    rng: &StreamRng,
) -> Result<Batch> {
    let rng = rng.derive(at as u64);
    match opts.reference {
        Reference::Forward if at == 0 => Ok(x0.clone()),
        Reference::Forward => Ok(forward_jump(x0, at, sched, &rng)?.0.retag(at, Origin::Forward)),
        Reference::Bootstrap => {
            let start = data.batch(opts.m, 0, 1, &rng.derive(tags::DATA_PRIME))?;
            Ok(bootstrap_backward(predictor, &start, at, opts.span, sched, &rng)?.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eps_net::{EpsNet, NetShape};
    use crate::harness::datasets::Builtin;
    use crate::schedule::make_linear_schedule;

    #[test]
    fn grid_defaults() {
        assert_eq!(default_t_grid(100), vec![1, 12, 23, 34, 45, 56, 67, 78, 89, 100]);
        assert_eq!(default_t_grid(1000).len(), 10);
        assert_eq!(default_t_grid(4), vec![1, 2, 3, 4]);
        assert_eq!(default_t_grid(1), vec![1]);
        let g = default_t_grid(37);
        assert_eq!((g[0], *g.last().unwrap(), g.len()), (1, 37, 10));
    }

    fn small_opts(steps: usize) -> DriftOptions {
        DriftOptions {
            n: 200,
            m: 200,
            ..DriftOptions::new(steps, 5)
        }
    }

    #[test]
    fn series_shape_and_determinism() {
        let sched = make_linear_schedule(20, 1e-3, 0.3).unwrap();
        let net = EpsNet::init(NetShape::new(2, 8, vec![16]).unwrap(), 1);
        let data = Builtin::mixture();
        let opts = small_opts(20);
        let a = measure_drift(&net, &sched, &data, &opts, "x").unwrap();
        assert_eq!(a.records.len(), opts.t_grid.len() * 3);
        let ts: Vec<usize> = a.records.iter().step_by(3).map(|r| r.t).collect();
        assert!(ts.windows(2).all(|w| w[0] > w[1]), "{ts:?}");
        assert_eq!(ts[0], 20);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(a.records.iter().all(|r| r.value >= 0.0 && r.n == 200 && r.m == 200));
        assert_eq!(a, measure_drift(&net, &sched, &data, &opts, "x").unwrap());
        let b = measure_drift(
            &net,
            &sched,
            &data,
            &DriftOptions {
                reference: Reference::Bootstrap,
                ..opts
            },
            "x",
        )
        .unwrap();
        assert_eq!(b.records.len(), a.records.len());
    }

    #[test]
    fn untrained_network_drifts_more_at_t1() {
        let sched = make_linear_schedule(50, 1e-3, 0.2).unwrap();
        let net = EpsNet::init(NetShape::new(2, 8, vec![32, 32]).unwrap(), 3);
        let data = Builtin::mixture();
        let opts = DriftOptions {
            t_grid: vec![1, 50],
            ..small_opts(50)
        };
        let s = measure_drift(&net, &sched, &data, &opts, "random").unwrap();
        for f in KernelFamily::ALL {
            assert!(s.value(1, f).unwrap() > s.value(50, f).unwrap(), "{f}");
            assert!(s.ratio(f, 50).unwrap() > 1.0);
        }
    }

    #[test]
    fn bad_inputs() {
        let sched = make_linear_schedule(10, 1e-3, 0.3).unwrap();
        let net = EpsNet::init(NetShape::new(2, 8, vec![8]).unwrap(), 1);
        let data = Builtin::mixture();
        let mut opts = small_opts(10);
        opts.t_grid = vec![0];
        assert!(matches!(
            measure_drift(&net, &sched, &data, &opts, ""),
            Err(Error::TimeRange { .. })
        ));
        opts.t_grid = vec![11];
        assert!(matches!(
            measure_drift(&net, &sched, &data, &opts, ""),
            Err(Error::TimeRange { .. })
        ));
        let net3 = EpsNet::init(NetShape::new(3, 8, vec![8]).unwrap(), 1);
        assert!(matches!(
            measure_drift(&net3, &sched, &data, &small_opts(10), ""),
            Err(Error::Dimension { .. })
        ));
    }

    fn series_from_parts(records: Vec<DriftRecord>) -> DriftSeries {
        DriftSeries {
            records,
            seed: 0,
            checkpoint_id: String::new(),
            dataset_id: String::new(),
            reference: Reference::Forward,
        }
    }

    #[test]
    fn golden_csv() {
        let s = DriftSeries {
            seed: 7,
            checkpoint_id: "abc".into(),
            dataset_id: "toy".into(),
            ..series_from_parts(vec![
                DriftRecord {
                    t: 10,
                    kernel: KernelFamily::Rbf,
                    estimator: Estimator::V,
                    value: 0.0025,
                    n: 1000,
                    m: 1000,
                },
                DriftRecord {
                    t: 1,
                    kernel: KernelFamily::Laplace,
                    estimator: Estimator::U,
                    value: 0.5,
                    n: 3,
                    m: 4,
                },
            ])
        };
        assert_eq!(
            s.to_csv(),
            "# driftlab drift v1\n# seed = 7\n# checkpoint = abc\n# dataset = toy\n# reference = forward\n\
             t,kernel,estimator,value,N,M\n10,rbf,v,2.5e-3,1000,1000\n1,laplace,u,5e-1,3,4\n"
        );
    }
}
