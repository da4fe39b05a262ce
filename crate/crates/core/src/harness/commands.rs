//! The CLI commands as library functions. Each writes its artifacts into
//! an output directory and returns the in-memory results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::datasets::Dataset;
use crate::harness::drift::{default_t_grid, measure_drift, DriftOptions, DriftSeries};
use crate::mmd::{KernelFamily, KernelSpec};
use crate::oracle::{
    bounds_check, flags_hold, oracle_schedule, propagation_report, random_flagged_chain, random_moderate_chain,
    recursion_identity_check, write_report_csv, BoundsRecord, FlagThresholds, GaussChain, Gaussian,
};
use crate::rng::StreamRng;
use crate::sampler::DenoiseOptions;
use crate::trainer::{
    load_checkpoint, save_checkpoint, write_metrics_csv, Checkpoint, DataSource, StepMetrics, TrainState, Trainer,
};

pub const CHECKPOINT_FILE: &str = "model.dlab";
pub const METRICS_FILE: &str = "metrics.csv";
pub const META_FILE: &str = "run.meta";
pub const DRIFT_FILE: &str = "drift.csv";
pub const SWEEP_FILE: &str = "sweep_l.csv";
pub const BOUNDS_FILE: &str = "bounds.csv";

pub const SWEEP_SCHEMA: &str = "# driftlab sweep-l v1";
pub const SWEEP_HEADER: &str = "L,drift_ratio,wall_ms_per_step,net_evals_per_step,net_eval_bound";
pub const BOUNDS_SCHEMA: &str = "# driftlab bounds v1";
pub const BOUNDS_HEADER: &str = "case,t,kl_exact,mmd_est,lower,upper,se,gamma,N,M,within";

/// 64-bit FNV-1a of the checkpoint bytes, as 16 hex digits.
pub fn checkpoint_id(c: &Checkpoint) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in c.to_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run metadata: the effective config followed by derived facts as
/// comments.
pub fn run_metadata(cfg: &RunConfig, data: &Dataset, extra: &[(&str, String)]) -> String {
    let mut s = String::from("# driftlab run v1\n");
    s.push_str(&cfg.to_text());
    let _ = writeln!(s, "# dataset_id = {}", data.id());
    if let Dataset::Csv(c) = data {
        if let Some(st) = c.standardization() {
            let _ = writeln!(s, "# standardize_mean = {:?}", st.mean);
            let _ = writeln!(s, "# standardize_std = {:?}", st.std);
        }
    }
    for (k, v) in extra {
        let _ = writeln!(s, "# {k} = {v}");
    }
    s
}

pub struct TrainArtifacts {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepMetrics>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub meta_path: PathBuf,
}

/// Trains per `cfg` and writes the checkpoint, metrics CSV and metadata
/// into `out`. `on_record` sees every recorded step as it happens.
pub fn cmd_train(cfg: &RunConfig, out: &Path, on_record: impl FnMut(&StepMetrics)) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let data = cfg.dataset.load(cfg.train.seed)?;
    let trainer = Trainer::new(cfg.train.clone())?;
    let mut state = TrainState::new(&cfg.train)?;
    let records = trainer.run(&mut state, &data, on_record)?;
    let checkpoint = state.checkpoint(&cfg.train);
    create_dir(out)?;
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let meta_path = out.join(META_FILE);
    save_checkpoint(&checkpoint, &checkpoint_path)?;
    write_metrics_csv(&metrics_path, &records)?;
    write_text(
        &meta_path,
        &run_metadata(cfg, &data, &[("checkpoint_id", checkpoint_id(&checkpoint))]),
    )?;
    Ok(TrainArtifacts {
        checkpoint,
        records,
        checkpoint_path,
        metrics_path,
        meta_path,
    })
}

/// Drift options from the config's drift section, with the grid
/// defaulting to ten points over the checkpoint's T.
pub fn drift_options(cfg: &RunConfig, steps: usize, seed: u64) -> DriftOptions {
    DriftOptions {
        n: cfg.drift.n,
        m: cfg.drift.m,
        t_grid: cfg.drift.t_grid.clone().unwrap_or_else(|| default_t_grid(steps)),
        kernels: cfg.drift.kernels.iter().map(|&f| KernelSpec::median(f)).collect(),
        estimator: cfg.train.estimator,
        reference: cfg.drift.reference,
        span: cfg.train.span,
        seed,
        denoise: DenoiseOptions {
            noiseless_final: cfg.drift.noiseless_final,
        },
    }
}

/// Measures the drift series of a saved checkpoint against the config's
/// dataset and writes `drift.csv` into `out`.
pub fn cmd_drift(checkpoint: &Path, cfg: &RunConfig, out: &Path) -> Result<DriftSeries> {
    let ck = load_checkpoint(checkpoint)?;
    let net = ck.net()?;
    let sched = ck.schedule()?;
    let data = cfg.dataset.load(cfg.train.seed)?;
    if data.dim() != ck.shape.dim {
        return Err(Error::Dimension {
            expected: ck.shape.dim,
            got: data.dim(),
        });
    }
    let opts = drift_options(cfg, sched.steps(), cfg.train.seed);
    let series = measure_drift(&net, &sched, &data, &opts, &checkpoint_id(&ck))?;
    create_dir(out)?;
    series.write_csv(&out.join(DRIFT_FILE))?;
    Ok(series)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub span: usize,
    pub drift_ratio: f64,
    pub wall_ms_per_step: f64,
    pub net_evals_per_step: f64,
    pub max_net_evals: u64,
    /// `B·(1 + L) + B`.
    pub net_eval_bound: u64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_SCHEMA}\n{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:e},{:.4},{:.2},{}",
            r.span, r.drift_ratio, r.wall_ms_per_step, r.net_evals_per_step, r.net_eval_bound
        );
    }
    s
}

/// Trains one regularized model per span in `spans` (same seed, same
/// budget), timing every step, then measures each model's drift ratio
/// under the training kernel family.
pub fn cmd_sweep_l(cfg: &RunConfig, spans: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    if spans.is_empty() || spans.contains(&0) {
        return Err(Error::Invalid("L list must be non-empty with every L >= 1".into()));
    }
    if !cfg.train.regularization {
        return Err(Error::Invalid("sweep-l needs regularization on".into()));
    }
    let data = cfg.dataset.load(cfg.train.seed)?;
    let family = cfg.train.kernel.family();
    let mut rows = Vec::with_capacity(spans.len());
    for &span in spans {
        let mut tc = cfg.train.clone();
        tc.span = span;
        let trainer = Trainer::new(tc.clone())?;
        let mut state = TrainState::new(&tc)?;
        let (mut wall, mut evals, mut max_evals) = (0.0, 0u64, 0u64);
        while state.step < tc.total_steps {
            let start = Instant::now();
            let m = trainer.train_step(&mut state, &data)?;
            wall += start.elapsed().as_secs_f64() * 1e3;
            evals += m.net_evals;
            max_evals = max_evals.max(m.net_evals);
        }
        let steps = tc.total_steps.max(1) as f64;
        let mut opts = drift_options(cfg, tc.steps_t, tc.seed);
        opts.t_grid = vec![1, tc.steps_t];
        opts.kernels = vec![KernelSpec::median(family)];
        let series = measure_drift(&state.net, trainer.schedule(), &data, &opts, "")?;
        let b = tc.batch_size as u64;
        rows.push(SweepRow {
            span,
            drift_ratio: series.ratio(family, tc.steps_t).unwrap_or(f64::NAN),
            wall_ms_per_step: wall / steps,
            net_evals_per_step: evals as f64 / steps,
            max_net_evals: max_evals,
            net_eval_bound: b * (1 + span as u64) + b,
        });
        log::info!("sweep L={span}: {:?}", rows.last().unwrap());
    }
    create_dir(out)?;
    write_text(&out.join(SWEEP_FILE), &sweep_csv(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Perfect,
    Perturbed,
    AssumptionViolating,
    Bounds,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Perfect,
        Scenario::Perturbed,
        Scenario::AssumptionViolating,
        Scenario::Bounds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Perfect => "perfect",
            Scenario::Perturbed => "perturbed",
            Scenario::AssumptionViolating => "assumption-violating",
            Scenario::Bounds => "bounds",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s.trim())
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown oracle scenario `{s}` (expected perfect, perturbed, assumption-violating or bounds)"
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub scenario: Scenario,
    /// `None` for scenarios that make no claim.
    pub passed: Option<bool>,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

/// Sizes for the oracle scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSettings {
    pub steps: usize,
    /// Flagged chains in the perturbed scenario.
    pub flagged_chains: usize,
    /// Chains in the bounds scenario.
    pub chains: usize,
    pub n: usize,
    pub m: usize,
    pub resamples: usize,
    pub z: f64,
    pub min_within: usize,
    pub seed: u64,
    pub thresholds: FlagThresholds,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            steps: 100,
            flagged_chains: 20,
            chains: 30,
            n: 4000,
            m: 4000,
            resamples: 50,
            z: 3.0,
            min_within: 28,
            seed: 0,
            thresholds: FlagThresholds::default(),
        }
    }
}

/// Random data Gaussian of dimension `k` with correlated covariance
/// (dense for `k ≤ 8`).
pub fn random_data_gaussian(seed: u64, k: usize) -> Result<Gaussian> {
    use nalgebra::DMatrix;
    use rand::Rng;
    let mut rng = StreamRng::new(seed).stream(2);
    let mean: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-0.5..0.5));
    let cov = &a * a.transpose() + DMatrix::identity(k, k) * 0.1;
    let cov = (&cov + cov.transpose()) * 0.5;
    Gaussian::new(mean, cov)
}

pub fn bounds_csv(rows: &[BoundsRecord], z: f64) -> String {
    let mut s = format!("{BOUNDS_SCHEMA}\n{BOUNDS_HEADER}\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{}",
            r.t,
            r.kl_exact,
            r.mmd_est,
            r.lower,
            r.upper,
            r.se,
            r.gamma,
            r.n,
            r.m,
            r.within(z)
        );
    }
    s
}

pub fn cmd_oracle(scenario: Scenario, out: &Path, st: &OracleSettings) -> Result<OracleOutcome> {
    create_dir(out)?;
    let sched = oracle_schedule(st.steps)?;
    let mut files = Vec::new();
    let (passed, summary) = match scenario {
        Scenario::Perfect => {
            let mut worst = 0.0f64;
            for k in [1, 2, 4] {
                let chain = GaussChain::perfect(sched.clone(), random_data_gaussian(st.seed + k as u64, k)?)?;
                let rep = propagation_report(&chain, st.thresholds)?;
                worst = rep.iter().map(|r| r.e_cumu).fold(worst, f64::max);
                let path = out.join(format!("perfect_k{k}.csv"));
                write_report_csv(&path, &rep)?;
                files.push(path);
            }
            (
                Some(worst <= 1e-10),
                format!("max cumulative error {worst:e} (limit 1e-10)"),
            )
        }
        Scenario::Perturbed => {
            let (mut worst_slack, mut worst_resid, mut used, mut seed) = (f64::INFINITY, 0.0f64, 0, st.seed);
            while used < st.flagged_chains && seed < st.seed + 20 * st.flagged_chains as u64 + 100 {
                let k = 1 + (seed % 3) as usize;
                if let Some((chain, rep)) = random_flagged_chain(seed, k, &sched, st.thresholds)? {
                    worst_slack = rep.iter().map(|r| r.slack).fold(worst_slack, f64::min);
                    for t in 1..=st.steps {
                        worst_resid = worst_resid.max(recursion_identity_check(&chain, t)?.residual.abs());
                    }
                    let path = out.join(format!("perturbed_{used:02}.csv"));
                    write_report_csv(&path, &rep)?;
                    files.push(path);
                    used += 1;
                }
                seed += 1;
            }
            (
                Some(worst_slack >= -1e-9),
                format!("{used} flagged chains; min slack {worst_slack:e} (limit -1e-9); max recursion residual {worst_resid:e}"),
            )
        }
        Scenario::AssumptionViolating => {
            let data = Gaussian::isotropic(vec![0.3, -0.2], 1e-6)?;
            let chain = GaussChain::perfect(sched.clone(), data)?
                .inflate_sigma(10, 3.0)?
                .scale_a(40, 1.3)?;
            let rep = propagation_report(&chain, st.thresholds)?;
            let min_slack = rep.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
            let path = out.join("assumption_violating.csv");
            write_report_csv(&path, &rep)?;
            files.push(path);
            (
                None,
                format!(
                    "no-claim: hypotheses hold = {}; min slack {min_slack:e}",
                    flags_hold(&rep)
                ),
            )
        }
        Scenario::Bounds => {
            let spec = KernelSpec::median(KernelFamily::Rbf);
            let mut rows = Vec::with_capacity(st.chains);
            for i in 0..st.chains as u64 {
                let chain = random_moderate_chain(st.seed + i, &sched)?;
                let rng = StreamRng::new(st.seed + i).derive(0xB0);
                rows.push(bounds_check(&chain, 1, &spec, st.n, st.m, &rng, st.resamples)?);
            }
            let within = rows.iter().filter(|r| r.within(st.z)).count();
            let path = out.join(BOUNDS_FILE);
            write_text(&path, &bounds_csv(&rows, st.z))?;
            files.push(path);
            (
                Some(within >= st.min_within),
                format!(
                    "{within}/{} cases inside [mmd/4 - {z}se, mmd + {z}se] (need {})",
                    rows.len(),
                    st.min_within,
                    z = st.z
                ),
            )
        }
    };
    Ok(OracleOutcome {
        scenario,
        passed,
        summary,
        files,
    })
}

/// Loads the configured dataset and describes it: row count, dimension,
/// per-dimension mean and variance of the served data.
pub fn ingest_check(cfg: &RunConfig) -> Result<String> {
    let data = cfg.dataset.load(cfg.train.seed)?;
    let batch = match &data {
        Dataset::Csv(c) => c.all(),
        Dataset::Builtin(b) => b.sample(10_000, &StreamRng::new(cfg.train.seed))?,
    };
    let mean = batch.mean();
    let cov = batch.covariance();
    let k = batch.dim();
    let var: Vec<f64> = (0..k).map(|j| cov[j * k + j]).collect();
    let mut s = String::new();
    let _ = writeln!(s, "dataset: {}", data.id());
    let _ = writeln!(
        s,
        "rows: {}{}",
        batch.len(),
        if matches!(data, Dataset::Builtin(_)) {
            " (sampled)"
        } else {
            ""
        }
    );
    let _ = writeln!(s, "K: {k}");
    let _ = writeln!(s, "mean: {mean:?}");
    let _ = writeln!(s, "variance: {var:?}");
    if let Dataset::Csv(c) = &data {
        if let Some(st) = c.standardization() {
            let _ = writeln!(s, "standardized from mean {:?}, std {:?}", st.mean, st.std);
        }
    }
    Ok(s)
}
