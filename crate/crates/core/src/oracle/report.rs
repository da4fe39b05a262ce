use std::fmt::Write as _;
use std::path::Path;

use super::chain::GaussChain;
use super::gaussian::Gaussian;
use crate::batch::{Batch, Origin};
use crate::error::{Error, Result};
use crate::mmd::{mmd_estimate, Estimator, GramCache, Kernel, KernelSpec};
use crate::rng::{tags, StreamRng};
use crate::schedule::NoiseSchedule;

/// Thresholds for the two hypotheses checked per step: the backward
/// entropy does not increase, and the implied ε-residual has second moment
/// within a relative band of K.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlagThresholds {
    pub entropy_tol: f64,
    pub eps_rel: f64,
}

impl Default for FlagThresholds {
    fn default() -> Self {
        FlagThresholds {
            entropy_tol: 1e-12,
            eps_rel: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationRecord {
    pub t: usize,
    /// `KL(p(x_{t−1}) ‖ q(x_{t−1}))`.
    pub e_cumu: f64,
    pub e_mod: f64,
    /// `E_cumu(t) − E_cumu(t+1) − E_mod(t)`, with `E_cumu(T+1) = 0`.
    pub slack: f64,
    /// `(E_cumu(t) − E_mod(t)) / E_cumu(t+1)` when the denominator exceeds 1e-12.
    pub mu_eff: Option<f64>,
    /// `H(p(x_t))`.
    pub entropy: f64,
    /// `H(p(x_{t−1})) ≤ H(p(x_t)) + tol`.
    pub flag_entropy: bool,
    pub eps_second_moment: f64,
    pub flag_eps: bool,
    pub i_term: f64,
}

/// Per-step report for t = 1..=T (ascending).
pub fn propagation_report(chain: &GaussChain, th: FlagThresholds) -> Result<Vec<PropagationRecord>> {
    let big_t = chain.steps();
    let k = chain.dim() as f64;
    let pm = chain.p_marginals()?;
    let cumu = (1..=big_t)
        .map(|t| super::gaussian_kl(&pm[t - 1], &chain.q_marginal(t - 1)?))
        .collect::<Result<Vec<_>>>()?;
    let cumu_at = |t: usize| if t > big_t { 0.0 } else { cumu[t - 1] };
    (1..=big_t)
        .map(|t| {
            let e_mod = chain.modular_error_given(t, &pm[t])?;
            let next = cumu_at(t + 1);
            let e_cumu = cumu_at(t);
            let eps2 = chain.eps_second_moment_given(t, &pm[t]);
            Ok(PropagationRecord {
                t,
                e_cumu,
                e_mod,
                slack: e_cumu - next - e_mod,
                mu_eff: (next > 1e-12).then(|| (e_cumu - e_mod) / next),
                entropy: pm[t].entropy(),
                flag_entropy: pm[t - 1].entropy() <= pm[t].entropy() + th.entropy_tol,
                eps_second_moment: eps2,
                flag_eps: (eps2 - k).abs() <= th.eps_rel * k,
                i_term: chain.i_term_given(t, &pm[t])?,
            })
        })
        .collect()
}

pub fn flags_hold(report: &[PropagationRecord]) -> bool {
    report.iter().all(|r| r.flag_entropy && r.flag_eps)
}

pub const ORACLE_SCHEMA: &str = "# driftlab oracle v1";
pub const ORACLE_HEADER: &str = "t,E_cumu,E_mod,slack,mu_eff,entropy,flag_entropy,flag_eps";

pub fn report_csv(report: &[PropagationRecord]) -> String {
    let mut s = format!("{ORACLE_SCHEMA}\n{ORACLE_HEADER}\n");
    for r in report {
        let mu = r.mu_eff.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(
            s,
            "{},{:e},{:e},{:e},{},{:e},{},{}",
            r.t, r.e_cumu, r.e_mod, r.slack, mu, r.entropy, r.flag_entropy as u8, r.flag_eps as u8
        )
        .unwrap();
    }
    s
}

pub fn write_report_csv(path: &Path, report: &[PropagationRecord]) -> Result<()> {
    std::fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecursionCheck {
    /// `E_{p(x_{t−1})}[−ln q(x_{t−1})]`.
    pub t_prev: f64,
    pub t_cur: f64,
    pub e_mod: f64,
    pub i_term: f64,
    /// `t_prev − t_cur − e_mod − i_term`.
    pub residual: f64,
}

pub fn recursion_identity_check(chain: &GaussChain, t: usize) -> Result<RecursionCheck> {
    chain.schedule().check_t(t)?;
    let pm = chain.p_marginals()?;
    let t_prev = pm[t - 1].cross_entropy(&chain.q_marginal(t - 1)?)?;
    let t_cur = pm[t].cross_entropy(&chain.q_marginal(t)?)?;
    let e_mod = chain.modular_error_given(t, &pm[t])?;
    let i_term = chain.i_term_given(t, &pm[t])?;
    Ok(RecursionCheck {
        t_prev,
        t_cur,
        e_mod,
        i_term,
        residual: t_prev - t_cur - e_mod - i_term,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsRecord {
    pub t: usize,
    pub kl_exact: f64,
    pub mmd_est: f64,
    pub lower: f64,
    pub upper: f64,
    /// Bootstrap standard error of `mmd_est`.
    pub se: f64,
    pub gamma: f64,
    pub n: usize,
    pub m: usize,
}

impl BoundsRecord {
    /// `kl_exact ∈ [lower − z·se, upper + z·se]`.
    pub fn within(&self, z: f64) -> bool {
        self.kl_exact >= self.lower - z * self.se && self.kl_exact <= self.upper + z * self.se
    }
}

/// Samples `p(x_{t−1})` and `q(x_{t−1})`, estimates the V-statistic MMD²
/// and compares it with the exact cumulative error. The standard error
/// comes from `resamples` bootstrap resamples of both samples, evaluated
/// on cached Gram matrices.
pub fn bounds_check(
    chain: &GaussChain,
    t: usize,
    kernel: &KernelSpec,
    n: usize,
    m: usize,
    rng: &StreamRng,
    resamples: usize,
) -> Result<BoundsRecord> {
    if n < 2 || m < 2 {
        return Err(Error::BatchSize { need: 2, got: n.min(m) });
    }
    let kl_exact = chain.cumulative_error(t)?;
    let k = chain.dim();
    let p = chain.p_marginal(t - 1)?;
    let q = chain.q_marginal(t - 1)?;
    let x = Batch::new(p.sample(n, &rng.derive(1)), k, t - 1, Origin::Backward)?;
    let y = Batch::new(q.sample(m, &rng.derive(2)), k, t - 1, Origin::Forward)?;
    let est = mmd_estimate(&x, &y, kernel, Estimator::V)?;
    let se = if resamples >= 2 {
        let gram = GramCache::new(
            &x,
            &y,
            &Kernel {
                family: kernel.family(),
                gamma: est.gamma,
            },
        )?;
        let rs = rng.derive(tags::RESAMPLE);
        let vals: Vec<f64> = (0..resamples as u64)
            .map(|r| {
                let stream = rs.derive(r);
                let wx = multiplicities(n, stream.stream(0));
                let wy = multiplicities(m, stream.stream(1));
                gram.weighted_v(&wx, &wy)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(BoundsRecord {
        t,
        kl_exact,
        mmd_est: est.value,
        lower: est.value / 4.0,
        upper: est.value,
        se,
        gamma: est.gamma,
        n,
        m,
    })
}

fn multiplicities(n: usize, mut rng: rand_chacha::ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    let mut w = vec![0.0; n];
    for _ in 0..n {
        w[rng.random_range(0..n)] += 1.0;
    }
    w
}

/// Schedule for oracle runs: linear β from 1e-3 to 0.5, so that ᾱ_T is
/// negligible at T = 100 and `p(x_T) = N(0, I)` matches `q(x_T)` to within
/// rounding.
pub fn oracle_schedule(steps: usize) -> Result<NoiseSchedule> {
    crate::schedule::make_linear_schedule(steps, 1e-3, 0.5)
}

/// A random perturbation of the perfect chain for near-point-mass data
/// (variance 1e-6): one to three steps get a scale-A, shift-b or
/// inflate-σ perturbation. The magnitude is halved until both hypothesis
/// flags hold (at most 30 halvings); `None` if they never do.
pub fn random_flagged_chain(
    seed: u64,
    k: usize,
    sched: &NoiseSchedule,
    th: FlagThresholds,
) -> Result<Option<(GaussChain, Vec<PropagationRecord>)>> {
    use rand::Rng;
    let mut rng = StreamRng::new(seed).stream(0);
    let mean: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
    let data = Gaussian::isotropic(mean, 1e-6)?;
    let base = GaussChain::perfect(sched.clone(), data)?;
    let big_t = sched.steps();
    let count = rng.random_range(1..=3);
    let plan: Vec<(usize, u8, f64, Vec<f64>)> = (0..count)
        .map(|_| {
            let t = rng.random_range(1..=big_t);
            let kind = rng.random_range(0..3u8);
            let mag = rng.random_range(0.2..1.0);
            let dir: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            (t, kind, mag, dir)
        })
        .collect();
    let mut scale = 0.05;
    for _ in 0..30 {
        let mut c = base.clone();
        for (t, kind, mag, dir) in &plan {
            let e = scale * mag;
            c = match kind {
                0 => c.scale_a(*t, 1.0 + e)?,
                1 => {
                    let shift: Vec<f64> = dir.iter().map(|d| d * e * sched.beta(*t)).collect();
                    c.shift_b(*t, &shift)?
                }
                _ => c.inflate_sigma(*t, 1.0 - e)?,
            };
        }
        let rep = propagation_report(&c, th)?;
        if flags_hold(&rep) {
            return Ok(Some((c, rep)));
        }
        scale *= 0.5;
    }
    Ok(None)
}

/// A perturbed 2-D chain with correlated data, used for the KL–MMD
/// comparison: scale-A perturbations of 5–25% at two or three steps.
pub fn random_moderate_chain(seed: u64, sched: &NoiseSchedule) -> Result<GaussChain> {
    use nalgebra::DMatrix;
    use rand::Rng;
    let mut rng = StreamRng::new(seed).stream(1);
    let (v1, v2): (f64, f64) = (rng.random_range(0.2..1.0), rng.random_range(0.2..1.0));
    let rho: f64 = rng.random_range(-0.5..0.5);
    let c12 = rho * (v1 * v2).sqrt();
    let data = Gaussian::new(
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        DMatrix::from_row_slice(2, 2, &[v1, c12, c12, v2]),
    )?;
    let mut c = GaussChain::perfect(sched.clone(), data)?;
    for _ in 0..rng.random_range(2..=3) {
        let t = rng.random_range(1..=sched.steps().min(20));
        c = c.scale_a(t, 1.0 + rng.random_range(0.05..0.25))?;
    }
    Ok(c)
}
