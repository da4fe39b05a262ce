//! Joint training: the simplified noise-prediction loss plus the weighted
//! bootstrap MMD regularizer, optimizers, checkpoints and metrics.
//!
//! One step at time index t:
//!
//! 1. draw a data batch S₀ and `t ~ U{1..T}`;
//! 2. `L_nll` on S₀ (the noised batch `x_t` is kept as the MMD target);
//! 3. with regularization on, draw a fresh batch S₀′, warm-start a bootstrap
//!    chain from it at `s ∈ {t+1..min(t+L, T)}`, denoise down to t, and take
//!    `L_reg = MMD²(x̃_t, x_t)`;
//! 4. step on `λ_nll·L_nll + λ_reg·w_t·L_reg`.
//!
//! All randomness in step k is drawn from streams keyed by `(seed, k)`, so
//! a run resumed from a checkpoint continues exactly as an uninterrupted
//! one would.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::batch::Batch;
use crate::eps_net::{loss_nll_t, EpsNet, GradientVector, NetShape};
use crate::error::{Error, Result};
use crate::forward::forward_jump;
use crate::mmd::{mmd_estimate, mmd_grad_x, Estimator, Kernel, KernelFamily, KernelSpec};
use crate::rng::{tags, StreamRng};
use crate::sampler::bootstrap_backward_tape;
use crate::schedule::{make_linear_schedule, make_weight_schedule, NoiseSchedule, SigmaMode, WeightSchedule};

/// Anything that can hand out data batches for a given step. `which`
/// separates the primary batch (0) from the fresh warm-start batch (1).
pub trait DataSource: Sync {
    fn dim(&self) -> usize;
    fn batch(&self, n: usize, step: u64, which: u64, rng: &StreamRng) -> Result<Batch>;
    /// Short identifier recorded in run metadata.
    fn id(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    fn as_u8(self) -> u8 {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
    pub dim: usize,
    pub batch_size: usize,
    pub span: usize,
    pub lambda_nll: f64,
    pub lambda_reg: f64,
    pub rho: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub kernel: KernelSpec,
    pub estimator: Estimator,
    pub regularization: bool,
    pub record_every: u64,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    /// When false, wall-clock columns are written as 0 so that repeated runs
    /// produce byte-identical metrics.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps_t: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            sigma_mode: SigmaMode::Beta,
            dim: 2,
            batch_size: 256,
            span: 5,
            lambda_nll: 0.8,
            lambda_reg: 0.2,
            rho: 0.003,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            total_steps: 20_000,
            seed: 0,
            kernel: KernelSpec::median(KernelFamily::Rbf),
            estimator: Estimator::V,
            regularization: true,
            record_every: 100,
            time_dim: 16,
            hidden: vec![128, 128, 128],
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    /// Schedule and coefficients at the original scale (T = 1000).
    pub fn full_scale() -> Self {
        TrainConfig {
            steps_t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ..TrainConfig::default()
        }
    }

    /// Switches the regularizer off; the objective becomes `L_nll` alone.
    pub fn vanilla(mut self) -> Self {
        self.regularization = false;
        self.lambda_nll = 1.0;
        self.lambda_reg = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.span < 1 {
            return bad("bootstrap span L must be at least 1".into());
        }
        if !(self.lambda_nll >= 0.0 && self.lambda_reg >= 0.0) {
            return bad("loss coefficients must be non-negative".into());
        }
        if (self.lambda_nll + self.lambda_reg - 1.0).abs() > 1e-12 {
            return bad(format!(
                "lambda_nll + lambda_reg must be 1, got {} + {}",
                self.lambda_nll, self.lambda_reg
            ));
        }
        if self.regularization {
            if !(self.lambda_reg > 0.0 && self.lambda_reg < 1.0) {
                return bad(format!(
                    "with regularization on, lambda_reg must lie in (0, 1), got {}",
                    self.lambda_reg
                ));
            }
        } else if self.lambda_reg != 0.0 {
            return bad(format!(
                "lambda_reg must be 0 with regularization off, got {}",
                self.lambda_reg
            ));
        }
        if self.regularization && self.estimator == Estimator::U && self.batch_size < 2 {
            return bad("u-statistic needs batches of at least 2".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam parameters out of range".into());
        }
        if !self.rho.is_finite() || self.rho < 0.0 {
            return bad(format!("rho must be non-negative, got {}", self.rho));
        }
        if self.record_every == 0 {
            return bad("record cadence must be at least 1".into());
        }
        self.schedule()?;
        NetShape::new(self.dim, self.time_dim, self.hidden.clone())?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(make_linear_schedule(self.steps_t, self.beta_start, self.beta_end)?.with_sigma_mode(self.sigma_mode))
    }

    pub fn net_shape(&self) -> Result<NetShape> {
        NetShape::new(self.dim, self.time_dim, self.hidden.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, num_params: usize) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd { lr: cfg.lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: cfg.lr,
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
                t: 0,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
            Optimizer::Adam { .. } => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    params[i] -= *lr * mh / (vh.sqrt() + *eps);
                }
            }
        }
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: EpsNet,
    pub optimizer: Optimizer,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = EpsNet::init(cfg.net_shape()?, cfg.seed);
        let optimizer = Optimizer::new(cfg, net.num_params());
        Ok(TrainState {
            net,
            optimizer,
            step: 0,
            seed: cfg.seed,
        })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            steps_t: cfg.steps_t as u32,
            beta_start: cfg.beta_start,
            beta_end: cfg.beta_end,
            rho: cfg.rho,
            sigma_mode: cfg.sigma_mode,
            shape: self.net.shape().clone(),
            params: self.net.params(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            seed: self.seed,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut net = EpsNet::zeros(c.shape.clone());
        net.set_params(&c.params)?;
        Ok(TrainState {
            net,
            optimizer: c.optimizer.clone(),
            step: c.step,
            seed: c.seed,
        })
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_nll: f64,
    pub loss_reg: f64,
    pub t: usize,
    /// Bootstrap start index, 0 when the regularizer is off.
    pub s: usize,
    pub wall_ms: f64,
    pub weight: f64,
    pub net_evals: u64,
    pub kernel_evals: u64,
}

/// Precomputed per-run quantities.
pub struct Trainer {
    cfg: TrainConfig,
    sched: NoiseSchedule,
    weights: WeightSchedule,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sched = cfg.schedule()?;
        let weights = make_weight_schedule(cfg.rho, cfg.steps_t)?;
        Ok(Trainer { cfg, sched, weights })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn weights(&self) -> &WeightSchedule {
        &self.weights
    }

    /// Root stream for step `k`.
    pub fn step_rng(seed: u64, k: u64) -> StreamRng {
        StreamRng::new(seed).derive(tags::TRAIN_STEP).derive(k)
    }

    /// Loss terms and gradient for the current step, without updating.
    pub fn objective(
        &self,
        net: &EpsNet,
        data: &dyn DataSource,
        seed: u64,
        step: u64,
    ) -> Result<(StepMetrics, GradientVector)> {
        let cfg = &self.cfg;
        if data.dim() != cfg.dim {
            return Err(Error::Dimension {
                expected: cfg.dim,
                got: data.dim(),
            });
        }
        let rng = Self::step_rng(seed, step);
        let evals0 = net.evals();
        let s0 = data.batch(cfg.batch_size, step, 0, &rng.derive(tags::DATA))?;
        let t = rng.derive(tags::TRAIN_T).uniform_int(0, 1, cfg.steps_t);
        let nll_rng = rng.derive(tags::NLL_NOISE);
        let (loss_nll, g_nll) = loss_nll_t(net, &s0, t, &self.sched, &nll_rng)?;
        let mut grad = g_nll.scaled(cfg.lambda_nll);
        let mut metrics = StepMetrics {
            step,
            loss_total: cfg.lambda_nll * loss_nll,
            loss_nll,
            loss_reg: 0.0,
            t,
            s: 0,
            wall_ms: 0.0,
            weight: self.weights.weight(t),
            net_evals: 0,
            kernel_evals: 0,
        };
        if cfg.regularization && t < cfg.steps_t {
            let s0p = data.batch(cfg.batch_size, step, 1, &rng.derive(tags::DATA_PRIME))?;
            let tape = bootstrap_backward_tape(net, &s0p, t, cfg.span, &self.sched, &rng)?;
            // Same noise as the L_nll term: the target is the x_t used above.
            let (x_forw, _) = forward_jump(&s0, t, &self.sched, &nll_rng)?;
            let x_boot = tape.output();
            let est = mmd_estimate(x_boot, &x_forw, &cfg.kernel, cfg.estimator)?;
            let kernel = Kernel {
                family: cfg.kernel.family(),
                gamma: est.gamma,
            };
            let (gx, grad_evals) = mmd_grad_x(x_boot, &x_forw, &kernel, cfg.estimator)?;
            let g_reg = tape.backward(net, &self.sched, &gx)?;
            let w = self.weights.weight(t);
            grad.add_scaled(&g_reg, cfg.lambda_reg * w);
            metrics.loss_reg = est.value;
            metrics.loss_total += cfg.lambda_reg * w * est.value;
            metrics.s = tape.start();
            metrics.kernel_evals = est.kernel_evals + grad_evals;
        }
        metrics.net_evals = net.evals() - evals0;
        Ok((metrics, grad))
    }

    /// One optimization step; advances `state.step`.
    pub fn train_step(&self, state: &mut TrainState, data: &dyn DataSource) -> Result<StepMetrics> {
        let start = Instant::now();
        let (mut metrics, grad) = self.objective(&state.net, data, state.seed, state.step)?;
        if !metrics.loss_total.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence {
                step: state.step,
                detail: format!(
                    "loss_total={} loss_nll={} loss_reg={} t={} s={}",
                    metrics.loss_total, metrics.loss_nll, metrics.loss_reg, metrics.t, metrics.s
                ),
            });
        }
        let mut params = state.net.params();
        state.optimizer.step(&mut params, &grad.0);
        state.net.set_params(&params)?;
        state.step += 1;
        if self.cfg.record_wall_time {
            metrics.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        }
        Ok(metrics)
    }

    /// Runs until `state.step == cfg.total_steps`, recording every
    /// `record_every`-th step and the last one.
    pub fn run(
        &self,
        state: &mut TrainState,
        data: &dyn DataSource,
        mut on_record: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut records = Vec::new();
        while state.step < self.cfg.total_steps {
            let m = self.train_step(state, data)?;
            if m.step % self.cfg.record_every == 0 || m.step + 1 == self.cfg.total_steps {
                on_record(&m);
                records.push(m);
            }
        }
        Ok(records)
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepMetrics>,
}

/// Fresh run from initialization to `cfg.total_steps`.
pub fn train(cfg: &TrainConfig, data: &dyn DataSource) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg.clone())?;
    let mut state = TrainState::new(cfg)?;
    let records = trainer.run(&mut state, data, |_| {})?;
    Ok(TrainOutcome {
        checkpoint: state.checkpoint(cfg),
        records,
    })
}

pub const METRICS_SCHEMA: &str = "# driftlab metrics v1";
pub const METRICS_HEADER: &str = "step,loss_total,loss_nll,loss_reg,t,s,wall_ms";

pub fn write_metrics_csv(path: &Path, records: &[StepMetrics]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = String::new();
    body.push_str(METRICS_SCHEMA);
    body.push('\n');
    body.push_str(METRICS_HEADER);
    body.push('\n');
    for r in records {
        body.push_str(&format!(
            "{},{:e},{:e},{:e},{},{},{:.3}\n",
            r.step, r.loss_total, r.loss_nll, r.loss_reg, r.t, r.s, r.wall_ms
        ));
    }
    w.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DLAB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized training state.
///
/// Layout (little-endian):
///
/// ```text
/// magic "DLAB" | u32 version
/// u32 T | f64 beta_start | f64 beta_end | f64 rho | u8 sigma_mode
/// u32 dim | u32 time_dim | u32 n_hidden | u32 width × n_hidden
/// u64 n_params | f64 × n_params   (layer by layer: W row-major, then b)
/// u8 optimizer (0 sgd, 1 adam) | f64 lr
///   adam only: f64 beta1 | f64 beta2 | f64 eps | u64 t
///              u64 n | f64 m × n | u64 n | f64 v × n
/// u64 step | u64 seed
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub steps_t: u32,
    pub beta_start: f64,
    pub beta_end: f64,
    pub rho: f64,
    pub sigma_mode: SigmaMode,
    pub shape: NetShape,
    pub params: Vec<f64>,
    pub optimizer: Optimizer,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn net(&self) -> Result<EpsNet> {
        let mut net = EpsNet::zeros(self.shape.clone());
        net.set_params(&self.params)?;
        Ok(net)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(
            make_linear_schedule(self.steps_t as usize, self.beta_start, self.beta_end)?
                .with_sigma_mode(self.sigma_mode),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 8 * self.params.len() * 3);
        b.extend_from_slice(&CHECKPOINT_MAGIC);
        let w = &mut b;
        w.write_u32::<LittleEndian>(self.version).unwrap();
        w.write_u32::<LittleEndian>(self.steps_t).unwrap();
        w.write_f64::<LittleEndian>(self.beta_start).unwrap();
        w.write_f64::<LittleEndian>(self.beta_end).unwrap();
        w.write_f64::<LittleEndian>(self.rho).unwrap();
        w.write_u8(self.sigma_mode.as_u8()).unwrap();
        w.write_u32::<LittleEndian>(self.shape.dim as u32).unwrap();
        w.write_u32::<LittleEndian>(self.shape.time_dim as u32).unwrap();
        w.write_u32::<LittleEndian>(self.shape.hidden.len() as u32).unwrap();
        for h in &self.shape.hidden {
            w.write_u32::<LittleEndian>(*h as u32).unwrap();
        }
        write_f64s(w, &self.params);
        w.write_u8(self.optimizer.kind().as_u8()).unwrap();
        match &self.optimizer {
            Optimizer::Sgd { lr } => w.write_f64::<LittleEndian>(*lr).unwrap(),
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                for x in [lr, beta1, beta2, eps] {
                    w.write_f64::<LittleEndian>(*x).unwrap();
                }
                w.write_u64::<LittleEndian>(*t).unwrap();
                write_f64s(w, m);
                write_f64s(w, v);
            }
        }
        w.write_u64::<LittleEndian>(self.step).unwrap();
        w.write_u64::<LittleEndian>(self.seed).unwrap();
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Truncated { what: "magic" })?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Truncated { what: "version" })?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let tr = |what: &'static str| move |_| Error::Truncated { what };
        let steps_t = r.read_u32::<LittleEndian>().map_err(tr("schedule"))?;
        let beta_start = r.read_f64::<LittleEndian>().map_err(tr("schedule"))?;
        let beta_end = r.read_f64::<LittleEndian>().map_err(tr("schedule"))?;
        let rho = r.read_f64::<LittleEndian>().map_err(tr("schedule"))?;
        let mode = r.read_u8().map_err(tr("schedule"))?;
        let sigma_mode =
            SigmaMode::from_u8(mode).ok_or_else(|| Error::CorruptCheckpoint(format!("sigma mode {mode}")))?;
        let dim = r.read_u32::<LittleEndian>().map_err(tr("shape"))? as usize;
        let time_dim = r.read_u32::<LittleEndian>().map_err(tr("shape"))? as usize;
        let n_hidden = r.read_u32::<LittleEndian>().map_err(tr("shape"))? as usize;
        if n_hidden > 1024 {
            return Err(Error::CorruptCheckpoint(format!("{n_hidden} hidden layers")));
        }
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden.push(r.read_u32::<LittleEndian>().map_err(tr("shape"))? as usize);
        }
        let shape = NetShape::new(dim, time_dim, hidden).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let n = read_len(&mut r, "parameters")?;
        if n != shape.num_params() {
            return Err(Error::CorruptCheckpoint(format!(
                "{n} parameters stored, shape needs {}",
                shape.num_params()
            )));
        }
        let params = read_values(&mut r, n, "parameters")?;
        let kind = r.read_u8().map_err(tr("optimizer"))?;
        let lr = r.read_f64::<LittleEndian>().map_err(tr("optimizer"))?;
        let optimizer = match kind {
            0 => Optimizer::Sgd { lr },
            1 => {
                let beta1 = r.read_f64::<LittleEndian>().map_err(tr("optimizer"))?;
                let beta2 = r.read_f64::<LittleEndian>().map_err(tr("optimizer"))?;
                let eps = r.read_f64::<LittleEndian>().map_err(tr("optimizer"))?;
                let t = r.read_u64::<LittleEndian>().map_err(tr("optimizer"))?;
                let m = read_f64s(&mut r, n, "optimizer")?;
                let v = read_f64s(&mut r, n, "optimizer")?;
                Optimizer::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    t,
                    m,
                    v,
                }
            }
            other => return Err(Error::CorruptCheckpoint(format!("optimizer kind {other}"))),
        };
        let step = r.read_u64::<LittleEndian>().map_err(tr("step"))?;
        let seed = r.read_u64::<LittleEndian>().map_err(tr("rng state"))?;
        if !r.is_empty() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            version,
            steps_t,
            beta_start,
            beta_end,
            rho,
            sigma_mode,
            shape,
            params,
            optimizer,
            step,
            seed,
        })
    }
}

fn write_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    w.write_u64::<LittleEndian>(xs.len() as u64).unwrap();
    for x in xs {
        w.write_f64::<LittleEndian>(*x).unwrap();
    }
}

fn read_len(r: &mut &[u8], what: &'static str) -> Result<usize> {
    let n = r.read_u64::<LittleEndian>().map_err(|_| Error::Truncated { what })?;
    if n.saturating_mul(8) > r.len() as u64 {
        return Err(Error::Truncated { what });
    }
    Ok(n as usize)
}

fn read_values(r: &mut &[u8], n: usize, what: &'static str) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)
        .map_err(|_| Error::Truncated { what })?;
    Ok(out)
}

/// Length-prefixed vector that must hold exactly `n` values.
fn read_f64s(r: &mut &[u8], n: usize, what: &'static str) -> Result<Vec<f64>> {
    let len = read_len(r, what)?;
    if len != n {
        return Err(Error::CorruptCheckpoint(format!("{what}: {len} values, expected {n}")));
    }
    read_values(r, n, what)
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&c.to_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
