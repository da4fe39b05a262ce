use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use driftlab::harness::commands::{
    cmd_drift, cmd_oracle, cmd_sweep_l, cmd_train, ingest_check, OracleSettings, Scenario,
};
use driftlab::harness::{DatasetSource, DatasetSpec, RunConfig};
use driftlab::mmd::{Estimator, KernelFamily};

#[derive(Parser)]
#[command(
    name = "driftlab",
    version,
    about = "Error propagation lab for denoising diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; defaults apply to unset keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DriftFlags {
    /// Comma-separated kernel families (rbf, laplace, rq).
    #[arg(long, value_delimiter = ',')]
    kernels: Option<Vec<KernelFamily>>,
    /// Backward samples per time index.
    #[arg(long = "N")]
    n: Option<usize>,
    /// Reference samples per time index.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Comma-separated time indices in 1..=T.
    #[arg(long = "t-grid", value_delimiter = ',')]
    t_grid: Option<Vec<usize>>,
    #[arg(long, value_parser = ["v", "u"])]
    estimator: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.dlab, metrics.csv and run.meta.
    Train {
        #[command(flatten)]
        common: Common,
        /// Disable the regularizer (plain noise-prediction training).
        #[arg(long)]
        no_reg: bool,
    },
    /// Measure the drift series of a checkpoint.
    Drift {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: DriftFlags,
        /// Checkpoint to evaluate (default: <out>/model.dlab).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model per bootstrap span and compare cost and drift.
    SweepL {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: DriftFlags,
        /// Comma-separated spans (default: sweep_L from the config).
        #[arg(long = "L", value_delimiter = ',')]
        spans: Option<Vec<usize>>,
    },
    /// Run a closed-form oracle scenario.
    Oracle {
        /// perfect, perturbed, assumption-violating or bounds.
        scenario: String,
        #[command(flatten)]
        common: Common,
        #[arg(long = "N")]
        n: Option<usize>,
        #[arg(long = "M")]
        m: Option<usize>,
    },
    /// Load the configured dataset (or a CSV file) and print its moments.
    IngestCheck {
        #[command(flatten)]
        common: Common,
        /// CSV file to check instead of the configured dataset.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Columns per row for --csv.
        #[arg(long = "K", default_value_t = 2)]
        k: usize,
        #[arg(long)]
        standardize: bool,
    },
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn apply_drift_flags(cfg: &mut RunConfig, f: &DriftFlags) -> anyhow::Result<()> {
    if let Some(k) = &f.kernels {
        if k.is_empty() {
            bail!("--kernels needs at least one kernel");
        }
        cfg.drift.kernels = k.clone();
    }
    if let Some(n) = f.n {
        cfg.drift.n = n;
    }
    if let Some(m) = f.m {
        cfg.drift.m = m;
    }
    if let Some(g) = &f.t_grid {
        cfg.drift.t_grid = Some(g.clone());
    }
    if let Some(e) = &f.estimator {
        cfg.train.estimator = e.parse::<Estimator>()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { common, no_reg } => {
            let mut cfg = load_config(&common)?;
            if no_reg {
                cfg.train = cfg.train.vanilla();
            }
            let art = cmd_train(&cfg, &common.out, |m| {
                println!(
                    "step {:>7}  total {:.6e}  nll {:.6e}  reg {:.6e}  t {:>4}  s {:>4}  {:.2} ms",
                    m.step, m.loss_total, m.loss_nll, m.loss_reg, m.t, m.s, m.wall_ms
                )
            })?;
            println!("wrote {}", art.checkpoint_path.display());
        }
        Command::Drift {
            common,
            flags,
            checkpoint,
        } => {
            let mut cfg = load_config(&common)?;
            apply_drift_flags(&mut cfg, &flags)?;
            let ck = checkpoint.unwrap_or_else(|| common.out.join("model.dlab"));
            let series = cmd_drift(&ck, &cfg, &common.out).with_context(|| format!("drift on {}", ck.display()))?;
            let steps = series.records.iter().map(|r| r.t).max().unwrap_or(1);
            for &f in &cfg.drift.kernels {
                match series.ratio(f, steps) {
                    Some(r) => println!("{f}: drift ratio {r:.4}"),
                    None => println!("{f}: grid lacks t = 1 or t = T, no ratio"),
                }
            }
        }
        Command::SweepL { common, flags, spans } => {
            let mut cfg = load_config(&common)?;
            apply_drift_flags(&mut cfg, &flags)?;
            let spans = spans.unwrap_or_else(|| cfg.sweep_l.clone());
            for r in cmd_sweep_l(&cfg, &spans, &common.out)? {
                println!(
                    "L {:>3}  ratio {:.4}  {:.3} ms/step  {:.1} net evals/step (bound {})",
                    r.span, r.drift_ratio, r.wall_ms_per_step, r.net_evals_per_step, r.net_eval_bound
                );
            }
        }
        Command::Oracle { scenario, common, n, m } => {
            let cfg = load_config(&common)?;
            let scenario: Scenario = scenario.parse()?;
            let mut st = OracleSettings {
                seed: cfg.train.seed,
                thresholds: cfg.thresholds,
                ..OracleSettings::default()
            };
            st.n = n.unwrap_or(st.n);
            st.m = m.unwrap_or(st.m);
            let outcome = cmd_oracle(scenario, &common.out, &st)?;
            println!("{}: {}", scenario.name(), outcome.summary);
            match outcome.passed {
                Some(true) => println!("PASS"),
                Some(false) => {
                    println!("FAIL");
                    return Ok(ExitCode::FAILURE);
                }
                None => println!("no claim"),
            }
        }
        Command::IngestCheck {
            common,
            csv,
            k,
            standardize,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = csv {
                cfg.train.dim = k;
                cfg.dataset = DatasetSpec {
                    source: DatasetSource::Csv(p),
                    dim: k,
                    standardize,
                };
            }
            print!("{}", ingest_check(&cfg)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
