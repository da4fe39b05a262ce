//! `key = value` run configuration.
//!
//! Blank lines and `#` comments (whole-line or trailing) are ignored.
//! Unknown and repeated keys are errors reported with their line number.
//! Relative `data_path` values resolve against the config file's directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::datasets::{Builtin, DatasetSource, DatasetSpec};
use crate::harness::drift::Reference;
use crate::mmd::{Bandwidth, KernelFamily, KernelSpec};
use crate::oracle::FlagThresholds;
use crate::schedule::SigmaMode;
use crate::trainer::TrainConfig;

/// Drift-measurement settings; `t_grid = None` means the default grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSettings {
    pub n: usize,
    pub m: usize,
    pub t_grid: Option<Vec<usize>>,
    pub kernels: Vec<KernelFamily>,
    pub reference: Reference,
    pub noiseless_final: bool,
}

impl Default for DriftSettings {
    fn default() -> Self {
        DriftSettings {
            n: 1000,
            m: 1000,
            t_grid: None,
            kernels: KernelFamily::ALL.to_vec(),
            reference: Reference::Forward,
            noiseless_final: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub drift: DriftSettings,
    pub sweep_l: Vec<usize>,
    pub thresholds: FlagThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            drift: DriftSettings::default(),
            sweep_l: vec![1, 3, 5, 7],
            thresholds: FlagThresholds::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "T",
    "beta_start",
    "beta_end",
    "sigma_mode",
    "K",
    "batch_size",
    "L",
    "lambda_nll",
    "lambda_reg",
    "rho",
    "lr",
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "steps",
    "seed",
    "kernel",
    "bandwidth",
    "estimator",
    "regularization",
    "record_every",
    "time_dim",
    "hidden",
    "record_wall_time",
    "dataset",
    "data_path",
    "mixture_modes",
    "mixture_radius",
    "mixture_std",
    "data_noise",
    "normalize",
    "drift_N",
    "drift_M",
    "drift_t_grid",
    "drift_kernels",
    "drift_reference",
    "noiseless_final",
    "sweep_L",
    "entropy_tol",
    "eps_rel",
];

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as a number"))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("cannot parse list item `{s}`")))
        .collect()
}

fn err_string(e: Error) -> String {
    match e {
        Error::Invalid(m) => m,
        other => other.to_string(),
    }
}

/// Builtin dataset parameters collected independently of key order.
#[derive(Debug, Clone)]
struct DataParams {
    kind: String,
    path: Option<PathBuf>,
    modes: usize,
    radius: f64,
    std: f64,
    noise: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses `text`; `path` is used for error messages and to resolve
    /// relative data paths.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut kernel = KernelFamily::Rbf;
        let mut bandwidth = Bandwidth::Median;
        let mut data = DataParams {
            kind: "gaussian-mixture".into(),
            path: None,
            modes: 8,
            radius: 2.0,
            std: 0.1,
            noise: 0.05,
        };
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg_err = |line: usize, msg: String| Error::Config {
            path: path.to_path_buf(),
            line,
            msg,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| cfg_err(line, format!("expected `key = value`, got `{content}`")))?;
            if !KEYS.contains(&key) {
                return Err(cfg_err(line, format!("unknown key `{key}`")));
            }
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(cfg_err(line, format!("key `{key}` already set on line {first}")));
            }
            if value.is_empty() {
                return Err(cfg_err(line, format!("key `{key}` has no value")));
            }
            let t = &mut cfg.train;
            let applied: std::result::Result<(), String> = (|| {
                match key {
                    "T" => t.steps_t = parse_num(value)?,
                    "beta_start" => t.beta_start = parse_num(value)?,
                    "beta_end" => t.beta_end = parse_num(value)?,
                    "sigma_mode" => {
                        t.sigma_mode = match value {
                            "beta" => SigmaMode::Beta,
                            "posterior" => SigmaMode::Posterior,
                            _ => return Err(format!("sigma_mode must be beta or posterior, got `{value}`")),
                        }
                    }
                    "K" => t.dim = parse_num(value)?,
                    "batch_size" => t.batch_size = parse_num(value)?,
                    "L" => t.span = parse_num(value)?,
                    "lambda_nll" => t.lambda_nll = parse_num(value)?,
                    "lambda_reg" => t.lambda_reg = parse_num(value)?,
                    "rho" => t.rho = parse_num(value)?,
                    "lr" => t.lr = parse_num(value)?,
                    "optimizer" => t.optimizer = value.parse().map_err(err_string)?,
                    "adam_beta1" => t.adam_beta1 = parse_num(value)?,
                    "adam_beta2" => t.adam_beta2 = parse_num(value)?,
                    "adam_eps" => t.adam_eps = parse_num(value)?,
                    "steps" => t.total_steps = parse_num(value)?,
                    "seed" => t.seed = parse_num(value)?,
                    "kernel" => kernel = value.parse().map_err(err_string)?,
                    "bandwidth" => {
                        bandwidth = if value == "median" {
                            Bandwidth::Median
                        } else {
                            Bandwidth::Fixed(parse_num(value)?)
                        }
                    }
                    "estimator" => t.estimator = value.parse().map_err(err_string)?,
                    "regularization" => t.regularization = parse_bool(value)?,
                    "record_every" => t.record_every = parse_num(value)?,
                    "time_dim" => t.time_dim = parse_num(value)?,
                    "hidden" => t.hidden = parse_list(value)?,
                    "record_wall_time" => t.record_wall_time = parse_bool(value)?,
                    "dataset" => {
                        if !["gaussian-mixture", "swiss-roll", "two-moons", "csv"].contains(&value) {
                            return Err(format!(
                                "dataset must be gaussian-mixture, swiss-roll, two-moons or csv, got `{value}`"
                            ));
                        }
                        data.kind = value.to_string();
                    }
                    "data_path" => data.path = Some(base.join(value)),
                    "mixture_modes" => data.modes = parse_num(value)?,
                    "mixture_radius" => data.radius = parse_num(value)?,
                    "mixture_std" => data.std = parse_num(value)?,
                    "data_noise" => data.noise = parse_num(value)?,
                    "normalize" => {
                        cfg.dataset.standardize = match value {
                            "none" => false,
                            "standardize" => true,
                            _ => return Err(format!("normalize must be none or standardize, got `{value}`")),
                        }
                    }
                    "drift_N" => cfg.drift.n = parse_num(value)?,
                    "drift_M" => cfg.drift.m = parse_num(value)?,
                    "drift_t_grid" => cfg.drift.t_grid = Some(parse_list(value)?),
                    "drift_kernels" => cfg.drift.kernels = parse_list(value)?,
                    "drift_reference" => cfg.drift.reference = value.parse().map_err(err_string)?,
                    "noiseless_final" => cfg.drift.noiseless_final = parse_bool(value)?,
                    "sweep_L" => cfg.sweep_l = parse_list(value)?,
                    "entropy_tol" => cfg.thresholds.entropy_tol = parse_num(value)?,
                    "eps_rel" => cfg.thresholds.eps_rel = parse_num(value)?,
                    _ => unreachable!("key list and match arms out of sync: {key}"),
                }
                Ok(())
            })();
            applied.map_err(|m| cfg_err(line, m))?;
        }

        let line_of = |k: &str| seen.get(k).copied().unwrap_or(0);
        cfg.train.kernel =
            KernelSpec::new(kernel, bandwidth).map_err(|e| cfg_err(line_of("bandwidth"), err_string(e)))?;
        // Coefficients: one given determines the other; with the
        // regularizer off and neither given, the objective is L_nll alone.
        match (seen.contains_key("lambda_nll"), seen.contains_key("lambda_reg")) {
            (true, false) => cfg.train.lambda_reg = 1.0 - cfg.train.lambda_nll,
            (false, true) => cfg.train.lambda_nll = 1.0 - cfg.train.lambda_reg,
            (false, false) if !cfg.train.regularization => cfg.train = cfg.train.clone().vanilla(),
            _ => {}
        }
        cfg.dataset.dim = cfg.train.dim;
        cfg.dataset.source = match data.kind.as_str() {
            "csv" => DatasetSource::Csv(
                data.path
                    .ok_or_else(|| cfg_err(line_of("dataset"), "dataset = csv needs data_path".into()))?,
            ),
            other => {
                if let Some(l) = seen.get("data_path") {
                    return Err(cfg_err(*l, format!("data_path given but dataset is {other}")));
                }
                DatasetSource::Builtin(match other {
                    "gaussian-mixture" => Builtin::GaussianMixture {
                        modes: data.modes,
                        radius: data.radius,
                        std: data.std,
                    },
                    "swiss-roll" => Builtin::SwissRoll { noise: data.noise },
                    _ => Builtin::TwoMoons { noise: data.noise },
                })
            }
        };
        if cfg.sweep_l.is_empty() || cfg.sweep_l.contains(&0) {
            return Err(cfg_err(
                line_of("sweep_L"),
                "sweep_L must be a non-empty list of values >= 1".into(),
            ));
        }
        if cfg.drift.kernels.is_empty() {
            return Err(cfg_err(
                line_of("drift_kernels"),
                "drift_kernels must not be empty".into(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every cross-field invariant; messages name the offending keys.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(g) = &self.drift.t_grid {
            if g.is_empty() {
                return Err(Error::Invalid("drift_t_grid must not be empty".into()));
            }
            if let Some(&bad) = g.iter().find(|&&t| t < 1 || t > self.train.steps_t) {
                return Err(Error::TimeRange {
                    t: bad,
                    lo: 1,
                    hi: self.train.steps_t,
                });
            }
        }
        if self.drift.n < 2 || self.drift.m < 2 {
            return Err(Error::Invalid("drift_N and drift_M must be at least 2".into()));
        }
        if let DatasetSource::Builtin(b) = &self.dataset.source {
            b.validate()?;
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        kv("T", t.steps_t.to_string());
        kv("beta_start", format!("{:?}", t.beta_start));
        kv("beta_end", format!("{:?}", t.beta_end));
        kv("sigma_mode", t.sigma_mode.name().into());
        kv("K", t.dim.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("L", t.span.to_string());
        kv("lambda_nll", format!("{:?}", t.lambda_nll));
        kv("lambda_reg", format!("{:?}", t.lambda_reg));
        kv("rho", format!("{:?}", t.rho));
        kv("lr", format!("{:?}", t.lr));
        kv("optimizer", t.optimizer.name().into());
        kv("adam_beta1", format!("{:?}", t.adam_beta1));
        kv("adam_beta2", format!("{:?}", t.adam_beta2));
        kv("adam_eps", format!("{:?}", t.adam_eps));
        kv("steps", t.total_steps.to_string());
        kv("seed", t.seed.to_string());
        kv("kernel", t.kernel.family().name().into());
        kv(
            "bandwidth",
            match t.kernel.bandwidth() {
                Bandwidth::Median => "median".into(),
                Bandwidth::Fixed(g) => format!("{g:?}"),
            },
        );
        kv("estimator", t.estimator.name().into());
        kv("regularization", t.regularization.to_string());
        kv("record_every", t.record_every.to_string());
        kv("time_dim", t.time_dim.to_string());
        kv("hidden", join(&t.hidden));
        kv("record_wall_time", t.record_wall_time.to_string());
        match &self.dataset.source {
            DatasetSource::Csv(p) => {
                kv("dataset", "csv".into());
                kv("data_path", p.display().to_string());
            }
            DatasetSource::Builtin(b) => {
                kv("dataset", b.name().into());
                match *b {
                    Builtin::GaussianMixture { modes, radius, std } => {
                        kv("mixture_modes", modes.to_string());
                        kv("mixture_radius", format!("{radius:?}"));
                        kv("mixture_std", format!("{std:?}"));
                    }
                    Builtin::SwissRoll { noise } | Builtin::TwoMoons { noise } => {
                        kv("data_noise", format!("{noise:?}"))
                    }
                }
            }
        }
        kv(
            "normalize",
            if self.dataset.standardize {
                "standardize"
            } else {
                "none"
            }
            .into(),
        );
        kv("drift_N", self.drift.n.to_string());
        kv("drift_M", self.drift.m.to_string());
        if let Some(g) = &self.drift.t_grid {
            kv("drift_t_grid", join(g));
        }
        kv(
            "drift_kernels",
            self.drift
                .kernels
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("drift_reference", self.drift.reference.name().into());
        kv("noiseless_final", self.drift.noiseless_final.to_string());
        kv("sweep_L", join(&self.sweep_l));
        kv("entropy_tol", format!("{:?}", self.thresholds.entropy_tol));
        kv("eps_rel", format!("{:?}", self.thresholds.eps_rel));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmd::Estimator;
    use crate::trainer::OptimizerKind;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/cfg/run.cfg"))
    }

    fn line_of(e: Error) -> (usize, String) {
        match e {
            Error::Config { line, msg, .. } => (line, msg),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_config_gives_defaults() {
        let c = parse("# nothing\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
        let t = &c.train;
        assert_eq!((t.lambda_nll, t.lambda_reg, t.span, t.rho), (0.8, 0.2, 5, 0.003));
        assert_eq!((c.drift.n, c.drift.m), (1000, 1000));
        assert!(c.sweep_l.contains(&5));
    }

    #[test]
    fn parses_values_and_comments() {
        let c = parse(
            "T = 50   # short chain\nK=2\nhidden = 32, 32\nkernel = laplace\nbandwidth = 0.5\nestimator = u\n\
             dataset = two-moons\ndata_noise = 0.1\ndrift_t_grid = 1,25,50\ndrift_kernels = rbf,rq\n\
             optimizer = sgd\nsweep_L = 1,5\nlambda_reg = 0.3\nsigma_mode = posterior\n",
        )
        .unwrap();
        assert_eq!(c.train.steps_t, 50);
        assert_eq!(c.train.hidden, vec![32, 32]);
        assert_eq!(
            c.train.kernel,
            KernelSpec::new(KernelFamily::Laplace, Bandwidth::Fixed(0.5)).unwrap()
        );
        assert_eq!(c.train.estimator, Estimator::U);
        assert_eq!(c.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(c.train.sigma_mode, SigmaMode::Posterior);
        assert_eq!((c.train.lambda_nll, c.train.lambda_reg), (0.7, 0.3));
        assert_eq!(
            c.dataset.source,
            DatasetSource::Builtin(Builtin::TwoMoons { noise: 0.1 })
        );
        assert_eq!(c.drift.t_grid, Some(vec![1, 25, 50]));
        assert_eq!(
            c.drift.kernels,
            vec![KernelFamily::Rbf, KernelFamily::RationalQuadratic]
        );
        assert_eq!(c.sweep_l, vec![1, 5]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of(parse("T = 10\nfoo = 1\n").unwrap_err()).0, 2);
        let (l, m) = line_of(parse("seed = 1\n\nseed = 2\n").unwrap_err());
        assert_eq!(l, 3);
        assert!(m.contains("line 1"), "{m}");
        assert_eq!(line_of(parse("# c\nL = five\n").unwrap_err()).0, 2);
        assert_eq!(line_of(parse("just words\n").unwrap_err()).0, 1);
        assert_eq!(line_of(parse("kernel =\n").unwrap_err()).0, 1);
        assert_eq!(line_of(parse("regularization = maybe\n").unwrap_err()).0, 1);
        assert_eq!(line_of(parse("dataset = mnist\n").unwrap_err()).0, 1);
        assert_eq!(line_of(parse("\n\nbandwidth = -1\n").unwrap_err()).0, 3);
        assert_eq!(line_of(parse("data_path = x.csv\n").unwrap_err()).0, 1);
        assert_eq!(line_of(parse("T = 10\ndataset = csv\n").unwrap_err()).0, 2);
    }

    #[test]
    fn invariant_violations_are_named() {
        let e = parse("lambda_nll = 0.5\nlambda_reg = 0.2\n").unwrap_err();
        assert!(e.to_string().contains("lambda_nll + lambda_reg"), "{e}");
        let e = parse("batch_size = 1\n").unwrap_err();
        assert!(e.to_string().contains("batch size"), "{e}");
        let e = parse("L = 0\n").unwrap_err();
        assert!(e.to_string().contains("span L"), "{e}");
        let e = parse("regularization = false\nlambda_reg = 0.2\n").unwrap_err();
        assert!(e.to_string().contains("regularization off"), "{e}");
        assert!(matches!(
            parse("T = 10\ndrift_t_grid = 1,11\n"),
            Err(Error::TimeRange { t: 11, .. })
        ));
    }

    #[test]
    fn regularization_off_defaults_to_pure_nll() {
        let c = parse("regularization = off\n").unwrap();
        assert_eq!((c.train.lambda_nll, c.train.lambda_reg), (1.0, 0.0));
    }

    #[test]
    fn csv_path_resolves_against_config_dir() {
        let c = parse("dataset = csv\ndata_path = data/x.csv\nK = 3\nnormalize = standardize\n").unwrap();
        assert_eq!(c.dataset.source, DatasetSource::Csv(PathBuf::from("/cfg/data/x.csv")));
        assert_eq!(c.dataset.dim, 3);
        assert!(c.dataset.standardize);
    }

    #[test]
    fn every_key_is_handled() {
        // Canonical text mentions each key except the ones tied to other
        // dataset kinds or optional grids.
        let text = RunConfig::default().to_text();
        for k in KEYS {
            if ["data_path", "data_noise", "drift_t_grid"].contains(k) {
                continue;
            }
            assert!(text.lines().any(|l| l.starts_with(&format!("{k} = "))), "{k}");
        }
    }

    proptest! {
        #[test]
        fn text_round_trip(
            steps_t in 2usize..500,
            seed in any::<u64>(),
            lam in 0.01f64..0.99,
            lr in 1e-6f64..1e-1,
            hidden in proptest::collection::vec(1usize..64, 1..4),
            fam in 0usize..3,
            reg in any::<bool>(),
            ds in 0usize..3,
            std in 0.01f64..1.0,
        ) {
            let mut c = RunConfig::default();
            c.train.steps_t = steps_t;
            c.train.seed = seed;
            c.train.lr = lr;
            c.train.hidden = hidden;
            c.train.kernel = KernelSpec::median(KernelFamily::ALL[fam]);
            if reg {
                c.train.lambda_reg = lam;
                c.train.lambda_nll = 1.0 - lam;
            } else {
                c.train = c.train.vanilla();
            }
            c.train.lambda_nll = 1.0 - c.train.lambda_reg;
            c.dataset.source = DatasetSource::Builtin(match ds {
                0 => Builtin::GaussianMixture { modes: 5, radius: 1.5, std },
                1 => Builtin::SwissRoll { noise: std },
                _ => Builtin::TwoMoons { noise: std },
            });
            c.drift.t_grid = Some(vec![1, steps_t]);
            let back = parse(&c.to_text()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
