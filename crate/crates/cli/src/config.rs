use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use layerstat::attack::AttackConfig;
use layerstat::detector::{DetectorConfig, Task};
use layerstat::synthetic::DemoConfig;
use layerstat::teststats::parse_kinds;
use layerstat::ErrorKind;
use serde::{Deserialize, Serialize};

use crate::args::{AttackArgs, CommonArgs, DemoArgs, EvaluateArgs};

pub const DEFAULT_OUT: &str = "layerstat-out";

/// A command failure with its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(layerstat::Error),
    Io { path: PathBuf, source: std::io::Error },
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Failure::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
            Failure::Io { .. } => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl From<layerstat::Error> for Failure {
    fn from(e: layerstat::Error) -> Self {
        Failure::Core(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub natural: Option<PathBuf>,
    pub anomalous: Option<PathBuf>,
    pub pauc_alphas: Vec<f64>,
    pub proportion: f64,
    pub repeats: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            natural: None,
            anomalous: None,
            pauc_alphas: vec![0.01, 0.05, 0.1, 0.2],
            proportion: 0.1,
            repeats: layerstat::metrics::DEFAULT_REPEATS,
        }
    }
}

/// Everything a command reads, merged from the config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    /// Toy network directory for attacks.
    pub network: Option<PathBuf>,
    pub out: PathBuf,
    pub task: Task,
    pub workers: Option<usize>,
    pub detector: DetectorConfig,
    pub evaluate: EvaluateConfig,
    /// Number of dataset inputs to attack.
    pub attack_limit: usize,
    pub attack: AttackConfig,
    pub demo: DemoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            model_dir: None,
            network: None,
            out: PathBuf::from(DEFAULT_OUT),
            task: Task::Adversarial,
            workers: None,
            detector: DetectorConfig::default(),
            evaluate: EvaluateConfig::default(),
            attack_limit: 200,
            attack: AttackConfig::default(),
            demo: DemoConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML file, or JSON when the extension is `.json`.
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
    }

    /// Config file (if any) overridden by flags.
    pub fn resolve(common: &CommonArgs) -> Result<Self, Failure> {
        let mut cfg = match &common.config {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        if let Some(p) = &common.dataset {
            cfg.dataset = Some(p.clone());
        }
        if let Some(p) = &common.model_dir {
            cfg.model_dir = Some(p.clone());
        }
        if let Some(p) = &common.out {
            cfg.out = p.clone();
        }
        if let Some(t) = common.task {
            cfg.task = t;
        }
        if common.workers.is_some() {
            cfg.workers = common.workers;
        }
        let kinds = common.stats.as_deref().map(parse_kinds).transpose()?;
        for det in [&mut cfg.detector, &mut cfg.demo.detector] {
            if let Some(k) = &kinds {
                det.kinds = k.clone();
            }
            if let Some(c) = common.combiner {
                det.combiner = c;
            }
            if let Some(a) = common.alpha {
                det.alpha = a;
            }
            if common.pairs.is_some() {
                det.pairs = common.pairs;
            }
            if common.k.is_some() {
                det.k = common.k;
            }
            if let Some(s) = common.seed {
                det.seed = s;
            }
        }
        if let Some(s) = common.seed {
            cfg.demo.seed = s;
        }
        Ok(cfg)
    }

    pub fn apply_evaluate(&mut self, args: &EvaluateArgs) {
        let e = &mut self.evaluate;
        if args.natural.is_some() {
            e.natural = args.natural.clone();
        }
        if args.anomalous.is_some() {
            e.anomalous = args.anomalous.clone();
        }
        if !args.pauc_alphas.is_empty() {
            e.pauc_alphas = args.pauc_alphas.clone();
        }
        if let Some(p) = args.proportion {
            e.proportion = p;
        }
        if let Some(r) = args.repeats {
            e.repeats = r;
        }
    }

    pub fn apply_attack(&mut self, args: &AttackArgs) {
        if args.network.is_some() {
            self.network = args.network.clone();
        }
        if let Some(l) = args.limit {
            self.attack_limit = l;
        }
        let a = &mut self.attack;
        if args.timeout.is_some() {
            a.timeout_secs = args.timeout;
        }
        if let Some(m) = args.max_iters {
            a.max_iters = m;
        }
        if let Some(v) = args.variant {
            a.variant = v;
        }
    }

    pub fn apply_demo(&mut self, args: &DemoArgs) {
        if let Some(n) = args.attacks {
            self.demo.num_attacks = n;
        }
    }

    /// Checks the fields shared by all commands.
    pub fn validate(&self) -> Result<(), Failure> {
        if self.workers == Some(0) {
            return Err(Failure::usage("--workers must be at least 1"));
        }
        self.detector.validate()?;
        let e = &self.evaluate;
        if e.pauc_alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Failure::usage("pAUC alphas must lie in (0, 1]"));
        }
        if !(e.proportion > 0.0 && e.proportion <= 1.0) {
            return Err(Failure::usage("proportion must lie in (0, 1]"));
        }
        if e.repeats == 0 {
            return Err(Failure::usage("repeats must be at least 1"));
        }
        self.attack.validate()?;
        if let Some(t) = self.attack.timeout_secs {
            if !(t > 0.0) {
                return Err(Failure::usage("attack timeout must be positive"));
            }
        }
        self.demo.validate()?;
        Ok(())
    }
}

/// Returns the path or a usage error naming the missing flag.
pub fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    path.as_deref()
        .ok_or_else(|| Failure::usage(format!("missing required {flag}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "out = \"from-file\"\n[detector]\nalpha = 0.2\nk = 7\n").unwrap();
        let common = CommonArgs {
            config: Some(path),
            alpha: Some(0.01),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&common).unwrap();
        assert_eq!(cfg.detector.alpha, 0.01);
        assert_eq!(cfg.detector.k, Some(7));
        assert_eq!(cfg.out, PathBuf::from("from-file"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "bogus = 1\n").unwrap();
        let common = CommonArgs {
            config: Some(path.clone()),
            ..Default::default()
        };
        let err = RunConfig::resolve(&common).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        fs::write(&path, "[detector]\nalpah = 0.1\n").unwrap();
        assert!(RunConfig::resolve(&common).is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.detector.alpha = 1.5;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
        let cfg = RunConfig {
            workers: Some(0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.evaluate.pauc_alphas = vec![0.0];
        assert!(cfg.validate().is_err());
    }
}
