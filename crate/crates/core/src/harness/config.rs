//! Experiment configuration: `key = value` lines with `#` comments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticBenchmark;
use crate::optimizer::{Schedule, SgldConfig};
use crate::risks::ObjectiveWeights;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse `{key}` = `{value}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("`mode` is required (supervised, unsupervised or semi)")]
    MissingMode,
    #[error("mode {mode} forces tau = {forced}, but tau = {given} was set")]
    ModeConflict { mode: Mode, forced: f64, given: f64 },
    #[error("`{0}` and `{1}` name the same constant but were given different values")]
    AliasConflict(&'static str, &'static str),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `τ = 1`: labeled target, no unlabeled target.
    Supervised,
    /// `τ = 0`: unlabeled target only.
    Unsupervised,
    /// Free `ε`, `τ`.
    Semi,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
            Mode::Semi => "semi",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "unsupervised" => Ok(Mode::Unsupervised),
            "semi" | "semi-supervised" => Ok(Mode::Semi),
            _ => Err("expected supervised, unsupervised or semi".into()),
        }
    }
}

/// How the end-of-epoch α problem gets its per-source risks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaRisks {
    /// A full evaluation pass over every source.
    FullPass,
    /// The last batch of the epoch.
    LastBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synthetic(SyntheticBenchmark),
    Csv {
        sources: Vec<PathBuf>,
        target_labeled: Option<PathBuf>,
        target_unlabeled: PathBuf,
        target_test: PathBuf,
        n_classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub epsilon: f64,
    pub tau: f64,
    /// Weight of `R_S^α(u, v)` in the α problem for unsupervised runs; also
    /// the coefficient of the second pseudo-label loss.
    pub c0: f64,
    pub c1: f64,
    /// Moving-average weight `C` kept on the previous α.
    pub moving_average: f64,
    pub sgld: SgldConfig,
    pub w1_sup_coef: f64,
    pub w1_discri_coef1: f64,
    pub interp_penalty_weight: f64,
    pub grad_norm_penalty_weight: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub data: DataSpec,
    pub output_dir: Option<PathBuf>,
    /// `false` freezes α at uniform.
    pub learn_alpha: bool,
    /// `false` trains on the uniform source risk only: every alignment term off.
    pub alignment: bool,
    pub alpha_risks: AlphaRisks,
    pub lambda_r_override: Option<f64>,
    pub rep_hidden: Vec<usize>,
    pub pred_hidden: Vec<usize>,
    pub dropout: f64,
    /// Sub-Gaussian constant of the loss used by the bound report (user-supplied).
    pub loss_subgaussian: f64,
    pub r_star: f64,
    pub r_star_rep: f64,
}

impl ExperimentConfig {
    /// Defaults for a mode; supervised and unsupervised values follow the
    /// desk-scale analogue of the published settings.
    pub fn defaults(mode: Mode) -> Self {
        let (eta, c1, epochs, tau, coef2) = match mode {
            Mode::Supervised => (0.5, 0.5, 40, 1.0, 1.2),
            Mode::Unsupervised => (0.8, 1.0, 50, 0.0, 1.2),
            Mode::Semi => (0.5, 0.5, 40, 0.5, 1.2),
        };
        let lr = Schedule::Constant(eta);
        Self {
            mode,
            epsilon: 0.5,
            tau,
            c0: coef2,
            c1,
            moving_average: 0.5,
            sgld: SgldConfig {
                eta_u: lr.clone(),
                eta_v: lr.clone(),
                eta_dup: lr,
                sigma: Schedule::Constant(1e-3),
                noiseless: false,
            },
            w1_sup_coef: 0.01,
            w1_discri_coef1: 0.06,
            interp_penalty_weight: 0.1,
            grad_norm_penalty_weight: 0.0,
            batch_size: 20,
            epochs,
            warmup_epochs: 5,
            seed: 0,
            data: DataSpec::Synthetic(SyntheticBenchmark::default()),
            output_dir: None,
            learn_alpha: true,
            alignment: true,
            alpha_risks: AlphaRisks::FullPass,
            lambda_r_override: None,
            rep_hidden: vec![32, 16],
            pred_hidden: vec![],
            dropout: 0.0,
            loss_subgaussian: 0.5,
            r_star: 0.0,
            r_star_rep: 0.0,
        }
    }

    /// Objective weights actually used for the parameter updates.
    pub fn objective_weights(&self) -> ObjectiveWeights {
        if !self.alignment {
            return ObjectiveWeights { epsilon: 1.0, tau: 1.0, w1_sup_coef: 0.0, coef1: 0.0, coef2: 0.0 };
        }
        ObjectiveWeights {
            epsilon: self.epsilon,
            tau: self.tau,
            w1_sup_coef: self.w1_sup_coef,
            coef1: self.w1_discri_coef1,
            coef2: self.c0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        match self.mode {
            Mode::Supervised if self.tau != 1.0 => {
                return Err(ConfigError::ModeConflict { mode: self.mode, forced: 1.0, given: self.tau })
            }
            Mode::Unsupervised if self.tau != 0.0 => {
                return Err(ConfigError::ModeConflict { mode: self.mode, forced: 0.0, given: self.tau })
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.tau) {
            return bad("epsilon and tau must lie in [0, 1]".into());
        }
        if !(self.moving_average > 0.0 && self.moving_average < 1.0) {
            return bad("moving_average must lie in (0, 1)".into());
        }
        for (k, v) in [
            ("c0", self.c0),
            ("c1", self.c1),
            ("w1_sup_coef", self.w1_sup_coef),
            ("w1_discri_coef1", self.w1_discri_coef1),
            ("interp_penalty_weight", self.interp_penalty_weight),
            ("grad_norm_penalty_weight", self.grad_norm_penalty_weight),
            ("loss_subgaussian", self.loss_subgaussian),
            ("r_star", self.r_star),
            ("r_star_rep", self.r_star_rep),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{k} must be a non-negative number"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(l) = self.lambda_r_override {
            if !(l >= 0.0) {
                return bad("lambda_r_override must be non-negative".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        self.sgld.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Reads a file and applies `overrides` (`key=value`) on top.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: o.clone() })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        for k in entries.keys() {
            if !KEYS.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        let mode: Mode = parse_value("mode", entries.get("mode").ok_or(ConfigError::MissingMode)?)?;
        let mut cfg = Self::defaults(mode);
        if let (Some(a), Some(b)) = (entries.get("c0"), entries.get("w1_discri_coef2")) {
            if parse_value::<f64>("c0", a)? != parse_value::<f64>("w1_discri_coef2", b)? {
                return Err(ConfigError::AliasConflict("c0", "w1_discri_coef2"));
            }
        }
        let mut synth = SyntheticBenchmark::default();
        let mut csv = CsvPaths::default();
        for (k, v) in &entries {
            cfg.apply(k, v, &mut synth, &mut csv)?;
        }
        cfg.data = match entries.get("data").map(String::as_str) {
            None | Some("synthetic") => DataSpec::Synthetic(synth),
            Some("csv") => csv.finish()?,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "data".into(),
                    value: other.into(),
                    reason: "expected synthetic or csv".into(),
                })
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, k: &str, v: &str, synth: &mut SyntheticBenchmark, csv: &mut CsvPaths) -> Result<(), ConfigError> {
        let f = |key: &str| parse_value::<f64>(key, v);
        match k {
            "mode" | "data" => {}
            "epsilon" => self.epsilon = f(k)?,
            "tau" => self.tau = f(k)?,
            "c0" | "w1_discri_coef2" => self.c0 = f(k)?,
            "c1" => self.c1 = f(k)?,
            "moving_average" => self.moving_average = f(k)?,
            "eta" => {
                let s: Schedule = parse_value(k, v)?;
                self.sgld.eta_u = s.clone();
                self.sgld.eta_v = s.clone();
                self.sgld.eta_dup = s;
            }
            "eta_u" => self.sgld.eta_u = parse_value(k, v)?,
            "eta_v" => self.sgld.eta_v = parse_value(k, v)?,
            "eta_dup" => self.sgld.eta_dup = parse_value(k, v)?,
            "sigma" => self.sgld.sigma = parse_value(k, v)?,
            "noiseless" => self.sgld.noiseless = parse_value(k, v)?,
            "w1_sup_coef" => self.w1_sup_coef = f(k)?,
            "w1_discri_coef1" => self.w1_discri_coef1 = f(k)?,
            "interp_penalty_weight" => self.interp_penalty_weight = f(k)?,
            "grad_norm_penalty_weight" => self.grad_norm_penalty_weight = f(k)?,
            "batch_size" => self.batch_size = parse_value(k, v)?,
            "epochs" => self.epochs = parse_value(k, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(k, v)?,
            "seed" => self.seed = parse_value(k, v)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(v)),
            "alpha" => {
                self.learn_alpha = match v {
                    "learned" => true,
                    "uniform" => false,
                    _ => return Err(bad_value(k, v, "expected learned or uniform")),
                }
            }
            "alignment" => self.alignment = parse_switch(k, v)?,
            "alpha_risks" => {
                self.alpha_risks = match v {
                    "full" => AlphaRisks::FullPass,
                    "batch" => AlphaRisks::LastBatch,
                    _ => return Err(bad_value(k, v, "expected full or batch")),
                }
            }
            "lambda_r_override" => self.lambda_r_override = Some(f(k)?),
            "rep_hidden" => self.rep_hidden = parse_list(k, v)?,
            "pred_hidden" => self.pred_hidden = parse_list(k, v)?,
            "dropout" => self.dropout = f(k)?,
            "loss_subgaussian" => self.loss_subgaussian = f(k)?,
            "r_star" => self.r_star = f(k)?,
            "r_star_rep" => self.r_star_rep = f(k)?,
            "synth.source_angles" => synth.source_angles = parse_list(k, v)?,
            "synth.separation" => synth.separation = f(k)?,
            "synth.std" => synth.std = f(k)?,
            "synth.per_domain" => synth.per_domain = parse_value(k, v)?,
            "synth.target_labeled" => synth.target_labeled = parse_value(k, v)?,
            "synth.target_test" => synth.target_test = parse_value(k, v)?,
            "synth.drop_rate" => synth.drop_rate = f(k)?,
            "synth.drop_class" => synth.drop_class = parse_value(k, v)?,
            "csv.sources" => csv.sources = v.split(',').map(|p| PathBuf::from(p.trim())).collect(),
            "csv.target_labeled" => csv.target_labeled = Some(PathBuf::from(v)),
            "csv.target_unlabeled" => csv.target_unlabeled = Some(PathBuf::from(v)),
            "csv.target_test" => csv.target_test = Some(PathBuf::from(v)),
            "csv.n_classes" => csv.n_classes = Some(parse_value(k, v)?),
            _ => return Err(ConfigError::UnknownKey(k.to_string())),
        }
        Ok(())
    }
}

const KEYS: &[&str] = &[
    "mode",
    "data",
    "epsilon",
    "tau",
    "c0",
    "w1_discri_coef2",
    "c1",
    "moving_average",
    "eta",
    "eta_u",
    "eta_v",
    "eta_dup",
    "sigma",
    "noiseless",
    "w1_sup_coef",
    "w1_discri_coef1",
    "interp_penalty_weight",
    "grad_norm_penalty_weight",
    "batch_size",
    "epochs",
    "warmup_epochs",
    "seed",
    "output_dir",
    "alpha",
    "alignment",
    "alpha_risks",
    "lambda_r_override",
    "rep_hidden",
    "pred_hidden",
    "dropout",
    "loss_subgaussian",
    "r_star",
    "r_star_rep",
    "synth.source_angles",
    "synth.separation",
    "synth.std",
    "synth.per_domain",
    "synth.target_labeled",
    "synth.target_test",
    "synth.drop_rate",
    "synth.drop_class",
    "csv.sources",
    "csv.target_labeled",
    "csv.target_unlabeled",
    "csv.target_test",
    "csv.n_classes",
];

#[derive(Default)]
struct CsvPaths {
    sources: Vec<PathBuf>,
    target_labeled: Option<PathBuf>,
    target_unlabeled: Option<PathBuf>,
    target_test: Option<PathBuf>,
    n_classes: Option<usize>,
}

impl CsvPaths {
    fn finish(self) -> Result<DataSpec, ConfigError> {
        let need = |o: Option<PathBuf>, k: &str| o.ok_or_else(|| ConfigError::Invalid(format!("data = csv needs `{k}`")));
        if self.sources.is_empty() {
            return Err(ConfigError::Invalid("data = csv needs `csv.sources`".into()));
        }
        Ok(DataSpec::Csv {
            sources: self.sources,
            target_labeled: self.target_labeled,
            target_unlabeled: need(self.target_unlabeled, "csv.target_unlabeled")?,
            target_test: need(self.target_test, "csv.target_test")?,
            n_classes: self.n_classes.ok_or_else(|| ConfigError::Invalid("data = csv needs `csv.n_classes`".into()))?,
        })
    }
}

fn bad_value(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| bad_value(key, value, e.to_string()))
}

fn parse_switch(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(bad_value(key, value, "expected on or off")),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|t| parse_value(key, t.trim())).collect()
}
