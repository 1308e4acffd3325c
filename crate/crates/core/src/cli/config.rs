//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::contrastive::{EmptyFallback, LossConfig};
use crate::error::{Error, Result};
use crate::threshold::LambdaOptimizer;
use crate::train::{Method, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Unimodal,
    Bimodal,
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unimodal" => Ok(Self::Unimodal),
            "bimodal" => Ok(Self::Bimodal),
            other => Err(Error::BadConfig(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Unimodal => "unimodal",
            Self::Bimodal => "bimodal",
        })
    }
}

/// `alpha` may be a number or `auto` (the dataset's true false-negative rate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSetting {
    Fixed(f64),
    TrueRate,
}

impl std::fmt::Display for AlphaSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Fixed(a) => write!(f, "{a}"),
            Self::TrueRate => f.write_str("auto"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Modality,
    pub n_classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub d_text: usize,
    pub spread: f64,
    pub data_csv: Option<PathBuf>,
    pub alpha: AlphaSetting,
    pub train: TrainConfig,
    pub eval_sample_count: usize,
    pub oracle_epochs: usize,
    pub oracle_batch_size: usize,
    pub oracle_tolerance: f64,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Modality::Unimodal,
            n_classes: 10,
            per_class: 100,
            d_in: 16,
            d_text: 16,
            spread: 0.1,
            data_csv: None,
            alpha: AlphaSetting::TrueRate,
            train: TrainConfig::default(),
            eval_sample_count: 100_000,
            oracle_epochs: 300,
            oracle_batch_size: 64,
            oracle_tolerance: 0.02,
            checkpoint: None,
            output_dir: PathBuf::from("runs/default"),
            plots: false,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("mode", "unimodal | bimodal"),
    ("n_classes", "number of mixture classes"),
    ("per_class", "samples per class"),
    ("d_in", "input dimension (image modality in bimodal mode)"),
    ("d_text", "text input dimension (bimodal mode)"),
    ("spread", "per-coordinate noise around each class center"),
    ("data_csv", "load the dataset from this CSV instead of generating it"),
    ("d_hid", "encoder hidden width"),
    ("d_emb", "embedding dimension"),
    ("tau", "temperature"),
    ("gamma", "surrogate moving-average weight"),
    (
        "alpha",
        "target false-negative fraction, or `auto` for the dataset's true rate",
    ),
    (
        "fallback",
        "keep_all | skip_anchor, used when filtering removes every negative",
    ),
    ("lambda_mode", "sgd | adam"),
    ("lambda_lr", "threshold learning rate"),
    ("lambda_beta1", "threshold Adam beta1"),
    ("lambda_beta2", "threshold Adam beta2"),
    ("lr", "encoder learning rate"),
    ("w_beta1", "encoder Adam beta1"),
    ("w_beta2", "encoder Adam beta2"),
    (
        "cosine_decay",
        "true to decay the encoder learning rate on a cosine schedule",
    ),
    ("epochs", "training epochs"),
    ("batch_size", "mini-batch size (at least 2)"),
    ("warmup_epoch", "first epoch with filtering enabled"),
    ("method", "none | glofnd | fnc"),
    (
        "lambda_during_warmup",
        "true to update thresholds before filtering starts",
    ),
    ("noise_sigma", "augmentation noise standard deviation"),
    ("seed", "root seed for every random stream"),
    ("eval_sample_count", "negatives per anchor for the reference thresholds"),
    ("oracle_epochs", "streaming epochs in oracle-check"),
    ("oracle_batch_size", "batch size in oracle-check (0 = whole dataset)"),
    (
        "oracle_tolerance",
        "allowed distance from the exact interval in oracle-check",
    ),
    ("checkpoint", "encoder JSON used by oracle-check and eval"),
    ("output_dir", "where run artifacts are written"),
    ("plots", "true to also write SVG charts"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::BadConfig(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::BadConfig(format!(
            "`{key}`: expected true or false, got `{value}`"
        ))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "mode" => self.mode = v.parse()?,
            "n_classes" => self.n_classes = parse(key, v)?,
            "per_class" => self.per_class = parse(key, v)?,
            "d_in" => self.d_in = parse(key, v)?,
            "d_text" => self.d_text = parse(key, v)?,
            "spread" => self.spread = parse(key, v)?,
            "data_csv" => self.data_csv = (!v.is_empty()).then(|| PathBuf::from(v)),
            "d_hid" => t.d_hid = parse(key, v)?,
            "d_emb" => t.d_emb = parse(key, v)?,
            "tau" => t.loss.tau = parse(key, v)?,
            "gamma" => t.loss.gamma = parse(key, v)?,
            "alpha" => {
                self.alpha = if v == "auto" {
                    AlphaSetting::TrueRate
                } else {
                    AlphaSetting::Fixed(parse(key, v)?)
                }
            }
            "fallback" => t.loss.fallback = v.parse::<EmptyFallback>()?,
            "lambda_mode" => t.lambda_mode = v.parse::<LambdaOptimizer>()?,
            "lambda_lr" => t.lambda_lr = parse(key, v)?,
            "lambda_beta1" => t.lambda_beta1 = parse(key, v)?,
            "lambda_beta2" => t.lambda_beta2 = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "w_beta1" => t.w_beta1 = parse(key, v)?,
            "w_beta2" => t.w_beta2 = parse(key, v)?,
            "cosine_decay" => t.cosine_decay = parse_bool(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "warmup_epoch" => t.warmup_epoch = parse(key, v)?,
            "method" => t.method = v.parse::<Method>()?,
            "lambda_during_warmup" => t.lambda_during_warmup = parse_bool(key, v)?,
            "noise_sigma" => t.noise_sigma = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "eval_sample_count" => self.eval_sample_count = parse(key, v)?,
            "oracle_epochs" => self.oracle_epochs = parse(key, v)?,
            "oracle_batch_size" => self.oracle_batch_size = parse(key, v)?,
            "oracle_tolerance" => self.oracle_tolerance = parse(key, v)?,
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "plots" => self.plots = parse_bool(key, v)?,
            other => return Err(Error::BadConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::BadConfig(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.data_csv.is_none() && (self.n_classes == 0 || self.per_class == 0 || self.d_in == 0) {
            return Err(Error::BadConfig(
                "n_classes, per_class and d_in must be positive".into(),
            ));
        }
        if self.mode == Modality::Bimodal && self.d_text == 0 {
            return Err(Error::BadConfig("d_text must be positive".into()));
        }
        if self.mode == Modality::Bimodal && self.data_csv.is_some() {
            return Err(Error::BadConfig("data_csv is only supported in unimodal mode".into()));
        }
        if let AlphaSetting::Fixed(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::AlphaOutOfRange(a));
            }
        }
        if self.eval_sample_count == 0 {
            return Err(Error::BadConfig("eval_sample_count must be positive".into()));
        }
        if self.oracle_batch_size == 1 {
            return Err(Error::BadConfig("oracle_batch_size must be 0 or at least 2".into()));
        }
        let mut t = self.train;
        t.loss.alpha = 0.0;
        t.validate()
    }

    /// The training config with `alpha` resolved against a dataset's true rate.
    pub fn resolved_train(&self, true_rate: f64) -> TrainConfig {
        let mut t = self.train;
        t.loss.alpha = match self.alpha {
            AlphaSetting::Fixed(a) => a,
            AlphaSetting::TrueRate => true_rate,
        };
        t
    }

    /// Serializes back to the file format; `parse_str` of the result gives the same config.
    pub fn to_kv_string(&self) -> String {
        let t = &self.train;
        let LossConfig {
            tau, gamma, fallback, ..
        } = t.loss;
        let fallback = match fallback {
            EmptyFallback::KeepAll => "keep_all",
            EmptyFallback::SkipAnchor => "skip_anchor",
        };
        let lambda_mode = match t.lambda_mode {
            LambdaOptimizer::Sgd => "sgd",
            LambdaOptimizer::Adam => "adam",
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let entries: Vec<(&str, String)> = vec![
            ("mode", self.mode.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("per_class", self.per_class.to_string()),
            ("d_in", self.d_in.to_string()),
            ("d_text", self.d_text.to_string()),
            ("spread", format!("{:?}", self.spread)),
            ("data_csv", path(&self.data_csv)),
            ("d_hid", t.d_hid.to_string()),
            ("d_emb", t.d_emb.to_string()),
            ("tau", format!("{tau:?}")),
            ("gamma", format!("{gamma:?}")),
            ("alpha", self.alpha.to_string()),
            ("fallback", fallback.to_string()),
            ("lambda_mode", lambda_mode.to_string()),
            ("lambda_lr", format!("{:?}", t.lambda_lr)),
            ("lambda_beta1", format!("{:?}", t.lambda_beta1)),
            ("lambda_beta2", format!("{:?}", t.lambda_beta2)),
            ("lr", format!("{:?}", t.lr)),
            ("w_beta1", format!("{:?}", t.w_beta1)),
            ("w_beta2", format!("{:?}", t.w_beta2)),
            ("cosine_decay", t.cosine_decay.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("warmup_epoch", t.warmup_epoch.to_string()),
            ("method", t.method.to_string()),
            ("lambda_during_warmup", t.lambda_during_warmup.to_string()),
            ("noise_sigma", format!("{:?}", t.noise_sigma)),
            ("seed", t.seed.to_string()),
            ("eval_sample_count", self.eval_sample_count.to_string()),
            ("oracle_epochs", self.oracle_epochs.to_string()),
            ("oracle_batch_size", self.oracle_batch_size.to_string()),
            ("oracle_tolerance", format!("{:?}", self.oracle_tolerance)),
            ("checkpoint", path(&self.checkpoint)),
            ("output_dir", self.output_dir.display().to_string()),
            ("plots", self.plots.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg =
            RunConfig::parse_str("# desk run\nmethod = fnc\nalpha = 0.05   # fixed\n\nbatch_size=32\nplots = true\n")
                .unwrap();
        assert_eq!(cfg.train.method, Method::Fnc);
        assert_eq!(cfg.alpha, AlphaSetting::Fixed(0.05));
        assert_eq!(cfg.train.batch_size, 32);
        assert!(cfg.plots);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(matches!(
            RunConfig::parse_str("bach_size = 3"),
            Err(Error::BadConfig(_))
        ));
        assert!(matches!(RunConfig::parse_str("epochs = ten"), Err(Error::BadConfig(_))));
        assert!(matches!(RunConfig::parse_str("just words"), Err(Error::BadConfig(_))));
        assert!(RunConfig::parse_str("plots = maybe").is_err());
    }

    #[test]
    fn validation_rules() {
        let mut c = RunConfig::default();
        c.train.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.warmup_epoch = c.train.epochs + 1;
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn every_key_round_trips() {
        let mut c = RunConfig::parse_str("mode = bimodal\nalpha = 0.125\ncheckpoint = a/b.json\nspread = 0.1").unwrap();
        c.train.lambda_mode = LambdaOptimizer::Adam;
        c.train.loss.fallback = EmptyFallback::SkipAnchor;
        let text = c.to_kv_string();
        assert_eq!(RunConfig::parse_str(&text).unwrap(), c);
        let written: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let documented: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        assert_eq!(written, documented);
    }

    #[test]
    fn alpha_resolution() {
        let c = RunConfig::default();
        assert_eq!(c.resolved_train(0.099).loss.alpha, 0.099);
        let c = RunConfig::parse_str("alpha = 0.2").unwrap();
        assert_eq!(c.resolved_train(0.099).loss.alpha, 0.2);
    }
}
