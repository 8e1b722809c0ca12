use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datastream::{SplitRule, SyntheticSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Result, SecaError};
use crate::sevpr::ClassifierVariant;
use crate::sgakt::DistillStrategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Repr {
    Count(u64),
    Number(f64),
    Name(String),
}

/// Pool capacity; `Unbounded` is written `"ALL"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Repr", into = "Repr")]
pub enum PoolMax {
    Bounded(usize),
    Unbounded,
}

impl PoolMax {
    pub fn limit(self) -> Option<usize> {
        match self {
            PoolMax::Bounded(n) => Some(n),
            PoolMax::Unbounded => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(PoolMax::Unbounded);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(PoolMax::Bounded(n)),
            _ => Err(SecaError::InvalidConfig(format!("pool size {s:?} is neither >= 1 nor ALL"))),
        }
    }
}

impl fmt::Display for PoolMax {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolMax::Bounded(n) => write!(f, "{n}"),
            PoolMax::Unbounded => write!(f, "ALL"),
        }
    }
}

impl TryFrom<Repr> for PoolMax {
    type Error = String;
    fn try_from(r: Repr) -> std::result::Result<Self, String> {
        match r {
            Repr::Count(n) if n >= 1 => Ok(PoolMax::Bounded(n as usize)),
            Repr::Count(n) => Err(format!("pool size {n} must be a positive integer")),
            Repr::Number(n) if n >= 1.0 && n.fract() == 0.0 => Ok(PoolMax::Bounded(n as usize)),
            Repr::Number(n) => Err(format!("pool size {n} must be a positive integer")),
            Repr::Name(s) => PoolMax::parse(&s).map_err(|e| e.to_string()),
        }
    }
}

impl From<PoolMax> for Repr {
    fn from(p: PoolMax) -> Repr {
        match p {
            PoolMax::Bounded(n) => Repr::Count(n as u64),
            PoolMax::Unbounded => Repr::Name("ALL".into()),
        }
    }
}

/// Weight of the distillation term: fixed, or equal to the task index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Repr", into = "Repr")]
pub enum BetaSchedule {
    Constant(f64),
    TaskIndex,
}

impl BetaSchedule {
    pub fn at(self, task: usize) -> f64 {
        match self {
            BetaSchedule::Constant(c) => c,
            BetaSchedule::TaskIndex => task as f64,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "task_index" | "dynamic" => Ok(BetaSchedule::TaskIndex),
            _ => match s.parse::<f64>() {
                Ok(c) if c >= 0.0 && c.is_finite() => Ok(BetaSchedule::Constant(c)),
                _ => Err(SecaError::InvalidConfig(format!(
                    "beta {s:?} is neither a non-negative number nor task_index"
                ))),
            },
        }
    }
}

impl fmt::Display for BetaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaSchedule::Constant(c) => write!(f, "{c}"),
            BetaSchedule::TaskIndex => write!(f, "task_index"),
        }
    }
}

impl TryFrom<Repr> for BetaSchedule {
    type Error = String;
    fn try_from(r: Repr) -> std::result::Result<Self, String> {
        match r {
            Repr::Count(c) => Ok(BetaSchedule::Constant(c as f64)),
            Repr::Number(c) => BetaSchedule::parse(&c.to_string()).map_err(|e| e.to_string()),
            Repr::Name(s) => BetaSchedule::parse(&s).map_err(|e| e.to_string()),
        }
    }
}

impl From<BetaSchedule> for Repr {
    fn from(b: BetaSchedule) -> Repr {
        match b {
            BetaSchedule::Constant(c) => Repr::Number(c),
            BetaSchedule::TaskIndex => Repr::Name("task_index".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    FeatureBank { path: PathBuf, split: SplitRule },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Every knob of a run. Missing fields take the documented defaults and
/// the fully resolved value is written to each run's manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Training temperature of the cross-entropy terms.
    pub tau: f64,
    /// Distillation and inference temperature.
    pub tau_prime: f64,
    /// Aggregation sharpness.
    pub lambda: f64,
    /// Affinity kernel scale.
    pub gamma: f64,
    /// Utility momentum.
    pub mu: f64,
    pub kl_eps: f64,
    pub pool_max: PoolMax,
    pub beta: BetaSchedule,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds parameter init, prompt draws and batch order.
    pub seed: u64,
    pub replay: bool,
    /// Pseudo-feature batch size; defaults to `batch_size`.
    pub replay_batch: Option<usize>,
    pub full_covariance: bool,
    pub distill: DistillStrategy,
    pub classifier: ClassifierVariant,
    pub prompt_init_std: f64,
    pub projector_init_std: f64,
    /// The affinity projection starts as this multiple of the identity.
    pub h_init_scale: f64,
    pub encoder: EncoderConfig,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tau: 0.01,
            tau_prime: 20.0,
            lambda: 1.0,
            gamma: 1.0,
            mu: 0.99,
            kl_eps: 1e-8,
            pool_max: PoolMax::Bounded(5),
            beta: BetaSchedule::TaskIndex,
            lr: 0.001,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            replay: false,
            replay_batch: None,
            full_covariance: false,
            distill: DistillStrategy::SgAkt,
            classifier: ClassifierVariant::Sevpr,
            prompt_init_std: 0.02,
            projector_init_std: 0.02,
            h_init_scale: 0.25,
            encoder: EncoderConfig::default(),
            data: DataSource::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            SecaError::InvalidConfig(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn replay_batch(&self) -> usize {
        self.replay_batch.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("tau_prime", self.tau_prime),
            ("lr", self.lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SecaError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("kl_eps", self.kl_eps),
            ("prompt_init_std", self.prompt_init_std),
            ("projector_init_std", self.projector_init_std),
            ("h_init_scale", self.h_init_scale),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SecaError::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(SecaError::InvalidConfig(format!("mu must lie in [0, 1], got {}", self.mu)));
        }
        if let BetaSchedule::Constant(c) = self.beta {
            if !(c >= 0.0) || !c.is_finite() {
                return Err(SecaError::InvalidConfig(format!("beta must be >= 0, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(SecaError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.replay_batch == Some(0) {
            return Err(SecaError::InvalidConfig("replay_batch must be >= 1".into()));
        }
        if self.pool_max == PoolMax::Bounded(0) {
            return Err(SecaError::InvalidConfig("pool_max must be >= 1".into()));
        }
        self.encoder.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.dim != self.encoder.d_v {
                return Err(SecaError::InvalidConfig(format!(
                    "data.synthetic.dim ({}) must equal encoder.d_v ({})",
                    spec.dim, self.encoder.d_v
                )));
            }
        }
        Ok(())
    }

    /// Copy with every seed shifted by `k` (one trial of a repeated run).
    pub fn trial(&self, k: u64) -> RunConfig {
        let mut c = self.clone();
        c.seed = c.seed.wrapping_add(k);
        c.encoder.seed = c.encoder.seed.wrapping_add(k);
        match &mut c.data {
            DataSource::Synthetic(s) => s.seed = s.seed.wrapping_add(k),
            DataSource::FeatureBank { split, .. } => split.seed = split.seed.wrapping_add(k),
        }
        c
    }

    /// Seed of the class-token table: the data registry seed.
    pub fn registry_seed(&self) -> u64 {
        match &self.data {
            DataSource::Synthetic(s) => s.seed,
            DataSource::FeatureBank { split, .. } => split.seed,
        }
    }
}
