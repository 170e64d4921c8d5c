use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KeyValues;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled batch, recomputed per call.
    Median,
    Fixed(f64),
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Median => f.write_str("median"),
            Bandwidth::Fixed(s) => write!(f, "{s}"),
        }
    }
}

impl FromStr for Bandwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("median") {
            return Ok(Bandwidth::Median);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Bandwidth::Fixed(v)),
            _ => Err(Error::Config(format!(
                "bandwidth must be \"median\" or a positive number, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdMode {
    Classwise,
    Global,
}

impl fmt::Display for MmdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MmdMode::Classwise => "classwise",
            MmdMode::Global => "global",
        })
    }
}

impl FromStr for MmdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classwise" | "class-wise" => Ok(MmdMode::Classwise),
            "global" => Ok(MmdMode::Global),
            _ => Err(Error::UnknownToken {
                kind: "mmd mode",
                token: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lambda: f64,
    pub bandwidth: Bandwidth,
    pub mmd_mode: MmdMode,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Per domain.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            bandwidth: Bandwidth::Median,
            mmd_mode: MmdMode::Classwise,
            phase1_epochs: 20,
            phase2_epochs: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub const KEYS: [&'static str; 11] = [
        "lambda",
        "bandwidth",
        "mmd_mode",
        "phase1_epochs",
        "phase2_epochs",
        "learning_rate",
        "beta1",
        "beta2",
        "epsilon",
        "batch_size",
        "seed",
    ];

    /// Reads a key-value config; absent keys keep their defaults, unknown keys
    /// are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(|k| Self::KEYS.contains(&k))?;
        let d = Self::default();
        let bandwidth = match kv.get_str("bandwidth") {
            Some(s) => s.parse()?,
            None => d.bandwidth,
        };
        let mmd_mode = match kv.get_str("mmd_mode") {
            Some(s) => s.parse()?,
            None => d.mmd_mode,
        };
        let cfg = Self {
            lambda: kv.get("lambda")?.unwrap_or(d.lambda),
            bandwidth,
            mmd_mode,
            phase1_epochs: kv.get("phase1_epochs")?.unwrap_or(d.phase1_epochs),
            phase2_epochs: kv.get("phase2_epochs")?.unwrap_or(d.phase2_epochs),
            learning_rate: kv.get("learning_rate")?.unwrap_or(d.learning_rate),
            beta1: kv.get("beta1")?.unwrap_or(d.beta1),
            beta2: kv.get("beta2")?.unwrap_or(d.beta2),
            epsilon: kv.get("epsilon")?.unwrap_or(d.epsilon),
            batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
            seed: kv.get("seed")?.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be a finite value >= 0");
        }
        if self.phase1_epochs == 0 || self.phase2_epochs == 0 {
            return fail("epoch counts must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return fail("optimizer needs learning_rate > 0, betas in [0, 1), epsilon > 0");
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return fail("fixed bandwidth must be positive");
            }
        }
        Ok(())
    }

    /// Key-value text that [`AdaptConfig::parse`] reads back to `self`.
    pub fn to_kv_text(&self) -> String {
        format!(
            "lambda = {}\nbandwidth = {}\nmmd_mode = {}\nphase1_epochs = {}\nphase2_epochs = {}\nlearning_rate = {}\nbeta1 = {}\nbeta2 = {}\nepsilon = {}\nbatch_size = {}\nseed = {}\n",
            self.lambda,
            self.bandwidth,
            self.mmd_mode,
            self.phase1_epochs,
            self.phase2_epochs,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.batch_size,
            self.seed
        )
    }
}
