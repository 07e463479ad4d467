use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Kernel, Variant};
use crate::seqgen::{self, Instance, Sequence};

/// Step-size request; resolved against the kernel and variant before use.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "EtaRepr", into = "EtaRepr")]
pub enum EtaSpec {
    /// Half the stability limit.
    #[default]
    Auto,
    /// `1 / k(x₁, x₁)`; the raw iteration then terminates after `t` steps.
    Nilpotent,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EtaRepr {
    Number(f64),
    Name(String),
}

impl TryFrom<EtaRepr> for EtaSpec {
    type Error = Error;
    fn try_from(r: EtaRepr) -> Result<Self> {
        match r {
            EtaRepr::Number(v) => Ok(EtaSpec::Value(v)),
            EtaRepr::Name(s) => s.parse(),
        }
    }
}

impl From<EtaSpec> for EtaRepr {
    fn from(e: EtaSpec) -> Self {
        match e {
            EtaSpec::Auto => EtaRepr::Name("auto".into()),
            EtaSpec::Nilpotent => EtaRepr::Name("nilpotent".into()),
            EtaSpec::Value(v) => EtaRepr::Number(v),
        }
    }
}

impl FromStr for EtaSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(EtaSpec::Auto),
            "nilpotent" => Ok(EtaSpec::Nilpotent),
            other => other
                .parse::<f64>()
                .map(EtaSpec::Value)
                .map_err(|_| Error::InvalidParameter(format!("eta must be `auto`, `nilpotent` or a number, got `{other}`"))),
        }
    }
}

impl fmt::Display for EtaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EtaSpec::Auto => f.write_str("auto"),
            EtaSpec::Nilpotent => f.write_str("nilpotent"),
            EtaSpec::Value(v) => write!(f, "{v}"),
        }
    }
}

impl EtaSpec {
    /// Concrete step size for unit-norm tokens under `kernel` and `variant`.
    pub fn resolve(self, kernel: Kernel, variant: Variant) -> Result<f64> {
        let k11 = kernel.unit_diagonal();
        let limit = match variant {
            Variant::Raw => 2.0 / k11,
            Variant::SoftmaxNormalized => 2.0,
        };
        match self {
            EtaSpec::Auto => Ok(limit / 2.0),
            EtaSpec::Nilpotent => match variant {
                Variant::Raw => Ok(1.0 / k11),
                Variant::SoftmaxNormalized => Err(Error::InvalidParameter(
                    "eta = nilpotent requires the raw variant".into(),
                )),
            },
            EtaSpec::Value(v) if v > 0.0 && v.is_finite() => {
                if v >= limit {
                    log::warn!("eta = {v} is not below the stability limit {limit}; the descent may diverge");
                }
                Ok(v)
            }
            EtaSpec::Value(v) => Err(Error::InvalidParameter(format!("eta must be positive, got {v}"))),
        }
    }
}

/// Parameters shared by all subcommands. Unset optional fields fall back to
/// per-command defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: Instance,
    pub dim: Option<usize>,
    pub length: Option<usize>,
    /// Period of instance (3); drawn uniformly from `20..=40` per sequence when unset.
    pub period: Option<usize>,
    pub repeats: usize,
    pub kernel: Option<Kernel>,
    pub variant: Variant,
    pub eta: EtaSpec,
    pub depth: usize,
    pub seeds: usize,
    pub draws: usize,
    pub seed: u64,
    /// Phase-modulation exponent of instance (4).
    pub q: f64,
    pub ablate_bos: bool,
    /// Replace every sampled `W` by the identity (spectral command).
    pub force_identity: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            instance: Instance::LinearOrthogonal,
            dim: None,
            length: None,
            period: None,
            repeats: 20,
            kernel: None,
            variant: Variant::Raw,
            eta: EtaSpec::Auto,
            depth: 20,
            seeds: 5,
            draws: 1000,
            seed: 0,
            q: 2.0,
            ablate_bos: false,
            force_identity: false,
        }
    }
}

pub const PERIOD_RANGE: std::ops::RangeInclusive<usize> = 20..=40;

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("bad config {}: {e}", path.display())))
    }

    pub fn dim(&self) -> usize {
        self.dim.unwrap_or(match self.instance {
            Instance::PhaseModulated => 4,
            _ => 15,
        })
    }

    pub fn length(&self) -> usize {
        self.length.unwrap_or(100)
    }

    /// The kernel the instance is analysed with; an explicit conflicting
    /// request is rejected.
    pub fn kernel(&self) -> Result<Kernel> {
        let natural = self.instance.kernel();
        match self.kernel {
            Some(k) if k != natural => Err(Error::InvalidParameter(format!(
                "instance {} is studied with the {natural} kernel, not {k}",
                self.instance.number()
            ))),
            _ => Ok(natural),
        }
    }

    pub fn seed_values(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Period used for the sequence with the given seed.
    pub fn period_for(&self, seed: u64) -> usize {
        self.period.unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            rng.gen_range(PERIOD_RANGE)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::InvalidParameter("dim must be at least 1".into()));
        }
        if self.instance != Instance::Periodic && self.length() < 2 {
            return Err(Error::InvalidParameter("length must be at least 2".into()));
        }
        if self.instance == Instance::PhaseModulated && !self.dim().is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "instance 4 needs an even dimension, got {}",
                self.dim()
            )));
        }
        if self.seeds == 0 {
            return Err(Error::InvalidParameter("seeds must be at least 1".into()));
        }
        if !self.q.is_finite() {
            return Err(Error::InvalidParameter("q must be finite".into()));
        }
        Ok(())
    }

    pub fn sequence(&self, seed: u64) -> Result<Sequence> {
        let d = self.dim();
        match self.instance {
            Instance::LinearOrthogonal => seqgen::generate_linear(d, self.length(), seed),
            Instance::ExpOrthogonal => seqgen::generate_exp_orthogonal(d, self.length(), seed),
            Instance::Periodic => seqgen::generate_periodic(d, self.period_for(seed), self.repeats, seed),
            Instance::PhaseModulated => seqgen::generate_phase_modulated(d / 2, self.length(), self.q, seed),
        }
    }
}
