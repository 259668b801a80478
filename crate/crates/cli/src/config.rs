//! Experiment configuration: JSON schema, defaults and validation.

use std::path::{Path, PathBuf};

use potts::coupling::{LatticeScale, DEFAULT_EPSILON, DEFAULT_JITTER};
use potts::samplers::{BondConvention, SamplerKind};
use potts::tempering::TemperingSchedule;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `side x side` grid, free boundary.
    Lattice2d {
        side: usize,
        #[serde(default)]
        scale: LatticeScale,
    },
    CurieWeiss {
        n: usize,
    },
    ErdosRenyi {
        n: usize,
        p: f64,
    },
    Sk {
        n: usize,
    },
    Hopfield {
        n: usize,
        d: usize,
    },
    /// Inline matrix, one array per row.
    Custom {
        entries: Vec<Vec<f64>>,
    },
    /// A coupling file written by `generate`. Relative paths are resolved
    /// against the config file's directory.
    File {
        path: PathBuf,
    },
}

impl ModelSpec {
    pub fn label(&self) -> String {
        match self {
            ModelSpec::Lattice2d { side, .. } => format!("lattice2d(side={side})"),
            ModelSpec::CurieWeiss { n } => format!("curie_weiss(n={n})"),
            ModelSpec::ErdosRenyi { n, p } => format!("erdos_renyi(n={n};p={p})"),
            ModelSpec::Sk { n } => format!("sk(n={n})"),
            ModelSpec::Hopfield { n, d } => format!("hopfield(n={n};d={d})"),
            ModelSpec::Custom { entries } => format!("custom(n={})", entries.len()),
            ModelSpec::File { path } => format!("file({})", path.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    #[default]
    Random,
    AllZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// Total iterations per chain, burn-in included.
    pub m: usize,
    pub burn_in: usize,
    #[serde(default = "default_chains")]
    pub chains: usize,
}

fn default_chains() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperingSpec {
    pub ladder: Vec<f64>,
    pub n_ex: usize,
    pub n_mc: usize,
    #[serde(default = "default_burn_in_fraction")]
    pub burn_in_fraction: f64,
}

fn default_burn_in_fraction() -> f64 {
    TemperingSchedule::DEFAULT_BURN_IN_FRACTION
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default)]
    pub want_pmf: bool,
    /// When set, also emit the truncation certificate at this threshold.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSpec,
    #[serde(default)]
    pub betas: Vec<f64>,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default)]
    pub sampler: Option<SamplerSpec>,
    /// Sampler kinds for `benchmark`; iteration counts come from `sampler`.
    #[serde(default)]
    pub samplers: Vec<SamplerKind>,
    #[serde(default)]
    pub tempering: Option<TemperingSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub bond_convention: BondConvention,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_q() -> usize {
    2
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Sample,
    Temper,
    Oracle,
    Benchmark,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Sample => "sample",
            Command::Temper => "temper",
            Command::Oracle => "oracle",
            Command::Benchmark => "benchmark",
        }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl Config {
    /// Parses a config file; errors carry the JSON path of the offending field.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| invalid("", format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        if let ModelSpec::File { path: file } = &mut config.model {
            if file.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *file = base.join(&*file);
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path == "." { "" } else { &path }, e.into_inner().to_string())
        })
    }

    /// Checks everything `command` needs before any work starts.
    pub fn validate(&self, command: Command) -> Result<(), CliError> {
        self.validate_model()?;
        if self.q < 2 || self.q > u16::MAX as usize + 1 {
            return Err(invalid("q", format!("must be between 2 and 65536, got {}", self.q)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(
                "epsilon",
                format!("must be finite and >= 0, got {}", self.epsilon),
            ));
        }
        if !(self.jitter > 0.0 && self.jitter.is_finite()) {
            return Err(invalid(
                "jitter",
                format!("must be finite and > 0, got {}", self.jitter),
            ));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(*b > 0.0 && b.is_finite()) {
                return Err(invalid(
                    &format!("betas[{i}]"),
                    format!("must be finite and > 0, got {b}"),
                ));
            }
        }
        let needs_betas = matches!(command, Command::Sample | Command::Oracle | Command::Benchmark);
        if needs_betas && self.betas.is_empty() {
            return Err(invalid(
                "betas",
                format!("at least one value is required for `{}`", command.name()),
            ));
        }
        if matches!(command, Command::Sample | Command::Temper | Command::Benchmark) {
            let s = self
                .sampler
                .as_ref()
                .ok_or_else(|| invalid("sampler", format!("required for `{}`", command.name())))?;
            if s.chains == 0 {
                return Err(invalid("sampler.chains", "must be at least 1"));
            }
            if command != Command::Temper && s.burn_in >= s.m {
                return Err(invalid(
                    "sampler.burn_in",
                    format!("must be smaller than sampler.m ({})", s.m),
                ));
            }
        }
        if command == Command::Benchmark && self.samplers.is_empty() {
            return Err(invalid(
                "samplers",
                "at least one sampler kind is required for `benchmark`",
            ));
        }
        if command == Command::Temper {
            let t = self
                .tempering
                .as_ref()
                .ok_or_else(|| invalid("tempering", "required for `temper`"))?;
            potts::tempering::TemperingLadder::new(t.ladder.clone())
                .map_err(|e| invalid("tempering.ladder", e.to_string()))?;
            if t.n_ex == 0 {
                return Err(invalid("tempering.n_ex", "must be at least 1"));
            }
            if t.n_mc == 0 {
                return Err(invalid("tempering.n_mc", "must be at least 1"));
            }
            if !(0.0..1.0).contains(&t.burn_in_fraction) {
                return Err(invalid("tempering.burn_in_fraction", "must lie in [0, 1)"));
            }
        }
        if let Some(eps) = self.oracle.epsilon {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(invalid("oracle.epsilon", format!("must be finite and >= 0, got {eps}")));
            }
        }
        Ok(())
    }

    fn validate_model(&self) -> Result<(), CliError> {
        match &self.model {
            ModelSpec::Lattice2d { side, .. } if *side < 2 => Err(invalid("model.side", "must be at least 2")),
            ModelSpec::CurieWeiss { n }
            | ModelSpec::Sk { n }
            | ModelSpec::ErdosRenyi { n, .. }
            | ModelSpec::Hopfield { n, .. }
                if *n < 2 =>
            {
                Err(invalid("model.n", "must be at least 2"))
            }
            ModelSpec::ErdosRenyi { p, .. } if !(*p > 0.0 && *p <= 1.0) => {
                Err(invalid("model.p", "must lie in (0, 1]"))
            }
            ModelSpec::Hopfield { d, .. } if *d == 0 => Err(invalid("model.d", "must be at least 1")),
            ModelSpec::Custom { entries } => {
                if entries.is_empty() {
                    return Err(invalid("model.entries", "must not be empty"));
                }
                if let Some(i) = entries.iter().position(|r| r.len() != entries.len()) {
                    return Err(invalid(&format!("model.entries[{i}]"), "matrix must be square"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn tempering_schedule(&self) -> Option<TemperingSchedule> {
        self.tempering
            .as_ref()
            .map(|t| TemperingSchedule::with_burn_in_fraction(t.n_ex, t.n_mc, t.burn_in_fraction))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
