//! Argument types shared by the subcommands and the experiment runner.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowprior::map::lambda_for_gaussian;
use flowprior::FlowTopology;
use serde::{Deserialize, Serialize};

/// Marks an error as a usage or spec problem (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Fails with a usage error when `path` is not an existing file.
pub fn require_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input file not found: {}", path.display())))
    }
}

pub fn require_dir(path: &Path) -> anyhow::Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("input directory not found: {}", path.display())))
    }
}

/// Topology with every field optional. Missing fields take the defaults
/// below; a missing patch size comes from the corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    #[serde(default, alias = "patch_size")]
    pub patch: Option<usize>,
    #[serde(default)]
    pub levels: Option<usize>,
    #[serde(default, alias = "steps_per_level")]
    pub steps: Option<usize>,
    #[serde(default, alias = "hidden_channels")]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub split_after_level: Option<Vec<bool>>,
}

impl TopologySpec {
    pub const DEFAULT_LEVELS: usize = 3;
    pub const DEFAULT_STEPS: usize = 8;
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn parse(json: &str) -> anyhow::Result<Self> {
        serde_json::from_str(json).map_err(|e| usage(format!("invalid topology JSON: {e}")))
    }

    pub fn resolve(&self, corpus_patch: usize) -> anyhow::Result<FlowTopology> {
        let patch = self.patch.unwrap_or(corpus_patch);
        if patch != corpus_patch {
            return Err(usage(format!(
                "topology patch size {patch} does not match the {corpus_patch}px corpus"
            )));
        }
        let mut t = FlowTopology::new(
            patch,
            self.levels.unwrap_or(Self::DEFAULT_LEVELS),
            self.steps.unwrap_or(Self::DEFAULT_STEPS),
            self.hidden.unwrap_or(Self::DEFAULT_HIDDEN),
        );
        if let Some(split) = &self.split_after_level {
            t.split_after_level = split.clone();
            t = t.normalized();
        }
        t.validate()?;
        Ok(t)
    }
}

/// How the data-fidelity weight is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaRule {
    /// `0.75 σ²` for Gaussian noise of the given σ.
    Gaussian { sigma: f64 },
    Fixed(f64),
}

impl LambdaRule {
    pub fn value(&self) -> anyhow::Result<f64> {
        match *self {
            LambdaRule::Gaussian { sigma } => Ok(lambda_for_gaussian(sigma)?),
            LambdaRule::Fixed(v) => Ok(v),
        }
    }
}

impl FromStr for LambdaRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |v: &str| -> Result<f64, String> {
            let x: f64 = v.trim().parse().map_err(|_| format!("not a number: {v:?}"))?;
            if x >= 0.0 && x.is_finite() {
                Ok(x)
            } else {
                Err(format!("value must be finite and >= 0, got {x}"))
            }
        };
        if let Some(rest) = s.strip_prefix("auto:") {
            let sigma = rest
                .strip_prefix("sigma=")
                .ok_or_else(|| format!("expected auto:sigma=<value>, got {s:?}"))?;
            Ok(LambdaRule::Gaussian { sigma: num(sigma)? })
        } else if let Some(rest) = s.strip_prefix("fixed:") {
            Ok(LambdaRule::Fixed(num(rest)?))
        } else {
            Err(format!("expected auto:sigma=<value> or fixed:<value>, got {s:?}"))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Resolves `path` against `base` unless it is absolute.
pub fn resolve_path(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
