use std::path::{Path, PathBuf};

use irpim::booster::Mode;
use irpim::engine::BoosterPolicy;
use irpim::error::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::Strategy;

/// Knobs for the fine-tuning stage of `run`.
///
/// `step` is in lattice units: a weight whose HR slope is one flip per
/// integer moves at most `step` integers per iteration, whatever the layer
/// size or scale. `anchor` weighs the pull back to the starting weights on
/// the same footing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LhrSettings {
    pub lambda: f64,
    pub steps: usize,
    pub step: f64,
    pub anchor: f64,
}

impl Default for LhrSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            steps: 40,
            step: 0.5,
            anchor: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LhrToggle {
    Enabled(bool),
    Custom(LhrSettings),
}

impl LhrToggle {
    pub fn settings(&self) -> Option<LhrSettings> {
        match *self {
            LhrToggle::Enabled(true) => Some(LhrSettings::default()),
            LhrToggle::Enabled(false) => None,
            LhrToggle::Custom(s) => Some(s),
        }
    }
}

impl Default for LhrToggle {
    fn default() -> Self {
        LhrToggle::Enabled(false)
    }
}

/// Everything one end-to-end run needs. Relative paths resolve against the
/// manifest's directory. The seed has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub topology: PathBuf,
    pub workload: PathBuf,
    #[serde(default)]
    pub mapping: Option<PathBuf>,
    #[serde(default)]
    pub strategy: Option<Strategy>,
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default)]
    pub lhr: LhrToggle,
    #[serde(default)]
    pub wds: Option<u32>,
    #[serde(default)]
    pub booster: BoosterPolicy,
    #[serde(default)]
    pub beta: Option<u32>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut m: RunManifest = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::parse(e.path().to_string(), e.into_inner().to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut m.topology, &mut m.workload, &mut m.out] {
            *p = base.join(&*p);
        }
        if let Some(p) = &mut m.mapping {
            *p = base.join(&*p);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [Some(&self.topology), Some(&self.workload), self.mapping.as_ref()].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::validation(format!("{} does not exist", p.display())));
            }
        }
        if self.mapping.is_some() && self.strategy.is_some() {
            return Err(Error::validation("give either mapping or strategy, not both"));
        }
        if let Some(d) = self.wds {
            if !d.is_power_of_two() {
                return Err(Error::validation(format!("wds delta {d} is not a power of two")));
            }
        }
        if let Some(s) = self.lhr.settings() {
            if !(s.lambda > 0.0 && s.step > 0.0 && s.anchor >= 0.0) {
                return Err(Error::validation("lhr needs lambda > 0, step > 0 and anchor >= 0"));
            }
        }
        if self.beta == Some(0) {
            return Err(Error::validation("beta must be positive"));
        }
        Ok(())
    }
}
