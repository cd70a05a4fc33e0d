//! The four refinement modules and their composition.

pub mod akd;
pub mod cba;
pub mod dacg;
pub mod sicd;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::ActivationMap;

pub use akd::AkdParams;
pub use cba::CbaParams;
pub use dacg::{Branch, DacgBranchLog, DacgParams, RoutingCounts};
pub use sicd::{SicdLog, SicdParams, TokenMaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Akd,
    Dacg,
    Cba,
    Sicd,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Akd, Module::Dacg, Module::Cba, Module::Sicd];

    pub fn as_str(self) -> &'static str {
        match self {
            Module::Akd => "akd",
            Module::Dacg => "dacg",
            Module::Cba => "cba",
            Module::Sicd => "sicd",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim().to_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown module {s:?}")))
    }
}

/// Parses a comma-separated module list such as `akd,dacg`. An empty string
/// disables every module.
pub fn parse_modules(list: &str) -> Result<Vec<Module>> {
    let modules: Vec<Module> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    check_unique(&modules)?;
    Ok(modules)
}

pub(crate) fn check_unique(modules: &[Module]) -> Result<()> {
    for (i, m) in modules.iter().enumerate() {
        if modules[..i].contains(m) {
            return Err(Error::Config(format!("module {m} listed twice")));
        }
    }
    Ok(())
}

/// Parameters for every module plus the order they run in.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefineParams {
    pub modules: Vec<Module>,
    pub akd: AkdParams,
    pub dacg: DacgParams,
    pub cba: CbaParams,
    pub sicd: SicdParams,
}

impl RefineParams {
    pub fn with_modules(modules: Vec<Module>) -> Self {
        Self {
            modules,
            ..Self::default()
        }
    }

    pub fn full() -> Self {
        Self::with_modules(Module::ALL.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        check_unique(&self.modules)?;
        self.akd.validate()?;
        self.dacg.validate()?;
        self.cba.validate()?;
        self.sicd.validate()
    }
}

/// What each executed stage decided.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub akd_kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dacg: Option<DacgBranchLog>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cba_tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sicd: Option<SicdLog>,
    #[serde(skip)]
    pub timings: Vec<(Module, Duration)>,
}

/// Runs the configured modules in order, renormalizing after each one.
pub fn refine(
    map: &ActivationMap,
    tokens: TokenMaps<'_>,
    params: &RefineParams,
) -> Result<(ActivationMap, RefineTrace)> {
    let mut current = map.clone();
    let mut trace = RefineTrace::default();
    for module in &params.modules {
        let start = Instant::now();
        current = match module {
            Module::Akd => {
                let (out, k) = akd::akd_unnormalized(&current, &params.akd)?;
                trace.akd_kernel = Some(k);
                out.normalized()
            }
            Module::Dacg => {
                let (out, log) = dacg::dacg(&current, &params.dacg);
                trace.dacg = Some(log);
                out
            }
            Module::Cba => {
                let (out, tau) = cba::cba_unnormalized(&current, &params.cba);
                trace.cba_tau = Some(tau);
                out.normalized()
            }
            Module::Sicd => {
                let (out, log) = sicd::sicd(&current, tokens, &params.sicd)?;
                trace.sicd = Some(log);
                out
            }
        };
        trace.timings.push((*module, start.elapsed()));
    }
    Ok((current, trace))
}
