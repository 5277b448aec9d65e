//! Versioned JSON envelope for trained models.
//!
//! ```text
//! {"format":"spare-model","version":1,"domain":{...},"seed":0,"model":{"kind":"single",...}}
//! ```
//!
//! The embedded domain must equal the one the reader runs with, so that a
//! file never silently binds its reference ids to different functions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineModel;
use crate::density::{log_sum_exp, Scope};
use crate::em::{EmOutcome, MixtureRule};
use crate::error::{Result, SpareError};
use crate::relational::{Domain, Experience, ReferenceList};
use crate::rule::{GreedyOutcome, SpareModel};

pub const MODEL_FORMAT: &str = "spare-model";
pub const MODEL_VERSION: u32 = 1;

/// A set of mixture rules combined with fixed prior weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub rules: Vec<MixtureRule>,
    /// Mean training membership of each rule.
    pub weights: Vec<f64>,
    pub default_variance: Vec<f64>,
}

impl MixtureModel {
    pub fn from_outcome(out: &EmOutcome) -> Self {
        let n = out.membership.n_samples() as f64;
        let weights = (0..out.membership.n_rules())
            .map(|j| out.membership.column(j).iter().sum::<f64>() / n)
            .collect();
        Self {
            rules: out.rules.clone(),
            weights,
            default_variance: out.default_variance.clone(),
        }
    }

    /// `log sum_j w_j p_j(s' | s, a)` per sample, over all objects.
    pub fn log_densities(&self, domain: &Domain, exps: &[Experience]) -> Result<Vec<f64>> {
        let cols: Vec<Vec<f64>> = self
            .rules
            .iter()
            .map(|r| r.log_densities(domain, exps, &self.default_variance))
            .collect::<Result<_>>()?;
        Ok((0..exps.len())
            .map(|i| {
                let terms: Vec<f64> = self.weights.iter().zip(&cols).map(|(w, c)| w.ln() + c[i]).collect();
                log_sum_exp(&terms)
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelBody {
    Single { gamma: ReferenceList, model: SpareModel },
    Mixture(MixtureModel),
    Baseline(BaselineModel),
}

impl ModelBody {
    pub fn single(out: &GreedyOutcome) -> Self {
        Self::Single {
            gamma: out.gamma.clone(),
            model: out.model(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Single { .. } => "single",
            Self::Mixture(_) => "mixture",
            Self::Baseline(_) => "baseline",
        }
    }

    /// Per-sample log-likelihood of the next states. Mixture models only
    /// support [`Scope::AllObjects`].
    pub fn log_densities(&self, domain: &Domain, exps: &[Experience], scope: Scope) -> Result<Vec<f64>> {
        match self {
            Self::Single { model, .. } => model.log_densities(domain, exps, scope),
            Self::Baseline(b) => b.log_densities(domain, exps, scope),
            Self::Mixture(m) => {
                if scope != Scope::AllObjects {
                    return Err(SpareError::Config("mixture models are evaluated on all objects only".into()));
                }
                m.log_densities(domain, exps)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub domain: Domain,
    pub seed: u64,
    pub model: ModelBody,
}

impl ModelFile {
    pub fn new(domain: &Domain, seed: u64, model: ModelBody) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            domain: domain.clone(),
            seed,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parse and check the envelope against `domain`.
    pub fn from_json(text: &str, domain: &Domain) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            format: String,
            version: u32,
        }
        let p: Probe = serde_json::from_str(text)?;
        if p.format != MODEL_FORMAT {
            return Err(SpareError::Format(format!("not a model file (format `{}`)", p.format)));
        }
        if p.version != MODEL_VERSION {
            return Err(SpareError::Format(format!(
                "unsupported model version {} (this build reads {MODEL_VERSION})",
                p.version
            )));
        }
        let f: Self = serde_json::from_str(text)?;
        if &f.domain != domain {
            return Err(SpareError::Format("model was trained on a different domain".into()));
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path, domain: &Domain) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, domain)
    }
}
