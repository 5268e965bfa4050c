use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{
    load_csv, make_blobs, BlobConfig, Dataset, Evaluator, ExemptionRules, SurrogateConfig, SurrogateEvaluator,
    ToyEvaluator, TrainHyper,
};
use crate::quantizer::DEFAULT_BUCKET_SIZE;
use crate::search_space::{ModelGenome, SpaceConfig, StackingProfile};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// Mutate the architecture, then the policy, every iteration.
    #[default]
    Joint,
    /// Architecture frozen; only the policy mutates.
    PolicyOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub blobs: BlobConfig,
    /// Read the dataset from CSV instead of generating blobs.
    pub dataset_csv: Option<PathBuf>,
    pub data_seed: u64,
    pub hyper: TrainHyper,
    pub share_parameters: bool,
    pub exemptions: ExemptionRules,
}

impl ToyConfig {
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset_csv {
            Some(path) => load_csv(path, self.data_seed),
            None => make_blobs(&self.blobs, self.data_seed),
        }
    }
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            blobs: BlobConfig::default(),
            dataset_csv: None,
            data_seed: 0,
            hyper: TrainHyper::default(),
            share_parameters: false,
            exemptions: ExemptionRules::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvaluatorConfig {
    Surrogate(SurrogateConfig),
    Toy(ToyConfig),
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig::Toy(ToyConfig::default())
    }
}

impl EvaluatorConfig {
    /// Builds the evaluator for networks stacked per `profile`.
    pub fn build(&self, profile: &StackingProfile, bucket_size: usize) -> Result<Arc<dyn Evaluator>> {
        Ok(match self {
            EvaluatorConfig::Surrogate(cfg) => Arc::new(SurrogateEvaluator::new(cfg.clone(), profile.clone())?),
            EvaluatorConfig::Toy(cfg) => {
                let data = cfg.dataset()?;
                Arc::new(
                    ToyEvaluator::new(profile.clone(), Arc::new(data), cfg.hyper.clone(), bucket_size)?
                        .with_exemptions(cfg.exemptions.clone())
                        .with_parameter_sharing(cfg.share_parameters),
                )
            }
        })
    }
}

fn default_profile() -> StackingProfile {
    StackingProfile::cifar(1, 8)
}

/// Everything a search run needs; mirrors the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub population_size: usize,
    pub sample_size: usize,
    pub max_iterations: usize,
    pub target_bytes: u64,
    pub mode: SearchMode,
    pub search_profile: StackingProfile,
    /// Profile the final best genome is re-evaluated under; defaults to the
    /// search profile. Must have the same cell count.
    pub evaluation_profile: Option<StackingProfile>,
    pub space: SpaceConfig,
    pub evaluator: EvaluatorConfig,
    pub bucket_size: usize,
    pub seed: u64,
    /// Placed first in the initial population.
    pub seed_individuals: Vec<ModelGenome>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: 16,
            sample_size: 16,
            max_iterations: 100,
            target_bytes: 4_000,
            mode: SearchMode::Joint,
            search_profile: default_profile(),
            evaluation_profile: None,
            space: SpaceConfig::default(),
            evaluator: EvaluatorConfig::default(),
            bucket_size: DEFAULT_BUCKET_SIZE,
            seed: 0,
            seed_individuals: Vec::new(),
        }
    }
}

impl SearchConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 2 || self.sample_size > self.population_size {
            return Err(Error::Config(format!(
                "need 2 <= sample_size <= population_size, got sample_size={} population_size={}",
                self.sample_size, self.population_size
            )));
        }
        if self.seed_individuals.len() > self.population_size {
            return Err(Error::Config(format!(
                "{} seed individuals exceed population size {}",
                self.seed_individuals.len(),
                self.population_size
            )));
        }
        if self.target_bytes == 0 {
            return Err(Error::Config("target_bytes must be positive".into()));
        }
        if self.bucket_size == 0 {
            return Err(Error::Config("bucket_size must be positive".into()));
        }
        if self.space.bit_choices.len() < 2 {
            return Err(Error::Config("policy mutation needs at least two bit choices".into()));
        }
        self.search_profile.validate()?;
        if let Some(p) = &self.evaluation_profile {
            p.validate()?;
            if p.cell_count() != self.search_profile.cell_count() {
                return Err(Error::Config(format!(
                    "evaluation profile has {} cells, search profile {}",
                    p.cell_count(),
                    self.search_profile.cell_count()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_defaults_and_evaluator_tag() {
        let cfg = SearchConfig::from_json(
            r#"{"population_size": 8, "sample_size": 4, "evaluator": {"kind": "surrogate", "seed": 3}}"#,
        )
        .unwrap();
        assert_eq!(cfg.max_iterations, 100);
        assert_eq!(
            cfg.evaluator,
            EvaluatorConfig::Surrogate(SurrogateConfig { seed: 3, ..Default::default() })
        );
        let back = SearchConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_invalid() {
        for bad in [
            r#"{"population_size": 4, "sample_size": 8}"#,
            r#"{"sample_size": 1}"#,
            r#"{"target_bytes": 0}"#,
            r#"{"mode": "sideways"}"#,
            r#"{"unknown_field": 1}"#,
            r#"{"space": {"bit_choices": [8]}}"#,
            r#"{"evaluation_profile": {"n": 2, "f_init": 8, "dataset": "cifar-style"}}"#,
        ] {
            assert!(SearchConfig::from_json(bad).is_err(), "{bad}");
        }
    }
}
