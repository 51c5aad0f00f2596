//! The run configuration: one TOML file with a section per module.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::evalkit::EvalPlan;
use crate::funnel::FunnelConfig;
use crate::pipeline::PipelineConfig;
use crate::retrieval::RetrievalConfig;
use crate::scorers::{ModelSuite, ScorerKind, ScorerSpec};
use crate::sim::SimConfig;
use crate::worldgen::WorldConfig;

/// A scorer entry in the config. Omitted fields take the kind's defaults.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScorer {
    kind: ScorerKind,
    embedding_rank: Option<usize>,
    noise_sigma: Option<f64>,
    shrinkage_half_count: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    world: WorldConfig,
    #[serde(default)]
    scorers: Vec<RawScorer>,
    #[serde(default)]
    retrieval: RetrievalConfig,
    #[serde(default)]
    pipeline: PipelineConfig,
    #[serde(default)]
    funnel: FunnelConfig,
    #[serde(default)]
    eval: EvalPlan,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub scorers: ModelSuite,
    pub retrieval: RetrievalConfig,
    pub pipeline: PipelineConfig,
    pub funnel: FunnelConfig,
    pub eval: EvalPlan,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::default(),
            scorers: ModelSuite::default(),
            retrieval: RetrievalConfig::default(),
            pipeline: PipelineConfig::default(),
            funnel: FunnelConfig::default(),
            eval: EvalPlan::default(),
            output_dir: default_output_dir(),
        }
    }
}

fn path_error(e: serde_path_to_error::Error<toml::de::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.inner().message().to_string();
    // Point missing-field errors at the field itself.
    let field = match inner.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
        Some(name) if path == "." => name.to_string(),
        Some(name) => format!("{path}.{name}"),
        None => path,
    };
    Error::config(field, inner)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| Error::config("toml", e.message().to_string()))?;
        let raw: RawRunConfig = serde_path_to_error::deserialize(de).map_err(path_error)?;

        let mut scorers = ModelSuite::default();
        let mut seen = Vec::new();
        for (i, s) in raw.scorers.iter().enumerate() {
            if seen.contains(&s.kind) {
                return Err(Error::config(
                    format!("scorers[{i}].kind"),
                    format!("{} listed twice", s.kind.name()),
                ));
            }
            seen.push(s.kind);
            let d = ScorerSpec::default_for(s.kind);
            *scorers.get_mut(s.kind) = ScorerSpec {
                kind: s.kind,
                embedding_rank: s.embedding_rank.unwrap_or(d.embedding_rank),
                noise_sigma: s.noise_sigma.unwrap_or(d.noise_sigma),
                shrinkage_half_count: s.shrinkage_half_count.unwrap_or(d.shrinkage_half_count),
                seed: s.seed.unwrap_or(d.seed),
            };
        }

        let mut funnel = raw.funnel;
        funnel.retrieval = raw.retrieval.clone();
        let cfg = RunConfig {
            world: raw.world,
            scorers,
            retrieval: raw.retrieval,
            pipeline: raw.pipeline,
            funnel,
            eval: raw.eval,
            output_dir: raw.output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.scorers.validate(self.world.latent_dim)?;
        self.retrieval.validate()?;
        self.pipeline.validate()?;
        self.funnel.validate(self.pipeline.store_k)?;
        self.eval.validate()
    }

    pub fn world_for_seed(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            ..self.world.clone()
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            models: self.scorers.clone(),
            retrieval: self.retrieval.clone(),
            pipeline: self.pipeline.clone(),
        }
    }

    /// Funnel settings with the shared retrieval section filled in.
    pub fn funnel(&self) -> FunnelConfig {
        FunnelConfig {
            retrieval: self.retrieval.clone(),
            ..self.funnel.clone()
        }
    }
}
