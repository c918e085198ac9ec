//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use commeta::datagen::{self, SyntheticSpec};
use commeta::graph::SocialGraph;
use commeta::meta::{AdaptProfile, TrainConfig};
use commeta::model::ModelConfig;
use commeta::sampler::SamplerConfig;
use commeta::{io, Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed; every module seed is taken from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Number of stratified folds (one checkpoint each).
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub graph: GraphSource,
    /// Evaluation graph; the training graph's fold splits are used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<GraphSource>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub baselines: BaselineSection,
    #[serde(default)]
    pub homophily: HomophilySection,
}

fn default_folds() -> usize {
    5
}

/// Where a graph comes from. Exactly one of `preset`, `synthetic`, `files`
/// or (for targets) `shift` must be given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<GraphFiles>,
    /// Shifted copy of the training graph's synthetic domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<Shift>,
    #[serde(default)]
    pub largest_component: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFiles {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    #[serde(default)]
    pub angle_degrees: f64,
    #[serde(default)]
    pub translation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proportions: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    Low,
    High,
}

impl Adaptation {
    pub fn name(self) -> &'static str {
        match self {
            Adaptation::Low => "low",
            Adaptation::High => "high",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub k: Vec<usize>,
    pub episodes: usize,
    pub adaptation: Adaptation,
    pub zero_shot: bool,
    /// Inner loop of the low profile; the training inner loop when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub low: Option<AdaptProfile>,
    pub high: AdaptProfile,
    /// Checkpoint directory; `<out>/train/checkpoints` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<PathBuf>,
    /// Write one episode manifest per evaluated fold and k.
    pub manifests: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            k: vec![4, 8, 12, 16],
            episodes: 256,
            adaptation: Adaptation::Low,
            zero_shot: false,
            low: None,
            high: AdaptProfile {
                inner_lr: 0.05,
                inner_steps: 20,
            },
            checkpoints: None,
            manifests: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub text_hidden: usize,
    pub text_dropout: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            text_hidden: 64,
            text_dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomophilySection {
    pub radius: usize,
    /// Sampled episodes when no manifest is given.
    pub views: usize,
    /// Episode manifest to analyse instead of sampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Analyse the target graph instead of the training graph.
    pub on_target: bool,
}

impl Default for HomophilySection {
    fn default() -> Self {
        Self {
            radius: 2,
            views: 200,
            manifest: None,
            on_target: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Checks everything that does not depend on the graph.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        self.graph.validate(false)?;
        if let Some(t) = &self.target {
            t.validate(true)?;
            if t.shift.is_some() && self.synthetic_spec().is_none() {
                return Err(Error::Config("target.shift needs a synthetic training graph".into()));
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        let e = &self.evaluate;
        if e.k.is_empty() || e.k.contains(&0) {
            return Err(Error::Config("evaluate.k must list positive shot counts".into()));
        }
        if e.episodes == 0 {
            return Err(Error::Config("evaluate.episodes must be positive".into()));
        }
        for p in [Some(e.high), e.low].into_iter().flatten() {
            if !(p.inner_lr >= 0.0 && p.inner_lr.is_finite()) {
                return Err(Error::Config("inner_lr must be finite and non-negative".into()));
            }
        }
        if self.homophily.radius == 0 || self.homophily.views == 0 {
            return Err(Error::Config("homophily radius and views must be positive".into()));
        }
        if self.baselines.text_hidden == 0 || !(0.0..1.0).contains(&self.baselines.text_dropout) {
            return Err(Error::Config("baselines need text_hidden > 0 and text_dropout in [0, 1)".into()));
        }
        Ok(())
    }

    /// Adaptation profile for evaluation.
    pub fn profile(&self) -> AdaptProfile {
        match self.evaluate.adaptation {
            Adaptation::High => self.evaluate.high,
            Adaptation::Low => self.evaluate.low.unwrap_or(AdaptProfile {
                inner_lr: self.train.inner_lr,
                inner_steps: self.train.inner_steps,
            }),
        }
    }

    /// Module configs with the master seed applied.
    pub fn seeded(&self) -> (SamplerConfig, TrainConfig) {
        let sampler = SamplerConfig {
            seed: self.seed,
            ..self.sampler.clone()
        };
        let train = TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        };
        (sampler, train)
    }

    /// The training graph's synthetic spec, if it is synthetic.
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        self.graph.base_spec(self.seed)
    }

    pub fn load_graph(&self) -> Result<SocialGraph> {
        self.graph.load(self.seed, None)
    }

    /// The evaluation graph, if distinct from the training graph.
    pub fn load_target(&self) -> Result<Option<SocialGraph>> {
        match &self.target {
            Some(t) => t.load(self.seed, self.synthetic_spec()).map(Some),
            None => Ok(None),
        }
    }

    /// Target spec when the target is synthetic.
    pub fn target_spec(&self) -> Option<SyntheticSpec> {
        let t = self.target.as_ref()?;
        t.spec(self.seed, self.synthetic_spec())
    }
}

impl GraphSource {
    fn validate(&self, target: bool) -> Result<()> {
        let given = [
            self.preset.is_some(),
            self.synthetic.is_some(),
            self.files.is_some(),
            self.shift.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if given != 1 {
            return Err(Error::Config(
                "a graph needs exactly one of preset, synthetic, files or shift".into(),
            ));
        }
        if self.shift.is_some() && !target {
            return Err(Error::Config("shift is only valid for the target graph".into()));
        }
        if let Some(p) = &self.preset {
            if SyntheticSpec::preset(p).is_none() {
                return Err(Error::Config(format!(
                    "unknown preset {p:?} (gossipcop, coaid, hate_speech)"
                )));
            }
        }
        if let Some(s) = &self.spec(0, None) {
            s.validate()?;
        }
        Ok(())
    }

    fn base_spec(&self, seed: u64) -> Option<SyntheticSpec> {
        let mut spec = match (&self.preset, &self.synthetic) {
            (Some(p), _) => SyntheticSpec::preset(p)?,
            (None, Some(s)) => s.clone(),
            _ => return None,
        };
        spec.seed = seed;
        Some(spec)
    }

    fn spec(&self, seed: u64, base: Option<SyntheticSpec>) -> Option<SyntheticSpec> {
        if let Some(shift) = &self.shift {
            let base = base?;
            return Some(datagen::shift_domain(
                &base,
                shift.angle_degrees.to_radians(),
                shift.translation,
                shift.proportions.clone(),
            ));
        }
        self.base_spec(seed)
    }

    fn load(&self, seed: u64, base: Option<SyntheticSpec>) -> Result<SocialGraph> {
        let g = match (&self.files, self.spec(seed, base)) {
            (Some(f), _) => io::read_graph(&f.nodes, &f.edges, &f.features, f.num_classes)?,
            (None, Some(spec)) => datagen::generate(&spec)?,
            (None, None) => return Err(Error::Config("graph source cannot be resolved".into())),
        };
        if self.largest_component {
            Ok(g.largest_connected_component()?.0)
        } else {
            Ok(g)
        }
    }
}
