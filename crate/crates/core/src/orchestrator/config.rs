use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::confidence::{NetConfig, TrainConfig};
use crate::constellation::ConstellationSpec;
use crate::domain::ByteModel;
use crate::embedding::EncoderSpec;
use crate::error::{Error, Result};
use crate::link::LinkSpec;
use crate::models::{self, OracleSpec};
use crate::preprocess::PreprocessConfig;

pub const CONFIG_VERSION: u32 = 1;

/// How offload decisions are made.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub enum Policy {
    /// Progressive confidence checks with early offload.
    Progressive,
    SatelliteOnly,
    GroundOnly,
    /// Full onboard generation, then one confidence check on the output.
    ConfidenceAfterFullInference,
    /// Offloads each sample with the given probability, before generation.
    RandomOffload { fraction: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRepr {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fraction: Option<f64>,
}

impl TryFrom<PolicyRepr> for Policy {
    type Error = String;

    fn try_from(r: PolicyRepr) -> std::result::Result<Self, String> {
        let policy = match r.kind.as_str() {
            "progressive" => Policy::Progressive,
            "satellite_only" => Policy::SatelliteOnly,
            "ground_only" => Policy::GroundOnly,
            "confidence_after_full_inference" => Policy::ConfidenceAfterFullInference,
            "random_offload" => {
                let fraction = r.fraction.ok_or("policy.fraction is required for random_offload")?;
                return Ok(Policy::RandomOffload { fraction });
            }
            other => return Err(format!("unknown policy.kind {other:?}")),
        };
        match r.fraction {
            Some(_) => Err(format!("policy.fraction is not used by {}", r.kind)),
            None => Ok(policy),
        }
    }
}

impl From<Policy> for PolicyRepr {
    fn from(p: Policy) -> Self {
        let fraction = match p {
            Policy::RandomOffload { fraction } => Some(fraction),
            _ => None,
        };
        PolicyRepr {
            kind: p.name().to_string(),
            fraction,
        }
    }
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Progressive => "progressive",
            Policy::SatelliteOnly => "satellite_only",
            Policy::GroundOnly => "ground_only",
            Policy::ConfidenceAfterFullInference => "confidence_after_full_inference",
            Policy::RandomOffload { .. } => "random_offload",
        }
    }

    pub fn needs_net(&self) -> bool {
        matches!(self, Policy::Progressive | Policy::ConfidenceAfterFullInference)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DifficultyDistribution {
    Uniform { min: f64, max: f64 },
    Beta { a: f64, b: f64 },
    Fixed { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub qa: f64,
    pub classification: f64,
    pub detection: f64,
}

impl TaskMix {
    pub fn only_detection() -> Self {
        Self {
            qa: 0.0,
            classification: 0.0,
            detection: 1.0,
        }
    }
}

/// Synthetic workload description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleGenSpec {
    pub count: usize,
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub difficulty: DifficultyDistribution,
    pub task_mix: TaskMix,
    pub num_classes: u32,
    pub qa_answer_tokens: usize,
    /// Side of the target box, in region widths.
    pub target_size_min: f64,
    pub target_size_max: f64,
    /// Relevance of a region barely touching the target; full overlap
    /// gives 1.
    pub relevance_floor: f64,
    /// Upper end of the uniform relevance of regions off the target.
    pub background_relevance_max: f64,
    pub relevance_jitter: f64,
}

impl Default for SampleGenSpec {
    fn default() -> Self {
        Self {
            count: 1000,
            seed: 7,
            image_height: 320,
            image_width: 320,
            difficulty: DifficultyDistribution::Uniform { min: 0.0, max: 1.0 },
            task_mix: TaskMix {
                qa: 1.0,
                classification: 1.0,
                detection: 1.0,
            },
            num_classes: 10,
            qa_answer_tokens: 6,
            target_size_min: 2.0,
            target_size_max: 5.0,
            relevance_floor: 0.3,
            background_relevance_max: 0.0,
            relevance_jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArrivalRepr", into = "ArrivalRepr")]
pub enum Arrival {
    /// Every sample is available at t = 0.
    Batch,
    /// Exponential inter-arrival gaps per satellite.
    Poisson { rate_per_s: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrivalRepr {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate_per_s: Option<f64>,
}

impl TryFrom<ArrivalRepr> for Arrival {
    type Error = String;

    fn try_from(r: ArrivalRepr) -> std::result::Result<Self, String> {
        match (r.kind.as_str(), r.rate_per_s) {
            ("batch", None) => Ok(Arrival::Batch),
            ("poisson", Some(rate_per_s)) => Ok(Arrival::Poisson { rate_per_s }),
            ("batch", Some(_)) => Err("run.arrival.rate_per_s is not used by batch arrivals".into()),
            ("poisson", None) => Err("run.arrival.rate_per_s is required for poisson arrivals".into()),
            (other, _) => Err(format!("unknown run.arrival.kind {other:?}")),
        }
    }
}

impl From<Arrival> for ArrivalRepr {
    fn from(a: Arrival) -> Self {
        match a {
            Arrival::Batch => ArrivalRepr {
                kind: "batch".into(),
                rate_per_s: None,
            },
            Arrival::Poisson { rate_per_s } => ArrivalRepr {
                kind: "poisson".into(),
                rate_per_s: Some(rate_per_s),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Trained network file. Without one, a network is trained on a
    /// separate split before the run.
    pub net_path: Option<PathBuf>,
    pub training_samples: usize,
    pub confidence_eval_s: f64,
    /// Apply the attention filter before every downlink.
    pub filter_offloads: bool,
    pub arrival: Arrival,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            net_path: None,
            training_samples: 600,
            confidence_eval_s: 1e-3,
            filter_offloads: true,
            arrival: Arrival::Batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub satellite: OracleSpec,
    pub ground: OracleSpec,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            satellite: OracleSpec::satellite(),
            ground: OracleSpec::ground(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "current_version")]
    pub version: u32,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub samples: SampleGenSpec,
    #[serde(default)]
    pub constellation: ConstellationSpec,
    #[serde(default)]
    pub link: LinkSpec,
    #[serde(default)]
    pub bytes: ByteModel,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub confidence: NetConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub oracles: OracleSection,
}

fn current_version() -> u32 {
    CONFIG_VERSION
}

fn default_policy() -> Policy {
    Policy::Progressive
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            policy: default_policy(),
            run: RunSection::default(),
            samples: SampleGenSpec::default(),
            constellation: ConstellationSpec::default(),
            link: LinkSpec::default(),
            bytes: ByteModel::default(),
            encoder: EncoderSpec::default(),
            preprocess: PreprocessConfig::default(),
            confidence: NetConfig::default(),
            training: TrainConfig::default(),
            oracles: OracleSection::default(),
        }
    }
}

fn collect(errs: &mut Vec<String>, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(e)) => errs.extend(e),
        Err(other) => errs.push(other.to_string()),
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msgs) => Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    /// Every field, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Checks every section and reports all problems at once, each
    /// prefixed with its field path.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.version != CONFIG_VERSION {
            errs.push(format!("version must be {CONFIG_VERSION} (got {})", self.version));
        }
        if let Policy::RandomOffload { fraction } = self.policy {
            if !(0.0..=1.0).contains(&fraction) {
                errs.push(format!("policy.fraction must be in [0,1] (got {fraction})"));
            }
        }
        collect(&mut errs, self.constellation.validate());
        collect(&mut errs, self.link.validate());
        collect(&mut errs, self.encoder.validate());
        collect(&mut errs, self.preprocess.validate());
        collect(&mut errs, self.confidence.validate());
        collect(&mut errs, self.training.validate());
        collect(&mut errs, self.oracles.satellite.validate("oracles.satellite"));
        collect(&mut errs, self.oracles.ground.validate("oracles.ground"));
        if errs.is_empty() {
            collect(&mut errs, models::validate_pair(&self.oracles.satellite, &self.oracles.ground));
        }
        if self.confidence.image_dim != self.encoder.embedding_dim {
            errs.push(format!(
                "confidence.image_dim ({}) must equal encoder.embedding_dim ({})",
                self.confidence.image_dim, self.encoder.embedding_dim
            ));
        }
        if self.bytes.bytes_per_pixel == 0 {
            errs.push("bytes.bytes_per_pixel must be >= 1".to_string());
        }
        let s = &self.samples;
        if s.image_height == 0 || s.image_width == 0 {
            errs.push("samples.image_height/image_width must be >= 1".to_string());
        }
        match s.difficulty {
            DifficultyDistribution::Uniform { min, max } if !(0.0 <= min && min <= max && max <= 1.0) => {
                errs.push(format!("samples.difficulty must satisfy 0 <= min <= max <= 1 (got {min}, {max})"));
            }
            DifficultyDistribution::Beta { a, b } if !(a > 0.0 && b > 0.0) => {
                errs.push(format!("samples.difficulty.a/b must be > 0 (got {a}, {b})"));
            }
            DifficultyDistribution::Fixed { value } if !(0.0..=1.0).contains(&value) => {
                errs.push(format!("samples.difficulty.value must be in [0,1] (got {value})"));
            }
            _ => {}
        }
        let m = &s.task_mix;
        if [m.qa, m.classification, m.detection].iter().any(|w| !(*w >= 0.0)) || m.qa + m.classification + m.detection <= 0.0 {
            errs.push("samples.task_mix weights must be >= 0 with a positive sum".to_string());
        }
        if s.num_classes < 2 {
            errs.push("samples.num_classes must be >= 2".to_string());
        }
        if s.qa_answer_tokens == 0 {
            errs.push("samples.qa_answer_tokens must be >= 1".to_string());
        }
        if !(s.target_size_min > 0.0 && s.target_size_min <= s.target_size_max) {
            errs.push("samples.target_size_min/max must satisfy 0 < min <= max".to_string());
        }
        for (name, v) in [
            ("relevance_floor", s.relevance_floor),
            ("background_relevance_max", s.background_relevance_max),
            ("relevance_jitter", s.relevance_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("samples.{name} must be in [0,1] (got {v})"));
            }
        }
        if !(self.run.confidence_eval_s >= 0.0 && self.run.confidence_eval_s.is_finite()) {
            errs.push("run.confidence_eval_s must be >= 0".to_string());
        }
        if self.policy.needs_net() && self.run.net_path.is_none() && self.run.training_samples == 0 {
            errs.push("run.training_samples must be >= 1 when no run.net_path is given".to_string());
        }
        if let Arrival::Poisson { rate_per_s } = self.run.arrival {
            if !(rate_per_s > 0.0 && rate_per_s.is_finite()) {
                errs.push(format!("run.arrival.rate_per_s must be > 0 (got {rate_per_s})"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Replaces the workload seed; the training split follows it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.samples.seed = seed;
        self
    }
}
