//! End-to-end simulation: per-sample confidence checks, early offload,
//! attention filtering, contact-window-constrained downlink and ground
//! inference, on one clock per satellite.
//!
//! Work is split in two phases. [`Pipeline::analyze`] computes everything
//! about a sample that does not depend on the policy or on timing (features,
//! attention, filtered payload, both oracle outputs). [`Pipeline::simulate`]
//! then replays a policy over those analyses against the satellite clocks
//! and downlink queues, so several policies can share one analysis pass.

use std::sync::Arc;
use std::thread;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{self, ConfidenceDecision, ProgressiveConfidenceNet, StageInput, TrainingRecord};
use crate::constellation::ContactWindow;
use crate::domain::{partition_image, ByteSize, Sample, TaskAnswer, TaskKind};
use crate::embedding::{self, EncoderSpec, TokenMatrix};
use crate::error::{Error, Result};
use crate::link::{schedule_transmission, QueueState};
use crate::models::{self, OracleOutput};
use crate::preprocess::{apply_filter, RegionAttentionMap};
use crate::rng::{self, tag};

pub mod config;
pub mod experiments;
pub mod metrics;
pub mod samples;

pub use config::{Arrival, Policy, ScenarioConfig};
pub use metrics::{ScenarioMetrics, SampleTrace};
use samples::SampleGenerator;

/// What the downlink would carry if the sample were offloaded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffloadPayload {
    pub bytes: ByteSize,
    pub original_bytes: ByteSize,
    pub retained_mass: f64,
}

impl OffloadPayload {
    pub fn compression_ratio(&self) -> f64 {
        if self.original_bytes.0 == 0 {
            1.0
        } else {
            self.bytes.0 as f64 / self.original_bytes.0 as f64
        }
    }
}

/// Policy-independent facts about one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAnalysis {
    pub id: u64,
    pub task: TaskKind,
    pub difficulty: f64,
    pub ground_truth: TaskAnswer,
    pub image_features: Vec<f64>,
    pub region_scores: Vec<f64>,
    pub payload: OffloadPayload,
    pub satellite: OracleOutput,
    pub ground: OracleOutput,
    pub satellite_simi: f64,
    pub ground_simi: f64,
    /// Inputs of every confidence stage, from the onboard output.
    pub stage_inputs: Vec<StageInput>,
}

impl SampleAnalysis {
    /// Onboard/ground agreement the confidence net is trained to predict:
    /// the cosine of the two answer embeddings, clamped to [0, 1].
    pub fn agreement_target(&self) -> Result<f64> {
        Ok(confidence::similarity_target(&self.satellite.answer_embedding, &self.ground.answer_embedding)?.clamp(0.0, 1.0))
    }

    pub fn training_record(&self) -> Result<TrainingRecord> {
        Ok(TrainingRecord {
            stages: self.stage_inputs.clone(),
            target: self.agreement_target()?,
        })
    }
}

/// Tokens the onboard model must have produced before stage `stage`
/// (1-based) of `stages` is evaluated.
pub fn stage_tokens(stage: usize, stages: usize, token_block: usize, output_len: usize) -> usize {
    if stage <= 1 {
        0
    } else if stage >= stages {
        output_len
    } else {
        ((stage - 1) * token_block).min(output_len)
    }
}

/// Stage inputs from pooled image features and the full onboard output.
/// Block `j` of the last stage is the whole output; earlier blocks hold
/// `token_block` tokens each.
pub fn build_stage_inputs(
    image_features: &[f64],
    tokens: &[u32],
    stages: usize,
    token_block: usize,
    token_dim: usize,
    vocab_seed: u64,
) -> Vec<StageInput> {
    let block = |j: usize| -> Vec<f64> {
        let slice = if j + 1 == stages {
            tokens
        } else {
            let lo = ((j - 1) * token_block).min(tokens.len());
            let hi = (j * token_block).min(tokens.len());
            &tokens[lo..hi]
        };
        models::token_features(slice, token_dim, vocab_seed)
    };
    (1..=stages)
        .map(|i| StageInput {
            image_features: image_features.to_vec(),
            token_blocks: (1..i).map(block).collect(),
        })
        .collect()
}

/// Runs `f` over `items` on all cores; output order follows input order.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Mutable per-satellite simulation state.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SatelliteState {
    /// When the onboard processor is next idle.
    pub compute_free_s: f64,
    pub queue: QueueState,
}

/// A validated scenario with everything precomputed that runs share.
pub struct Pipeline {
    config: ScenarioConfig,
    generator: Arc<SampleGenerator>,
    encoder: EncoderSpec,
    windows: Vec<Vec<ContactWindow>>,
}

impl Pipeline {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let windows = (0..config.constellation.satellites.len())
            .map(|i| config.constellation.satellite_windows(i))
            .collect::<Result<Vec<_>>>()?;
        Self::with_windows(config, windows)
    }

    /// Like [`Pipeline::new`] but with given contact windows, one list per
    /// configured satellite, instead of propagated ones.
    pub fn with_windows(config: ScenarioConfig, windows: Vec<Vec<ContactWindow>>) -> Result<Self> {
        config.validate()?;
        if windows.len() != config.constellation.satellites.len() {
            return Err(Error::invalid(format!(
                "{} window lists for {} satellites",
                windows.len(),
                config.constellation.satellites.len()
            )));
        }
        let generator = Arc::new(SampleGenerator::new(
            config.samples.clone(),
            config.preprocess.region_height,
            config.preprocess.region_width,
        ));
        let mut encoder = config.encoder.clone();
        encoder.relevance_injection = generator.injection();
        Ok(Self {
            config,
            generator,
            encoder,
            windows,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn generator(&self) -> &SampleGenerator {
        &self.generator
    }

    pub fn encoder(&self) -> &EncoderSpec {
        &self.encoder
    }

    /// Merged contact windows of each satellite.
    pub fn windows(&self) -> &[Vec<ContactWindow>] {
        &self.windows
    }

    /// Attention score of every region, and the mean-pooled image tokens.
    pub fn encode(&self, sample: &Sample) -> Result<(crate::domain::RegionGrid, Vec<f64>, Vec<f64>)> {
        let pre = &self.config.preprocess;
        let grid = partition_image(&sample.image, pre.region_height, pre.region_width)?;
        let text = embedding::encode_prompt(&sample.prompt, &self.encoder)?;
        let mut scores = Vec::with_capacity(grid.len());
        let mut tokens: Vec<TokenMatrix> = Vec::with_capacity(grid.len());
        for (idx, region) in grid.regions.iter().enumerate() {
            let t = embedding::encode_region(region, &sample.prompt, &self.encoder, sample.id, idx)?;
            scores.push(embedding::attention_score(&t, &text, pre.normalize_attention)?);
            tokens.push(t);
        }
        let features = embedding::mean_pool(&tokens, self.encoder.embedding_dim);
        Ok((grid, scores, features))
    }

    pub fn analyze(&self, sample: &Sample) -> Result<SampleAnalysis> {
        let cfg = &self.config;
        let (grid, scores, features) = self.encode(sample)?;
        let payload = if cfg.run.filter_offloads {
            let map = RegionAttentionMap::from_scores(scores.clone(), &cfg.preprocess);
            let f = apply_filter(&grid, &map, &cfg.bytes)?;
            OffloadPayload {
                bytes: f.total_bytes,
                original_bytes: f.original_bytes,
                retained_mass: f.retained_attention_mass,
            }
        } else {
            let b = cfg.bytes.grid_bytes(&grid);
            OffloadPayload {
                bytes: b,
                original_bytes: b,
                retained_mass: 1.0,
            }
        };
        let satellite = models::infer(&cfg.oracles.satellite, sample, 1.0, &self.encoder)?;
        let ground = models::infer(&cfg.oracles.ground, sample, payload.retained_mass, &self.encoder)?;
        let stage_inputs = build_stage_inputs(
            &features,
            &satellite.tokens,
            cfg.confidence.stages,
            cfg.confidence.token_block,
            cfg.confidence.token_embed_dim,
            self.encoder.seed,
        );
        Ok(SampleAnalysis {
            id: sample.id,
            task: sample.task_kind(),
            difficulty: sample.difficulty,
            satellite_simi: models::simi(&satellite.answer, &sample.ground_truth, &self.encoder)?,
            ground_simi: models::simi(&ground.answer, &sample.ground_truth, &self.encoder)?,
            ground_truth: sample.ground_truth.clone(),
            image_features: features,
            region_scores: scores,
            payload,
            satellite,
            ground,
            stage_inputs,
        })
    }

    pub fn analyze_ids(&self, ids: &[u64]) -> Result<Vec<SampleAnalysis>> {
        par_map(ids, |&id| self.analyze(&self.generator.sample(id)?))
    }

    pub fn analyze_evaluation_split(&self) -> Result<Vec<SampleAnalysis>> {
        let ids: Vec<u64> = self.generator.evaluation_ids().collect();
        self.analyze_ids(&ids)
    }

    pub fn training_records(&self, n: usize) -> Result<Vec<TrainingRecord>> {
        let ids: Vec<u64> = self.generator.training_ids(n).collect();
        self.analyze_ids(&ids)?
            .iter()
            .map(SampleAnalysis::training_record)
            .collect()
    }

    /// Trains a fresh network on the training split.
    pub fn train_net(&self) -> Result<(ProgressiveConfidenceNet, Vec<f64>)> {
        let records = self.training_records(self.config.run.training_samples)?;
        let net = ProgressiveConfidenceNet::new(self.config.confidence.clone())?;
        confidence::train(&net, &records, &self.config.training)
    }

    /// The configured network file with the configured thresholds, or a
    /// freshly trained one.
    pub fn load_or_train_net(&self) -> Result<ProgressiveConfidenceNet> {
        match &self.config.run.net_path {
            Some(path) => {
                let mut net = ProgressiveConfidenceNet::load(path)?;
                let (have, want) = (net.config(), &self.config.confidence);
                if have.stages != want.stages
                    || have.image_dim != want.image_dim
                    || have.token_embed_dim != want.token_embed_dim
                {
                    return Err(Error::Config(vec![format!(
                        "run.net_path: {} has {} stages, image_dim {}, token_embed_dim {}; confidence section expects {}, {}, {}",
                        path.display(),
                        have.stages,
                        have.image_dim,
                        have.token_embed_dim,
                        want.stages,
                        want.image_dim,
                        want.token_embed_dim
                    )]));
                }
                net.set_thresholds(want.thresholds.clone())?;
                Ok(net)
            }
            None => Ok(self.train_net()?.0),
        }
    }

    fn arrival_times(&self, sat: usize, count: usize) -> Vec<f64> {
        match self.config.run.arrival {
            Arrival::Batch => vec![0.0; count],
            Arrival::Poisson { rate_per_s } => {
                let mut rng = rng::stream(self.config.samples.seed, &[tag::ARRIVAL, sat as u64]);
                let mut t = 0.0;
                (0..count)
                    .map(|_| {
                        let u: f64 = rng.random();
                        t += -(1.0 - u).ln() / rate_per_s;
                        t
                    })
                    .collect()
            }
        }
    }

    /// Replays `policy` over analysed samples. Sample `k` goes to satellite
    /// `k mod n`; each satellite handles its samples in order.
    pub fn simulate(
        &self,
        policy: Policy,
        analyses: &[SampleAnalysis],
        net: Option<&ProgressiveConfidenceNet>,
    ) -> Result<Vec<SampleTrace>> {
        if policy.needs_net() && net.is_none() {
            return Err(Error::invalid(format!("policy {} needs a confidence network", policy.name())));
        }
        let n_sat = self.windows.len();
        let mut states = vec![SatelliteState::default(); n_sat];
        let arrivals: Vec<Vec<f64>> = (0..n_sat)
            .map(|s| self.arrival_times(s, analyses.len().div_ceil(n_sat)))
            .collect();
        analyses
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let sat = k % n_sat;
                let arrival = arrivals[sat][k / n_sat];
                self.run_sample(policy, a, net, sat, arrival, &mut states[sat])
            })
            .collect()
    }

    /// One sample through `policy` on satellite `sat`, starting when both
    /// the sample has arrived and the onboard processor is idle.
    pub fn run_sample(
        &self,
        policy: Policy,
        a: &SampleAnalysis,
        net: Option<&ProgressiveConfidenceNet>,
        sat: usize,
        arrival_s: f64,
        state: &mut SatelliteState,
    ) -> Result<SampleTrace> {
        let cfg = &self.config;
        let sat_spec = &cfg.oracles.satellite;
        let stages = cfg.confidence.stages;
        let full_len = a.satellite.tokens.len();
        let start = arrival_s.max(state.compute_free_s);
        let mut trace = SampleTrace::new(a, cfg.constellation.satellites[sat].id.clone(), arrival_s, start, stages);

        let encodes = !matches!(policy, Policy::GroundOnly) || cfg.run.filter_offloads;
        trace.latency.onboard_encode_s = if encodes { sat_spec.encode_latency_s } else { 0.0 };

        let thresholds = net.map(|n| n.thresholds().to_vec()).unwrap_or_default();
        let mut offload_stage = None;
        let mut generated = 0usize;
        let mut evals = 0usize;
        let mut check = |stage: usize, trace: &mut SampleTrace| -> Result<bool> {
            let net = net.expect("checked above");
            let tau = thresholds[stage - 1];
            if tau.is_infinite() {
                return Ok(tau > 0.0);
            }
            evals += 1;
            let score = net.estimate(stage, &a.stage_inputs[stage - 1])?;
            trace.stage_scores[stage - 1] = Some(score);
            Ok(matches!(confidence::decide(&thresholds, stage, score), ConfidenceDecision::Offload { .. }))
        };

        match policy {
            Policy::SatelliteOnly => generated = full_len,
            Policy::GroundOnly => offload_stage = Some(1),
            Policy::RandomOffload { fraction } => {
                let u: f64 = rng::stream(cfg.samples.seed, &[tag::OFFLOAD, a.id]).random();
                if u < fraction {
                    offload_stage = Some(1);
                } else {
                    generated = full_len;
                }
            }
            Policy::ConfidenceAfterFullInference => {
                generated = full_len;
                if check(stages, &mut trace)? {
                    offload_stage = Some(stages);
                }
            }
            Policy::Progressive => {
                for stage in 1..=stages {
                    generated = stage_tokens(stage, stages, cfg.confidence.token_block, full_len);
                    if check(stage, &mut trace)? {
                        offload_stage = Some(stage);
                        break;
                    }
                }
            }
        }

        trace.onboard_tokens = generated;
        trace.offload_stage = offload_stage;
        trace.latency.onboard_generation_s = generated as f64 / sat_spec.tokens_per_second;
        trace.latency.confidence_eval_s = evals as f64 * cfg.run.confidence_eval_s;
        let onboard_done = start + trace.latency.onboard_encode_s + trace.latency.onboard_generation_s + trace.latency.confidence_eval_s;
        state.compute_free_s = onboard_done;

        if offload_stage.is_none() {
            trace.outcome = metrics::Outcome::Onboard;
            trace.answer = Some(a.satellite.answer.clone());
            trace.simi = Some(a.satellite_simi);
            trace.completion_s = onboard_done;
            return Ok(trace);
        }

        trace.bytes_transmitted = a.payload.bytes.0;
        trace.compression_ratio = Some(a.payload.compression_ratio());
        trace.retained_mass = Some(a.payload.retained_mass);
        match schedule_transmission(a.payload.bytes, onboard_done, &self.windows[sat], &cfg.link, &mut state.queue) {
            Ok(rec) => {
                trace.latency.transmission_s = rec.complete_s - onboard_done;
                trace.latency.ground_inference_s = a.ground.latency_s;
                trace.completion_s = rec.complete_s + a.ground.latency_s;
                trace.outcome = metrics::Outcome::Ground;
                trace.answer = Some(a.ground.answer.clone());
                trace.simi = Some(a.ground_simi);
            }
            Err(Error::HorizonExceeded { .. }) => {
                trace.outcome = metrics::Outcome::Incomplete;
                trace.completion_s = f64::NAN;
            }
            Err(e) => return Err(e),
        }
        Ok(trace)
    }
}

/// Traces and summary of one scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub metrics: ScenarioMetrics,
    pub traces: Vec<SampleTrace>,
}

/// Validates `config`, prepares a network when the policy needs one, and
/// runs every evaluation sample.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioReport> {
    let pipeline = Pipeline::new(config.clone())?;
    let net = if config.policy.needs_net() {
        Some(pipeline.load_or_train_net()?)
    } else {
        None
    };
    let analyses = pipeline.analyze_evaluation_split()?;
    let traces = pipeline.simulate(config.policy, &analyses, net.as_ref())?;
    Ok(ScenarioReport {
        metrics: ScenarioMetrics::from_traces(config.policy.name(), &traces),
        traces,
    })
}
