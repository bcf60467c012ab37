//! Synthetic stand-ins for the onboard and ground vision-language models,
//! and the task-specific similarity between answers.
//!
//! An oracle is correct with probability `p(d) * mass^gamma`, where
//! `p(d) = 1 / (1 + exp(k (d - d0)))` falls with sample difficulty and
//! `mass` is the share of attention that survived preprocessing. The
//! uniform draw deciding correctness is keyed by `(seed, sample id)` only,
//! so two oracles sharing a seed see common random numbers: whenever the
//! weaker one is right, the stronger one is too.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Sample, TaskAnswer, TaskKind};
use crate::embedding::{self, EncoderSpec};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub mod external;

/// Token ids at or above this value are "hesitant" variants.
pub const HESITANT_OFFSET: u32 = 2048;
pub const VOCAB_SIZE: u32 = 2 * HESITANT_OFFSET;
const HESITANT_BIAS: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleRole {
    Satellite,
    Ground,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputLengths {
    pub qa: usize,
    pub classification: usize,
    pub detection: usize,
}

impl Default for OutputLengths {
    fn default() -> Self {
        Self {
            qa: 24,
            classification: 4,
            detection: 16,
        }
    }
}

impl OutputLengths {
    pub fn get(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Qa => self.qa,
            TaskKind::Classification => self.classification,
            TaskKind::Detection => self.detection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub role: OracleRole,
    pub logistic_k: f64,
    pub logistic_d0: f64,
    pub tokens_per_second: f64,
    pub encode_latency_s: f64,
    #[serde(default)]
    pub output_length: OutputLengths,
    /// `gamma` in `mass^gamma`.
    pub degradation_exponent: f64,
    pub seed: u64,
    /// Horizontal offset of a wrong detection box (one region width).
    pub wrong_box_shift_px: f64,
    /// Per-token chance of a hesitant token when the answer is wrong.
    pub hesitation_on_error: f64,
    /// Per-token chance of a hesitant token when the answer is right.
    pub hesitation_on_success: f64,
}

impl OracleSpec {
    pub fn satellite() -> Self {
        Self {
            role: OracleRole::Satellite,
            logistic_k: 8.0,
            logistic_d0: 0.45,
            tokens_per_second: 6.0,
            encode_latency_s: 0.5,
            output_length: OutputLengths::default(),
            degradation_exponent: 0.5,
            seed: 41,
            wrong_box_shift_px: 32.0,
            hesitation_on_error: 0.7,
            hesitation_on_success: 0.15,
        }
    }

    pub fn ground() -> Self {
        Self {
            role: OracleRole::Ground,
            logistic_d0: 0.8,
            tokens_per_second: 40.0,
            encode_latency_s: 0.2,
            ..Self::satellite()
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, field: &str, msg: &str| {
            if !ok {
                errs.push(format!("{path}.{field} {msg}"));
            }
        };
        check(self.logistic_k.is_finite() && self.logistic_k >= 0.0, "logistic_k", "must be finite and >= 0");
        check(self.logistic_d0.is_finite(), "logistic_d0", "must be finite");
        check(
            self.tokens_per_second.is_finite() && self.tokens_per_second > 0.0,
            "tokens_per_second",
            "must be > 0",
        );
        check(
            self.encode_latency_s.is_finite() && self.encode_latency_s >= 0.0,
            "encode_latency_s",
            "must be >= 0",
        );
        for kind in TaskKind::ALL {
            check(
                self.output_length.get(kind) > 0,
                &format!("output_length.{}", kind.as_str()),
                "must be >= 1",
            );
        }
        check(
            self.degradation_exponent.is_finite() && self.degradation_exponent >= 0.0,
            "degradation_exponent",
            "must be >= 0",
        );
        check(self.wrong_box_shift_px > 0.0, "wrong_box_shift_px", "must be > 0");
        check((0.0..=1.0).contains(&self.hesitation_on_error), "hesitation_on_error", "must be in [0,1]");
        check((0.0..=1.0).contains(&self.hesitation_on_success), "hesitation_on_success", "must be in [0,1]");
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Correctness probability on an unfiltered image.
    pub fn base_accuracy(&self, difficulty: f64) -> f64 {
        1.0 / (1.0 + (self.logistic_k * (difficulty - self.logistic_d0)).exp())
    }

    pub fn success_probability(&self, difficulty: f64, retained_mass: f64) -> f64 {
        let mass = retained_mass.clamp(0.0, 1.0);
        let factor = if self.degradation_exponent == 0.0 {
            1.0
        } else {
            mass.powf(self.degradation_exponent)
        };
        self.base_accuracy(difficulty) * factor
    }

    /// Seconds to encode and emit `tokens` tokens.
    pub fn latency(&self, tokens: usize) -> f64 {
        self.encode_latency_s + tokens as f64 / self.tokens_per_second
    }
}

/// Checks that the onboard model is nowhere more accurate than the ground
/// model, on a 101-point difficulty grid.
pub fn validate_pair(satellite: &OracleSpec, ground: &OracleSpec) -> Result<()> {
    for i in 0..=100 {
        let d = i as f64 / 100.0;
        let (s, g) = (satellite.base_accuracy(d), ground.base_accuracy(d));
        if s > g {
            return Err(Error::Config(vec![format!(
                "oracles.satellite is more accurate than oracles.ground at difficulty {d} ({s:.4} > {g:.4})"
            )]));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub answer: TaskAnswer,
    pub correct: bool,
    pub tokens: Vec<u32>,
    pub latency_s: f64,
    pub answer_embedding: Vec<f64>,
}

/// Uniform draw shared by every oracle with this seed.
pub fn correctness_draw(seed: u64, sample_id: u64) -> f64 {
    rng::stream(seed, &[tag::ORACLE_DRAW, sample_id]).random::<f64>()
}

pub fn infer(spec: &OracleSpec, sample: &Sample, retained_mass: f64, encoder: &EncoderSpec) -> Result<OracleOutput> {
    if !(0.0..=1.0).contains(&retained_mass) {
        return Err(Error::invalid(format!("retained mass {retained_mass} outside [0,1]")));
    }
    let p = spec.success_probability(sample.difficulty, retained_mass);
    let correct = correctness_draw(spec.seed, sample.id) < p;
    let answer = if correct {
        sample.ground_truth.clone()
    } else {
        wrong_answer(&sample.ground_truth, spec.wrong_box_shift_px)
    };
    let len = spec.output_length.get(sample.task_kind());
    let hesitation = if correct {
        spec.hesitation_on_success
    } else {
        spec.hesitation_on_error
    };
    let tokens = render_tokens(&answer, len, hesitation, spec.seed, sample.id, encoder.seed);
    let answer_embedding = answer_embedding(&answer, encoder);
    Ok(OracleOutput {
        answer,
        correct,
        latency_s: spec.latency(len),
        tokens,
        answer_embedding,
    })
}

/// The deterministic wrong answer an oracle gives when it fails.
pub fn wrong_answer(truth: &TaskAnswer, box_shift_px: f64) -> TaskAnswer {
    match truth {
        TaskAnswer::Classification(label) => TaskAnswer::Classification(label.wrapping_add(1)),
        TaskAnswer::Detection(b) => TaskAnswer::Detection(b.translated(box_shift_px, 0.0)),
        TaskAnswer::Qa(tokens) => {
            let mut rng = rng::stream(answer_key(truth), &[tag::ANSWER]);
            let mut out = tokens.clone();
            for (i, t) in out.iter_mut().enumerate() {
                if i % 2 == 0 || tokens.len() == 1 {
                    let mut alt = rng.random_range(0..HESITANT_OFFSET);
                    if alt == *t {
                        alt = (alt + 1) % HESITANT_OFFSET;
                    }
                    *t = alt;
                }
            }
            if out.is_empty() {
                out.push(0);
            }
            TaskAnswer::Qa(out)
        }
    }
}

fn answer_key(answer: &TaskAnswer) -> u64 {
    match answer {
        TaskAnswer::Qa(tokens) => {
            let keys: Vec<u64> = tokens.iter().map(|&t| u64::from(t)).collect();
            rng::derive_seed(1, &keys)
        }
        TaskAnswer::Classification(label) => rng::derive_seed(2, &[u64::from(*label)]),
        TaskAnswer::Detection(b) => rng::derive_seed(
            3,
            &[b.x_min.to_bits(), b.y_min.to_bits(), b.x_max.to_bits(), b.y_max.to_bits()],
        ),
    }
}

/// Output tokens spelling `answer`, `len` long. Each position is swapped
/// for its hesitant variant with probability `hesitation`.
pub fn render_tokens(answer: &TaskAnswer, len: usize, hesitation: f64, oracle_seed: u64, sample_id: u64, vocab_seed: u64) -> Vec<u32> {
    let base: Vec<u32> = match answer {
        TaskAnswer::Qa(t) if !t.is_empty() => t.iter().map(|x| x % HESITANT_OFFSET).collect(),
        _ => {
            let mut rng = rng::stream(vocab_seed, &[tag::ANSWER, answer_key(answer)]);
            (0..len.max(1)).map(|_| rng.random_range(0..HESITANT_OFFSET)).collect()
        }
    };
    let mut rng = rng::stream(oracle_seed, &[tag::ORACLE_TOKENS, sample_id]);
    (0..len)
        .map(|i| {
            let t = base[i % base.len()];
            if rng.random::<f64>() < hesitation {
                t + HESITANT_OFFSET
            } else {
                t
            }
        })
        .collect()
}

pub fn is_hesitant(token: u32) -> bool {
    token >= HESITANT_OFFSET
}

/// Mean embedding of a token block; zeros for an empty block. Hesitant
/// tokens share a common bias direction.
pub fn token_features(tokens: &[u32], dim: usize, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    if tokens.is_empty() {
        return out;
    }
    let bias = embedding::unit_gaussian(dim, seed, &[tag::TOKEN_TABLE, u64::MAX]);
    for &t in tokens {
        let mut e = embedding::token_embedding(t % HESITANT_OFFSET, dim, seed);
        if is_hesitant(t) {
            e.iter_mut().zip(&bias).for_each(|(x, b)| *x += HESITANT_BIAS * b);
            embedding::normalize_in_place(&mut e);
        }
        out.iter_mut().zip(&e).for_each(|(o, x)| *o += x);
    }
    let n = tokens.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Deterministic unit embedding of an answer in the encoder's space.
pub fn answer_embedding(answer: &TaskAnswer, encoder: &EncoderSpec) -> Vec<f64> {
    let dim = encoder.embedding_dim;
    match answer {
        TaskAnswer::Qa(tokens) if !tokens.is_empty() => {
            let mut sum = vec![0.0; dim];
            for &t in tokens {
                let e = embedding::token_embedding(t, dim, encoder.seed);
                sum.iter_mut().zip(&e).for_each(|(s, x)| *s += x);
            }
            if embedding::normalize_in_place(&mut sum) {
                sum
            } else {
                embedding::unit_gaussian(dim, encoder.seed, &[tag::ANSWER, answer_key(answer)])
            }
        }
        _ => embedding::unit_gaussian(dim, encoder.seed, &[tag::ANSWER, answer_key(answer)]),
    }
}

/// Task-specific similarity in [0, 1]: label equality, box IoU, or the
/// cosine of answer embeddings mapped through `(1 + cos) / 2`.
pub fn simi(a: &TaskAnswer, b: &TaskAnswer, encoder: &EncoderSpec) -> Result<f64> {
    match (a, b) {
        (TaskAnswer::Classification(x), TaskAnswer::Classification(y)) => Ok(if x == y { 1.0 } else { 0.0 }),
        (TaskAnswer::Detection(x), TaskAnswer::Detection(y)) => Ok(x.iou(y)),
        (TaskAnswer::Qa(_), TaskAnswer::Qa(_)) => {
            if a == b {
                return Ok(1.0);
            }
            let c = embedding::cosine(&answer_embedding(a, encoder), &answer_embedding(b, encoder))?;
            Ok(((1.0 + c) / 2.0).clamp(0.0, 1.0))
        }
        _ => Err(Error::invalid(format!(
            "cannot compare a {} answer with a {} answer",
            a.kind().as_str(),
            b.kind().as_str()
        ))),
    }
}
