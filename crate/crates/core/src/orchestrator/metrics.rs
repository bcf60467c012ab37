use std::io::Write;

use serde::{Deserialize, Serialize};

use super::SampleAnalysis;
use crate::domain::{TaskAnswer, TaskKind};
use crate::error::{Error, Result};
use crate::models::external::format_answer;

pub const METRICS_VERSION: u32 = 1;

/// Column order of `traces.csv`.
pub const TRACE_COLUMNS: [&str; 22] = [
    "sample_id",
    "satellite",
    "task",
    "difficulty",
    "outcome",
    "offload_stage",
    "stage_scores",
    "onboard_tokens",
    "bytes_transmitted",
    "compression_ratio",
    "retained_mass",
    "arrival_s",
    "start_s",
    "completion_s",
    "onboard_encode_s",
    "onboard_generation_s",
    "confidence_eval_s",
    "transmission_s",
    "ground_inference_s",
    "total_latency_s",
    "simi",
    "answer",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Onboard,
    Ground,
    /// The downlink ran out of contact windows.
    Incomplete,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Onboard => "onboard",
            Outcome::Ground => "ground",
            Outcome::Incomplete => "incomplete",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub onboard_encode_s: f64,
    pub onboard_generation_s: f64,
    pub confidence_eval_s: f64,
    /// Waiting for the link (queue and window gaps) plus air time.
    pub transmission_s: f64,
    pub ground_inference_s: f64,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.onboard_encode_s + self.onboard_generation_s + self.confidence_eval_s + self.transmission_s + self.ground_inference_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub sample_id: u64,
    pub satellite: String,
    pub task: TaskKind,
    pub difficulty: f64,
    pub outcome: Outcome,
    pub offload_stage: Option<usize>,
    /// `None` where a stage was not evaluated.
    pub stage_scores: Vec<Option<f64>>,
    pub onboard_tokens: usize,
    pub bytes_transmitted: u64,
    pub compression_ratio: Option<f64>,
    pub retained_mass: Option<f64>,
    pub arrival_s: f64,
    pub start_s: f64,
    pub completion_s: f64,
    pub latency: LatencyBreakdown,
    pub answer: Option<TaskAnswer>,
    pub simi: Option<f64>,
}

impl SampleTrace {
    pub(crate) fn new(a: &SampleAnalysis, satellite: String, arrival_s: f64, start_s: f64, stages: usize) -> Self {
        Self {
            sample_id: a.id,
            satellite,
            task: a.task,
            difficulty: a.difficulty,
            outcome: Outcome::Onboard,
            offload_stage: None,
            stage_scores: vec![None; stages],
            onboard_tokens: 0,
            bytes_transmitted: 0,
            compression_ratio: None,
            retained_mass: None,
            arrival_s,
            start_s,
            completion_s: start_s,
            latency: LatencyBreakdown::default(),
            answer: None,
            simi: None,
        }
    }

    /// Sum of the latency components; `None` for incomplete samples.
    pub fn total_latency(&self) -> Option<f64> {
        (self.outcome != Outcome::Incomplete).then(|| self.latency.total())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyShares {
    pub onboard_encode: f64,
    pub onboard_generation: f64,
    pub confidence_eval: f64,
    pub transmission: f64,
    pub ground_inference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub version: u32,
    pub policy: String,
    pub samples: usize,
    pub completed: usize,
    pub onboard_answered: usize,
    pub ground_answered: usize,
    pub incomplete: usize,
    /// Ground-answered share of completed samples.
    pub offload_fraction: f64,
    pub mean_latency_s: Option<f64>,
    pub p50_latency_s: Option<f64>,
    pub p90_latency_s: Option<f64>,
    pub p99_latency_s: Option<f64>,
    pub mean_simi: Option<f64>,
    pub mean_onboard_tokens: Option<f64>,
    /// Over ground-answered samples.
    pub mean_compression_ratio: Option<f64>,
    pub mean_retained_mass: Option<f64>,
    pub mean_bytes_transmitted: Option<f64>,
    pub latency_shares: LatencyShares,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

impl ScenarioMetrics {
    pub fn from_traces(policy: &str, traces: &[SampleTrace]) -> Self {
        let done: Vec<&SampleTrace> = traces.iter().filter(|t| t.outcome != Outcome::Incomplete).collect();
        let count = |o: Outcome| traces.iter().filter(|t| t.outcome == o).count();
        let (onboard, ground, incomplete) = (count(Outcome::Onboard), count(Outcome::Ground), count(Outcome::Incomplete));
        let mut lat: Vec<f64> = done.iter().map(|t| t.latency.total()).collect();
        let mean_latency = mean(lat.iter().copied());
        lat.sort_by(f64::total_cmp);
        let offloaded = || done.iter().filter(|t| t.outcome == Outcome::Ground);

        let sum = |f: fn(&LatencyBreakdown) -> f64| done.iter().map(|t| f(&t.latency)).sum::<f64>();
        let parts = [
            sum(|l| l.onboard_encode_s),
            sum(|l| l.onboard_generation_s),
            sum(|l| l.confidence_eval_s),
            sum(|l| l.transmission_s),
            sum(|l| l.ground_inference_s),
        ];
        let total: f64 = parts.iter().sum();
        let share = |x: f64| if total > 0.0 { x / total } else { 0.0 };

        Self {
            version: METRICS_VERSION,
            policy: policy.to_string(),
            samples: traces.len(),
            completed: done.len(),
            onboard_answered: onboard,
            ground_answered: ground,
            incomplete,
            offload_fraction: if done.is_empty() { 0.0 } else { ground as f64 / done.len() as f64 },
            mean_latency_s: mean_latency,
            p50_latency_s: percentile(&lat, 50.0),
            p90_latency_s: percentile(&lat, 90.0),
            p99_latency_s: percentile(&lat, 99.0),
            mean_simi: mean(done.iter().filter_map(|t| t.simi)),
            mean_onboard_tokens: mean(done.iter().map(|t| t.onboard_tokens as f64)),
            mean_compression_ratio: mean(offloaded().filter_map(|t| t.compression_ratio)),
            mean_retained_mass: mean(offloaded().filter_map(|t| t.retained_mass)),
            mean_bytes_transmitted: mean(offloaded().map(|t| t.bytes_transmitted as f64)),
            latency_shares: LatencyShares {
                onboard_encode: share(parts[0]),
                onboard_generation: share(parts[1]),
                confidence_eval: share(parts[2]),
                transmission: share(parts[3]),
                ground_inference: share(parts[4]),
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes traces as CSV with the columns of [`TRACE_COLUMNS`]. Stage
/// scores are `;`-separated, with `-` for stages that were not evaluated.
pub fn write_traces_csv<W: Write>(out: W, traces: &[SampleTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(TRACE_COLUMNS).map_err(fmt_err)?;
    for t in traces {
        let scores = t
            .stage_scores
            .iter()
            .map(|s| s.map_or_else(|| "-".to_string(), |v| v.to_string()))
            .collect::<Vec<_>>()
            .join(";");
        let total = t.total_latency();
        let row = [
            t.sample_id.to_string(),
            t.satellite.clone(),
            t.task.as_str().to_string(),
            t.difficulty.to_string(),
            t.outcome.as_str().to_string(),
            opt(t.offload_stage),
            scores,
            t.onboard_tokens.to_string(),
            t.bytes_transmitted.to_string(),
            opt(t.compression_ratio),
            opt(t.retained_mass),
            t.arrival_s.to_string(),
            t.start_s.to_string(),
            if t.completion_s.is_finite() { t.completion_s.to_string() } else { String::new() },
            t.latency.onboard_encode_s.to_string(),
            t.latency.onboard_generation_s.to_string(),
            t.latency.confidence_eval_s.to_string(),
            t.latency.transmission_s.to_string(),
            t.latency.ground_inference_s.to_string(),
            opt(total),
            opt(t.simi),
            t.answer.as_ref().map(format_answer).unwrap_or_default(),
        ];
        w.write_record(&row).map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}
