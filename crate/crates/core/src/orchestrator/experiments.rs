//! Offline experiments over analysed samples: how accuracy moves with the
//! offloaded share, and how region masking strategies compare.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{ScenarioConfig, TaskMix};
use super::{par_map, Pipeline, SampleAnalysis};
use crate::confidence::ProgressiveConfidenceNet;
use crate::domain::{RegionGrid, TaskAnswer};
use crate::error::{Error, Result};
use crate::models;
use crate::preprocess::{self, RegionAttentionMap};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub offloaded: usize,
    /// Offloading the lowest final-stage confidence scores.
    pub confidence_simi: f64,
    /// Offloading a seeded uniform subset.
    pub random_simi: f64,
}

/// Mean similarity when exactly `round(f * n)` samples are answered on the
/// ground. Ground answers are the filtered-downlink ones used by every
/// offloading policy.
pub fn sweep_offload_analyses(
    analyses: &[SampleAnalysis],
    net: &ProgressiveConfidenceNet,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::invalid(format!("offload fraction {f} outside [0,1]")));
    }
    let stages = net.stages();
    let scores = analyses
        .iter()
        .map(|a| net.estimate(stages, &a.stage_inputs[stages - 1]))
        .collect::<Result<Vec<_>>>()?;
    let mut by_confidence: Vec<usize> = (0..analyses.len()).collect();
    by_confidence.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    let mut by_chance: Vec<usize> = (0..analyses.len()).collect();
    by_chance.shuffle(&mut rng::stream(seed, &[tag::OFFLOAD, u64::MAX]));

    let mean_with = |order: &[usize], k: usize| -> f64 {
        let mut ground = vec![false; analyses.len()];
        order[..k].iter().for_each(|&i| ground[i] = true);
        let sum: f64 = analyses
            .iter()
            .zip(&ground)
            .map(|(a, &g)| if g { a.ground_simi } else { a.satellite_simi })
            .sum();
        sum / analyses.len().max(1) as f64
    };
    Ok(fractions
        .iter()
        .map(|&fraction| {
            let k = (fraction * analyses.len() as f64).round() as usize;
            SweepRow {
                fraction,
                offloaded: k,
                confidence_simi: mean_with(&by_confidence, k),
                random_simi: mean_with(&by_chance, k),
            }
        })
        .collect())
}

pub fn sweep_offload(config: &ScenarioConfig, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    let pipeline = Pipeline::new(config.clone())?;
    let net = pipeline.load_or_train_net()?;
    let analyses = pipeline.analyze_evaluation_split()?;
    sweep_offload_analyses(&analyses, &net, fractions, config.samples.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    /// Target-box regions first, random fill up to the budget.
    Ideal,
    /// Highest attention scores first.
    AttentionRanked,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] = [MaskStrategy::Random, MaskStrategy::Ideal, MaskStrategy::AttentionRanked];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Ideal => "ideal",
            MaskStrategy::AttentionRanked => "attention_ranked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub mask_fraction: f64,
    pub strategy: MaskStrategy,
    pub mean_simi: f64,
    pub mean_retained_mass: f64,
    pub mean_byte_fraction: f64,
    /// Per-sample similarity, in sample order.
    #[serde(skip)]
    pub simi: Vec<f64>,
}

/// The attention filter against random masking at the same byte count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedBudget {
    pub mean_byte_fraction: f64,
    pub filter_mean_simi: f64,
    pub random_mean_simi: f64,
    #[serde(skip)]
    pub filter_simi: Vec<f64>,
    #[serde(skip)]
    pub random_simi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub samples: usize,
    pub rows: Vec<MaskRow>,
    pub matched: MatchedBudget,
}

impl MaskingReport {
    pub fn row(&self, mask_fraction: f64, strategy: MaskStrategy) -> Option<&MaskRow> {
        self.rows
            .iter()
            .find(|r| r.mask_fraction == mask_fraction && r.strategy == strategy)
    }
}

struct SampleMasks {
    /// (retained mass, byte fraction, simi) per (fraction, strategy).
    cells: Vec<(f64, f64, f64)>,
    filter: (f64, f64),
    random_matched: f64,
}

fn keep_top(n: usize, keep: usize, order: impl Iterator<Item = usize>) -> Vec<bool> {
    let mut mask = vec![false; n];
    order.take(keep).for_each(|i| mask[i] = true);
    mask
}

fn random_order(n: usize, seed: u64, keys: &[u64]) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng::stream(seed, keys));
    v
}

/// Region-masking comparison on detection samples. The workload is the
/// configured one restricted to detection tasks.
pub fn masking_experiment(config: &ScenarioConfig, mask_fractions: &[f64]) -> Result<MaskingReport> {
    if let Some(f) = mask_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::invalid(format!("mask fraction {f} outside [0,1]")));
    }
    let mut config = config.clone();
    config.samples.task_mix = TaskMix::only_detection();
    let pipeline = Pipeline::new(config)?;
    let cfg = pipeline.config();
    let seed = cfg.samples.seed;
    let ids: Vec<u64> = pipeline.generator().evaluation_ids().collect();

    let per_sample = par_map(&ids, |&id| {
        let sample = pipeline.generator().sample(id)?;
        let TaskAnswer::Detection(target) = sample.ground_truth else {
            return Err(Error::invalid("masking experiment needs detection samples"));
        };
        let (grid, scores, _) = pipeline.encode(&sample)?;
        let n = grid.len();
        let original = cfg.bytes.grid_bytes(&grid).0 as f64;
        let evaluate = |keep: &[bool]| -> Result<(f64, f64, f64)> {
            let f = preprocess::mask_regions(&grid, keep, &scores, &cfg.bytes)?;
            let out = models::infer(&cfg.oracles.ground, &sample, f.retained_attention_mass, pipeline.encoder())?;
            let s = models::simi(&out.answer, &sample.ground_truth, pipeline.encoder())?;
            Ok((f.retained_attention_mass, f.total_bytes.0 as f64 / original, s))
        };

        let overlap = |i: usize| grid.region_box(i).intersection_area(&target);
        let mut target_first: Vec<usize> = (0..n).filter(|&i| overlap(i) > 0.0).collect();
        target_first.sort_by(|&i, &j| overlap(j).total_cmp(&overlap(i)).then(i.cmp(&j)));
        let mut by_score: Vec<usize> = (0..n).collect();
        by_score.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));

        let mut cells = Vec::new();
        for (fi, &fraction) in mask_fractions.iter().enumerate() {
            let keep = n - (fraction * n as f64).round() as usize;
            let fill = random_order(n, seed, &[tag::MASK, id, fi as u64]);
            for strategy in MaskStrategy::ALL {
                let mask = match strategy {
                    MaskStrategy::Random => keep_top(n, keep, fill.iter().copied()),
                    MaskStrategy::Ideal => {
                        let rest = fill.iter().copied().filter(|i| overlap(*i) <= 0.0);
                        keep_top(n, keep, target_first.iter().copied().chain(rest))
                    }
                    MaskStrategy::AttentionRanked => keep_top(n, keep, by_score.iter().copied()),
                };
                cells.push(evaluate(&mask)?);
            }
        }

        let filtered = preprocess::apply_filter(&grid, &RegionAttentionMap::from_scores(scores.clone(), &cfg.preprocess), &cfg.bytes)?;
        let out = models::infer(&cfg.oracles.ground, &sample, filtered.retained_attention_mass, pipeline.encoder())?;
        let filter_simi = models::simi(&out.answer, &sample.ground_truth, pipeline.encoder())?;
        let byte_fraction = filtered.total_bytes.0 as f64 / original;
        let random_matched = evaluate(&matched_random_mask(&grid, filtered.total_bytes.0, cfg, seed, id))?.2;
        Ok(SampleMasks {
            cells,
            filter: (byte_fraction, filter_simi),
            random_matched,
        })
    })?;

    let count = per_sample.len().max(1) as f64;
    let mut rows = Vec::new();
    for (fi, &fraction) in mask_fractions.iter().enumerate() {
        for (si, strategy) in MaskStrategy::ALL.into_iter().enumerate() {
            let cell = fi * MaskStrategy::ALL.len() + si;
            let simi: Vec<f64> = per_sample.iter().map(|s| s.cells[cell].2).collect();
            rows.push(MaskRow {
                mask_fraction: fraction,
                strategy,
                mean_simi: simi.iter().sum::<f64>() / count,
                mean_retained_mass: per_sample.iter().map(|s| s.cells[cell].0).sum::<f64>() / count,
                mean_byte_fraction: per_sample.iter().map(|s| s.cells[cell].1).sum::<f64>() / count,
                simi,
            });
        }
    }
    let filter_simi: Vec<f64> = per_sample.iter().map(|s| s.filter.1).collect();
    let random_simi: Vec<f64> = per_sample.iter().map(|s| s.random_matched).collect();
    Ok(MaskingReport {
        samples: per_sample.len(),
        matched: MatchedBudget {
            mean_byte_fraction: per_sample.iter().map(|s| s.filter.0).sum::<f64>() / count,
            filter_mean_simi: filter_simi.iter().sum::<f64>() / count,
            random_mean_simi: random_simi.iter().sum::<f64>() / count,
            filter_simi,
            random_simi,
        },
        rows,
    })
}

/// Random full-resolution regions whose bytes come as close as possible to
/// `budget`.
fn matched_random_mask(grid: &RegionGrid, budget: u64, cfg: &ScenarioConfig, seed: u64, id: u64) -> Vec<bool> {
    let order = random_order(grid.len(), seed, &[tag::MASK, id, u64::MAX]);
    let header = cfg.bytes.region_header_bytes;
    let mut spent = grid.len() as u64 * header;
    let mut keep = vec![false; grid.len()];
    for i in order {
        let extra = cfg.bytes.byte_size(&grid.regions[i]).0 - header;
        if spent + extra / 2 > budget {
            break;
        }
        spent += extra;
        keep[i] = true;
    }
    keep
}
