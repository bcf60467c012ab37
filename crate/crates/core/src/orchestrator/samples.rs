//! Synthetic observation tasks with planted region relevance.
//!
//! Each sample has a target box. Regions overlapping it get high relevance
//! (so the encoder aligns their tokens with the prompt), the rest get
//! little or none. Difficulty darkens the image, raises its noise and
//! fades the target, which leaves a trace in the pooled image features.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use super::config::{DifficultyDistribution, SampleGenSpec};
use crate::domain::{BBox, Image, Sample, TaskAnswer, TaskKind};
use crate::embedding::RelevanceInjection;
use crate::error::Result;
use crate::models::HESITANT_OFFSET;
use crate::rng::{self, tag};

/// Ids at or above this belong to the training split.
pub const TRAINING_ID_BASE: u64 = 1 << 40;

const PART_PLAN: u64 = 0;
const PART_BOX: u64 = 1;
const PART_PIXELS: u64 = 2;
const PART_RELEVANCE: u64 = 3;

#[derive(Debug, Clone)]
pub struct SampleGenerator {
    spec: SampleGenSpec,
    region_height: usize,
    region_width: usize,
}

impl SampleGenerator {
    pub fn new(spec: SampleGenSpec, region_height: usize, region_width: usize) -> Self {
        Self {
            spec,
            region_height,
            region_width,
        }
    }

    pub fn spec(&self) -> &SampleGenSpec {
        &self.spec
    }

    pub fn evaluation_ids(&self) -> impl Iterator<Item = u64> {
        0..self.spec.count as u64
    }

    pub fn training_ids(&self, n: usize) -> impl Iterator<Item = u64> {
        (0..n as u64).map(|i| TRAINING_ID_BASE + i)
    }

    fn kind_and_difficulty(&self, id: u64) -> (TaskKind, f64, u32) {
        let mut rng = rng::stream(self.spec.seed, &[tag::SAMPLE, id, PART_PLAN]);
        let m = &self.spec.task_mix;
        let u = rng.random::<f64>() * (m.qa + m.classification + m.detection);
        let kind = if u < m.qa {
            TaskKind::Qa
        } else if u < m.qa + m.classification {
            TaskKind::Classification
        } else {
            TaskKind::Detection
        };
        let d = match self.spec.difficulty {
            DifficultyDistribution::Uniform { min, max } => min + (max - min) * rng.random::<f64>(),
            DifficultyDistribution::Beta { a, b } => Beta::new(a, b).map_or(0.5, |dist| dist.sample(&mut rng)),
            DifficultyDistribution::Fixed { value } => value,
        };
        let label = rng.random_range(0..self.spec.num_classes);
        (kind, d.clamp(0.0, 1.0), label)
    }

    /// The box holding whatever the prompt is about.
    pub fn target_box(&self, id: u64) -> BBox {
        let mut rng = rng::stream(self.spec.seed, &[tag::SAMPLE, id, PART_BOX]);
        let (h, w) = (self.spec.image_height as f64, self.spec.image_width as f64);
        let (lo, hi) = (self.spec.target_size_min, self.spec.target_size_max);
        let bw = (self.region_width as f64 * rng.random_range(lo..=hi)).min(w);
        let bh = (self.region_height as f64 * rng.random_range(lo..=hi)).min(h);
        let x0 = rng.random::<f64>() * (w - bw);
        let y0 = rng.random::<f64>() * (h - bh);
        BBox {
            x_min: x0,
            y_min: y0,
            x_max: x0 + bw,
            y_max: y0 + bh,
        }
    }

    /// Planted relevance of one region of sample `id`.
    pub fn relevance(&self, id: u64, region_index: usize) -> f64 {
        let (rh, rw) = (self.region_height, self.region_width);
        let cols = self.spec.image_width.div_ceil(rw);
        let (y, x) = ((region_index / cols * rh) as f64, (region_index % cols * rw) as f64);
        let region = BBox {
            x_min: x,
            y_min: y,
            x_max: x + rw as f64,
            y_max: y + rh as f64,
        };
        let overlap = region.intersection_area(&self.target_box(id)) / region.area();
        let mut rng = rng::stream(self.spec.seed, &[tag::SAMPLE, id, PART_RELEVANCE, region_index as u64]);
        let rho = if overlap > 0.0 {
            let floor = self.spec.relevance_floor;
            floor + (1.0 - floor) * overlap + self.spec.relevance_jitter * rng.random_range(-1.0..=1.0)
        } else {
            self.spec.background_relevance_max * rng.random::<f64>()
        };
        rho.clamp(0.0, 1.0)
    }

    pub fn injection(self: &Arc<Self>) -> RelevanceInjection {
        let g = Arc::clone(self);
        RelevanceInjection::Function(Arc::new(move |id, idx| g.relevance(id, idx)))
    }

    pub fn sample(&self, id: u64) -> Result<Sample> {
        let (kind, difficulty, label) = self.kind_and_difficulty(id);
        let target = self.target_box(id);
        let (prompt, truth) = match kind {
            TaskKind::Qa => {
                let mut rng = rng::stream(self.spec.seed, &[tag::SAMPLE, id, PART_PLAN, 1]);
                let tokens = (0..self.spec.qa_answer_tokens)
                    .map(|_| rng.random_range(0..HESITANT_OFFSET))
                    .collect();
                (
                    format!("question {}: what is happening around the object of class {label}?", label % 4),
                    TaskAnswer::Qa(tokens),
                )
            }
            TaskKind::Classification => (
                format!("which of the {} scene classes does this image show?", self.spec.num_classes),
                TaskAnswer::Classification(label),
            ),
            TaskKind::Detection => (format!("locate the object of class {label}"), TaskAnswer::Detection(target)),
        };
        let image = self.render(id, difficulty, &target);
        Sample::new(id, image, prompt, truth, difficulty)
    }

    fn render(&self, id: u64, d: f64, target: &BBox) -> Image {
        let mut rng = rng::stream(self.spec.seed, &[tag::SAMPLE, id, PART_PIXELS]);
        let base = 0.7 - 0.4 * d;
        let texture = 0.05 + 0.15 * d;
        let contrast = 0.3 * (1.0 - d);
        Image::from_fn(self.spec.image_height, self.spec.image_width, |r, c| {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let inside = x >= target.x_min && x < target.x_max && y >= target.y_min && y < target.y_max;
            let noise: f64 = rng.sample(StandardNormal);
            (base + texture * noise + if inside { contrast } else { 0.0 }).clamp(0.0, 1.0)
        })
    }
}
