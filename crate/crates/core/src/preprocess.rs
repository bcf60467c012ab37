//! Attention-guided multi-scale preprocessing.
//!
//! Each region is discarded, downsampled or kept at full resolution
//! depending on where its text-image attention score falls relative to
//! two thresholds `alpha < beta`. In between, the per-axis downsampling
//! divisor is `(beta - alpha) / (score - alpha)`, which is 1 at `beta` and
//! grows without bound as the score approaches `alpha`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{BBox, ByteModel, ByteSize, Image, RegionGrid, TaskAnswer};
use crate::embedding::{self, EncoderSpec};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub mod wire;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub alpha: f64,
    pub beta: f64,
    pub region_height: usize,
    pub region_width: usize,
    /// Upper bound on the downsampling divisor. `None` caps at the region
    /// size, so a region never shrinks below 1×1.
    pub max_downsample_factor: Option<f64>,
    /// Mean-cosine attention (true) or the raw double sum.
    pub normalize_attention: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            alpha: 0.35,
            beta: 0.55,
            region_height: 32,
            region_width: 32,
            max_downsample_factor: None,
            normalize_attention: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.alpha >= 0.0 && self.alpha < self.beta) {
            errs.push(format!(
                "preprocess.alpha/beta must satisfy 0 <= alpha < beta (got {} / {})",
                self.alpha, self.beta
            ));
        }
        if self.region_height == 0 || self.region_width == 0 {
            errs.push("preprocess.region_height/region_width must be >= 1".to_string());
        }
        if self.region_height > u16::MAX as usize || self.region_width > u16::MAX as usize {
            errs.push("preprocess.region_height/region_width must fit in 16 bits".to_string());
        }
        if let Some(c) = self.max_downsample_factor {
            if !(c >= 1.0) {
                errs.push(format!("preprocess.max_downsample_factor must be >= 1 (got {c})"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Effective divisor cap for this region size.
    pub fn factor_cap(&self) -> f64 {
        let region_cap = self.region_height.max(self.region_width) as f64;
        self.max_downsample_factor.map_or(region_cap, |c| c.min(region_cap))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionDecision {
    Discard,
    Downsample { factor: f64 },
    Preserve,
}

impl RegionDecision {
    pub fn tag(&self) -> u8 {
        match self {
            RegionDecision::Discard => 0,
            RegionDecision::Downsample { .. } => 1,
            RegionDecision::Preserve => 2,
        }
    }
}

/// Uncapped divisor `(beta - alpha) / (score - alpha)`.
pub fn scaling_factor(score: f64, alpha: f64, beta: f64) -> f64 {
    (beta - alpha) / (score - alpha)
}

pub fn classify_region(score: f64, alpha: f64, beta: f64, factor_cap: f64) -> RegionDecision {
    if score < alpha {
        RegionDecision::Discard
    } else if score < beta {
        RegionDecision::Downsample {
            factor: scaling_factor(score, alpha, beta).min(factor_cap),
        }
    } else {
        RegionDecision::Preserve
    }
}

/// Box-average pooling to `ceil(h / c) × ceil(w / c)`.
pub fn downsample(region: &Image, c: f64) -> Result<Image> {
    if !(c >= 1.0) {
        return Err(Error::invalid(format!("downsampling factor must be >= 1 (got {c})")));
    }
    if c == 1.0 || region.is_empty() {
        return Ok(region.clone());
    }
    let (h, w) = (region.height(), region.width());
    let oh = ((h as f64 / c).ceil() as usize).clamp(1, h);
    let ow = ((w as f64 / c).ceil() as usize).clamp(1, w);
    Ok(Image::from_fn(oh, ow, |i, j| {
        let (r0, r1) = (i * h / oh, (i + 1) * h / oh);
        let (c0, c1) = (j * w / ow, (j + 1) * w / ow);
        let mut sum = 0.0;
        for r in r0..r1 {
            for cc in c0..c1 {
                sum += region.get(r, cc);
            }
        }
        sum / ((r1 - r0) * (c1 - c0)) as f64
    }))
}

/// Per-region attention scores and the decisions they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAttentionMap {
    pub scores: Vec<f64>,
    pub decisions: Vec<RegionDecision>,
    pub alpha: f64,
    pub beta: f64,
}

impl RegionAttentionMap {
    pub fn from_scores(scores: Vec<f64>, cfg: &PreprocessConfig) -> Self {
        let cap = cfg.factor_cap();
        let decisions = scores
            .iter()
            .map(|&k| classify_region(k, cfg.alpha, cfg.beta, cap))
            .collect();
        Self {
            scores,
            decisions,
            alpha: cfg.alpha,
            beta: cfg.beta,
        }
    }
}

/// Attention score of every region of `grid` against `prompt`.
pub fn score_regions(
    grid: &RegionGrid,
    prompt: &str,
    encoder: &EncoderSpec,
    sample_id: u64,
    normalize: bool,
) -> Result<Vec<f64>> {
    let text = embedding::encode_prompt(prompt, encoder)?;
    grid.regions
        .iter()
        .enumerate()
        .map(|(idx, region)| {
            let tokens = embedding::encode_region(region, prompt, encoder, sample_id, idx)?;
            embedding::attention_score(&tokens, &text, normalize)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredRegion {
    pub index: usize,
    pub decision: RegionDecision,
    /// Empty for discarded regions.
    pub pixels: Image,
}

/// What actually gets sent to the ground.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredImage {
    pub regions: Vec<FilteredRegion>,
    pub total_bytes: ByteSize,
    pub original_bytes: ByteSize,
    pub retained_attention_mass: f64,
    pub region_height: usize,
    pub region_width: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl FilteredImage {
    pub fn compression_ratio(&self) -> f64 {
        if self.original_bytes.0 == 0 {
            return 1.0;
        }
        self.total_bytes.0 as f64 / self.original_bytes.0 as f64
    }

    pub fn discarded(&self) -> usize {
        self.regions
            .iter()
            .filter(|r| r.decision == RegionDecision::Discard)
            .count()
    }

    /// Zero-fills discarded regions, block-replicates downsampled ones and
    /// crops padding.
    pub fn reconstruct(&self) -> Image {
        paste_regions(
            &self.regions,
            (self.region_height, self.region_width),
            (self.image_height, self.image_width),
        )
    }
}

pub(crate) fn paste_regions(regions: &[FilteredRegion], region: (usize, usize), image: (usize, usize)) -> Image {
    let (rh, rw) = region;
    let (ih, iw) = image;
    let cols = iw.div_ceil(rw);
    let mut pixels = vec![0.0; ih * iw];
    for reg in regions {
        if reg.pixels.is_empty() {
            continue;
        }
        let (y0, x0) = ((reg.index / cols) * rh, (reg.index % cols) * rw);
        let (ph, pw) = (reg.pixels.height(), reg.pixels.width());
        for r in 0..rh.min(ih.saturating_sub(y0)) {
            for c in 0..rw.min(iw.saturating_sub(x0)) {
                pixels[(y0 + r) * iw + x0 + c] = reg.pixels.get(r * ph / rh, c * pw / rw);
            }
        }
    }
    Image::new(ih, iw, pixels).expect("dimensions are consistent")
}

/// Share of the positive attention held by regions that were not
/// discarded. With no positive attention at all, the share of regions kept.
pub fn retained_attention_mass(scores: &[f64], kept: impl Fn(usize) -> bool) -> f64 {
    let total: f64 = scores.iter().map(|s| s.max(0.0)).sum();
    if total <= 0.0 {
        if scores.is_empty() {
            return 1.0;
        }
        return (0..scores.len()).filter(|&i| kept(i)).count() as f64 / scores.len() as f64;
    }
    let kept_mass: f64 = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| kept(*i))
        .map(|(_, s)| s.max(0.0))
        .sum();
    kept_mass / total
}

fn assemble(grid: &RegionGrid, regions: Vec<FilteredRegion>, scores: &[f64], bytes: &ByteModel) -> FilteredImage {
    let total_bytes = regions.iter().map(|r| bytes.byte_size(&r.pixels)).sum();
    let retained = retained_attention_mass(scores, |i| regions[i].decision != RegionDecision::Discard);
    FilteredImage {
        total_bytes,
        original_bytes: bytes.grid_bytes(grid),
        retained_attention_mass: retained,
        region_height: grid.region_height,
        region_width: grid.region_width,
        image_height: grid.image_height,
        image_width: grid.image_width,
        regions,
    }
}

pub fn apply_filter(grid: &RegionGrid, map: &RegionAttentionMap, bytes: &ByteModel) -> Result<FilteredImage> {
    if map.scores.len() != grid.len() || map.decisions.len() != grid.len() {
        return Err(Error::invalid(format!(
            "attention map covers {} regions, grid has {}",
            map.scores.len(),
            grid.len()
        )));
    }
    let regions = grid
        .regions
        .iter()
        .zip(&map.decisions)
        .enumerate()
        .map(|(index, (region, decision))| {
            let pixels = match *decision {
                RegionDecision::Discard => Image::empty(),
                RegionDecision::Downsample { factor } => downsample(region, factor)?,
                RegionDecision::Preserve => region.clone(),
            };
            Ok(FilteredRegion {
                index,
                decision: *decision,
                pixels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(grid, regions, &map.scores, bytes))
}

/// Keeps regions where `keep[i]` holds at full resolution; discards the rest.
pub fn mask_regions(grid: &RegionGrid, keep: &[bool], scores: &[f64], bytes: &ByteModel) -> Result<FilteredImage> {
    if keep.len() != grid.len() || scores.len() != grid.len() {
        return Err(Error::invalid(format!(
            "mask covers {} regions and {} scores, grid has {}",
            keep.len(),
            scores.len(),
            grid.len()
        )));
    }
    let regions = grid
        .regions
        .iter()
        .zip(keep)
        .enumerate()
        .map(|(index, (region, &k))| FilteredRegion {
            index,
            decision: if k {
                RegionDecision::Preserve
            } else {
                RegionDecision::Discard
            },
            pixels: if k { region.clone() } else { Image::empty() },
        })
        .collect();
    Ok(assemble(grid, regions, scores, bytes))
}

/// Regions of `grid` that overlap `b` with positive area.
pub fn regions_intersecting(grid: &RegionGrid, b: &BBox) -> Vec<bool> {
    (0..grid.len())
        .map(|i| grid.region_box(i).intersection_area(b) > 0.0)
        .collect()
}

/// Oracle mask: keeps exactly the regions touched by the ground-truth box.
pub fn ideal_mask(grid: &RegionGrid, ground_truth: &TaskAnswer, scores: &[f64], bytes: &ByteModel) -> Result<FilteredImage> {
    let TaskAnswer::Detection(b) = ground_truth else {
        return Err(Error::invalid(format!(
            "ideal mask needs a detection ground truth, got {}",
            ground_truth.kind().as_str()
        )));
    };
    mask_regions(grid, &regions_intersecting(grid, b), scores, bytes)
}

/// Discards a uniformly random subset of `round(fraction * N)` regions.
pub fn random_mask(grid: &RegionGrid, mask_fraction: f64, seed: u64, scores: &[f64], bytes: &ByteModel) -> Result<FilteredImage> {
    if !(0.0..=1.0).contains(&mask_fraction) {
        return Err(Error::invalid(format!("mask fraction {mask_fraction} outside [0,1]")));
    }
    let n = grid.len();
    let drop = (mask_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::MASK]));
    let mut keep = vec![true; n];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    mask_regions(grid, &keep, scores, bytes)
}
