//! Shared data types: images, samples, task answers, region tiling and
//! byte accounting.

use std::iter::Sum;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image, row-major, intensities in [0, 1].
///
/// A 0×0 image is allowed and stands for a discarded region.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "pixel buffer has {} values, expected {}x{}",
                pixels.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn empty() -> Self {
        Self::zeros(0, 0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        let m = self.mean();
        let var = self.pixels.iter().map(|p| (p - m) * (p - m)).sum::<f64>()
            / self.pixels.len() as f64;
        var.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Qa,
    Classification,
    Detection,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Qa, TaskKind::Classification, TaskKind::Detection];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Qa => "qa",
            TaskKind::Classification => "classification",
            TaskKind::Detection => "detection",
        }
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::invalid(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskAnswer {
    Qa(Vec<u32>),
    Classification(u32),
    Detection(BBox),
}

impl TaskAnswer {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskAnswer::Qa(_) => TaskKind::Qa,
            TaskAnswer::Classification(_) => TaskKind::Classification,
            TaskAnswer::Detection(_) => TaskKind::Detection,
        }
    }
}

/// One observation task.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    pub prompt: String,
    pub ground_truth: TaskAnswer,
    pub difficulty: f64,
}

impl Sample {
    pub fn new(
        id: u64,
        image: Image,
        prompt: impl Into<String>,
        ground_truth: TaskAnswer,
        difficulty: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&difficulty) {
            return Err(Error::invalid(format!("difficulty {difficulty} outside [0,1]")));
        }
        if image.is_empty() {
            return Err(Error::invalid("sample image is empty"));
        }
        Ok(Self {
            id,
            image,
            prompt: prompt.into(),
            ground_truth,
            difficulty,
        })
    }

    pub fn task_kind(&self) -> TaskKind {
        self.ground_truth.kind()
    }
}

/// An image cut into fixed-size regions, row-major, trailing regions
/// zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub region_height: usize,
    pub region_width: usize,
    pub rows: usize,
    pub cols: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub regions: Vec<Image>,
    pub padding_flags: Vec<bool>,
}

impl RegionGrid {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Top-left pixel (row, col) of region `index`.
    pub fn origin(&self, index: usize) -> (usize, usize) {
        let (r, c) = (index / self.cols, index % self.cols);
        (r * self.region_height, c * self.region_width)
    }

    /// Pixel-space box of region `index` (x = column, y = row).
    pub fn region_box(&self, index: usize) -> BBox {
        let (y, x) = self.origin(index);
        BBox {
            x_min: x as f64,
            y_min: y as f64,
            x_max: (x + self.region_width) as f64,
            y_max: (y + self.region_height) as f64,
        }
    }

    /// Reassembles the original image, cropping padding. Regions that are
    /// empty or resized are treated as zeros.
    pub fn reassemble(&self) -> Image {
        let mut out = Image::zeros(self.image_height, self.image_width);
        for (idx, region) in self.regions.iter().enumerate() {
            if region.height() != self.region_height || region.width() != self.region_width {
                continue;
            }
            let (y0, x0) = self.origin(idx);
            for r in 0..self.region_height {
                let y = y0 + r;
                if y >= self.image_height {
                    break;
                }
                for c in 0..self.region_width {
                    let x = x0 + c;
                    if x >= self.image_width {
                        break;
                    }
                    out.pixels[y * self.image_width + x] = region.get(r, c);
                }
            }
        }
        out
    }
}

pub fn region_count(image_height: usize, image_width: usize, region_height: usize, region_width: usize) -> usize {
    image_height.div_ceil(region_height) * image_width.div_ceil(region_width)
}

pub fn partition_image(image: &Image, region_height: usize, region_width: usize) -> Result<RegionGrid> {
    if region_height == 0 || region_width == 0 {
        return Err(Error::invalid(format!(
            "region dimensions must be positive, got {region_height}x{region_width}"
        )));
    }
    let rows = image.height().div_ceil(region_height);
    let cols = image.width().div_ceil(region_width);
    let mut regions = Vec::with_capacity(rows * cols);
    let mut padding_flags = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let (y0, x0) = (gr * region_height, gc * region_width);
            let padded = y0 + region_height > image.height() || x0 + region_width > image.width();
            let block = Image::from_fn(region_height, region_width, |r, c| {
                let (y, x) = (y0 + r, x0 + c);
                if y < image.height() && x < image.width() {
                    image.get(y, x)
                } else {
                    0.0
                }
            });
            regions.push(block);
            padding_flags.push(padded);
        }
    }
    Ok(RegionGrid {
        region_height,
        region_width,
        rows,
        cols,
        image_height: image.height(),
        image_width: image.width(),
        regions,
        padding_flags,
    })
}

/// Serialized payload size in bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ByteSize(pub u64);

impl ByteSize {
    pub fn bytes(self) -> u64 {
        self.0
    }

    pub fn bits(self) -> f64 {
        self.0 as f64 * 8.0
    }
}

impl Add for ByteSize {
    type Output = ByteSize;
    fn add(self, rhs: ByteSize) -> ByteSize {
        ByteSize(self.0 + rhs.0)
    }
}

impl Sum for ByteSize {
    fn sum<I: Iterator<Item = ByteSize>>(iter: I) -> ByteSize {
        iter.fold(ByteSize(0), Add::add)
    }
}

/// Size model for transmitted regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ByteModel {
    pub bytes_per_pixel: u64,
    pub region_header_bytes: u64,
}

impl Default for ByteModel {
    fn default() -> Self {
        Self {
            bytes_per_pixel: 1,
            region_header_bytes: 4,
        }
    }
}

impl ByteModel {
    /// Pixel payload plus the per-region header. An empty (discarded)
    /// region costs the header only.
    pub fn byte_size(&self, region: &Image) -> ByteSize {
        ByteSize(region.pixel_count() as u64 * self.bytes_per_pixel + self.region_header_bytes)
    }

    pub fn grid_bytes(&self, grid: &RegionGrid) -> ByteSize {
        grid.regions.iter().map(|r| self.byte_size(r)).sum()
    }
}
