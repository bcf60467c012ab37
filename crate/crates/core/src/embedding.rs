//! Synthetic visual/text encoders and the text-image attention score.
//!
//! The encoders are deterministic stand-ins for a CLIP-style model. Region
//! tokens are a seeded mixture of a prompt-aligned direction and a random
//! direction; the mixing weight is the region's planted relevance, so the
//! attention score responds to relevance the way a real encoder would.
//! Region tokens also carry a content component built from pixel
//! statistics, which is what the confidence network sees through the pooled
//! image features.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::Image;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Row-major `rows × dim` matrix of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "token buffer has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged token rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }
}

/// Planted per-(sample, region) relevance in [0, 1].
#[derive(Clone)]
pub enum RelevanceInjection {
    Constant(f64),
    Table(BTreeMap<u64, Vec<f64>>),
    Function(Arc<dyn Fn(u64, usize) -> f64 + Send + Sync>),
}

impl RelevanceInjection {
    pub fn relevance(&self, sample_id: u64, region_index: usize) -> f64 {
        let rho = match self {
            RelevanceInjection::Constant(v) => *v,
            RelevanceInjection::Table(t) => t
                .get(&sample_id)
                .and_then(|v| v.get(region_index))
                .copied()
                .unwrap_or(0.0),
            RelevanceInjection::Function(f) => f(sample_id, region_index),
        };
        rho.clamp(0.0, 1.0)
    }
}

impl Default for RelevanceInjection {
    fn default() -> Self {
        RelevanceInjection::Constant(0.0)
    }
}

impl fmt::Debug for RelevanceInjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelevanceInjection::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            RelevanceInjection::Table(t) => f.debug_tuple("Table").field(&t.len()).finish(),
            RelevanceInjection::Function(_) => f.write_str("Function(..)"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub embedding_dim: usize,
    pub tokens_per_region: usize,
    pub tokens_per_prompt: usize,
    pub seed: u64,
    /// Weight of the shared prompt direction in each prompt token.
    pub prompt_coherence: f64,
    /// Scale of the pixel-statistics component in region tokens.
    pub content_weight: f64,
    #[serde(skip)]
    pub relevance_injection: RelevanceInjection,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            tokens_per_region: 4,
            tokens_per_prompt: 8,
            seed: 0x5eed,
            prompt_coherence: 0.9,
            content_weight: 2.0,
            relevance_injection: RelevanceInjection::default(),
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.embedding_dim < 4 {
            errs.push(format!("encoder.embedding_dim must be >= 4 (got {})", self.embedding_dim));
        }
        if self.tokens_per_region == 0 {
            errs.push("encoder.tokens_per_region must be >= 1".to_string());
        }
        if self.tokens_per_prompt == 0 {
            errs.push("encoder.tokens_per_prompt must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.prompt_coherence) {
            errs.push(format!(
                "encoder.prompt_coherence must be in [0,1] (got {})",
                self.prompt_coherence
            ));
        }
        if !(self.content_weight >= 0.0) {
            errs.push(format!("encoder.content_weight must be >= 0 (got {})", self.content_weight));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Fixed axes that carry pixel statistics (mean, contrast).
    fn content_axes(&self) -> [Vec<f64>; 2] {
        let a = unit_gaussian(self.embedding_dim, self.seed, &[tag::CONTENT_AXIS, 0]);
        let mut b = unit_gaussian(self.embedding_dim, self.seed, &[tag::CONTENT_AXIS, 1]);
        orthogonalize(&mut b, &a);
        normalize_in_place(&mut b);
        [a, b]
    }

    /// Unit direction shared by the tokens of `prompt`, orthogonal to the
    /// content axes.
    pub fn prompt_direction(&self, prompt: &str) -> Vec<f64> {
        let mut p = unit_gaussian(self.embedding_dim, self.seed, &[tag::PROMPT, rng::hash_str(prompt)]);
        for axis in &self.content_axes() {
            orthogonalize(&mut p, axis);
        }
        normalize_in_place(&mut p);
        p
    }
}

pub(crate) fn unit_gaussian(dim: usize, seed: u64, keys: &[u64]) -> Vec<f64> {
    let mut rng = rng::stream(seed, keys);
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize_in_place(&mut v) {
            return v;
        }
    }
}

fn orthogonalize(v: &mut [f64], axis: &[f64]) {
    let d = dot(v, axis);
    v.iter_mut().zip(axis).for_each(|(x, a)| *x -= d * a);
}

/// Returns false (and leaves `v` alone) when `v` is zero.
pub(crate) fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("dimension mismatch {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Encodes one image region into `tokens_per_region` unit rows. Each row
/// mixes the prompt direction (weight `rho`) with a seeded direction
/// orthogonal to it that also carries the region's pixel statistics.
pub fn encode_region(
    region: &Image,
    prompt: &str,
    spec: &EncoderSpec,
    sample_id: u64,
    region_index: usize,
) -> Result<TokenMatrix> {
    if region.is_empty() {
        return Err(Error::invalid("cannot encode an empty region"));
    }
    let rho = spec.relevance_injection.relevance(sample_id, region_index);
    let aligned = spec.prompt_direction(prompt);
    let [mean_axis, contrast_axis] = spec.content_axes();
    let mean = region.mean();
    let contrast = (region.std_dev() * 12f64.sqrt()).min(1.0);
    let dim = spec.embedding_dim;

    let mut data = Vec::with_capacity(spec.tokens_per_region * dim);
    for t in 0..spec.tokens_per_region {
        let mut random = unit_gaussian(
            dim,
            spec.seed,
            &[tag::REGION_TOKEN, sample_id, region_index as u64, t as u64],
        );
        for k in 0..dim {
            random[k] += spec.content_weight * (mean * mean_axis[k] + contrast * contrast_axis[k]);
        }
        orthogonalize(&mut random, &aligned);
        normalize_in_place(&mut random);
        let mut row: Vec<f64> = aligned
            .iter()
            .zip(&random)
            .map(|(a, r)| rho * a + (1.0 - rho) * r)
            .collect();
        if !normalize_in_place(&mut row) {
            row = aligned.clone();
        }
        data.extend(row);
    }
    TokenMatrix::new(spec.tokens_per_region, dim, data)
}

/// Encodes a prompt into `tokens_per_prompt` unit rows clustered around
/// its prompt direction.
pub fn encode_prompt(prompt: &str, spec: &EncoderSpec) -> Result<TokenMatrix> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt is empty"));
    }
    let dir = spec.prompt_direction(prompt);
    let h = rng::hash_str(prompt);
    let c = spec.prompt_coherence;
    let mut data = Vec::with_capacity(spec.tokens_per_prompt * spec.embedding_dim);
    for j in 0..spec.tokens_per_prompt {
        let noise = unit_gaussian(spec.embedding_dim, spec.seed, &[tag::PROMPT, h, 1 + j as u64]);
        let mut row: Vec<f64> = dir.iter().zip(&noise).map(|(d, n)| c * d + (1.0 - c) * n).collect();
        if !normalize_in_place(&mut row) {
            row = dir.clone();
        }
        data.extend(row);
    }
    TokenMatrix::new(spec.tokens_per_prompt, spec.embedding_dim, data)
}

/// Text-image attention: the sum over all (image token, text token) pairs
/// of their cosine similarity. With `normalize` the sum is divided by the
/// number of pairs, giving a mean cosine in [-1, 1].
pub fn attention_score(image_tokens: &TokenMatrix, text_tokens: &TokenMatrix, normalize: bool) -> Result<f64> {
    if image_tokens.dim() != text_tokens.dim() {
        return Err(Error::invalid(format!(
            "embedding dimension mismatch: image {} vs text {}",
            image_tokens.dim(),
            text_tokens.dim()
        )));
    }
    if image_tokens.rows() == 0 || text_tokens.rows() == 0 {
        return Err(Error::invalid("attention over an empty token matrix"));
    }
    let image_norms: Vec<f64> = image_tokens.iter_rows().map(norm).collect();
    let text_norms: Vec<f64> = text_tokens.iter_rows().map(norm).collect();
    if image_norms.iter().chain(&text_norms).any(|n| *n == 0.0) {
        return Err(Error::invalid("token matrix contains an all-zero row"));
    }
    let mut raw = 0.0;
    for (v, nv) in image_tokens.iter_rows().zip(&image_norms) {
        for (e, ne) in text_tokens.iter_rows().zip(&text_norms) {
            raw += dot(v, e) / (nv * ne);
        }
    }
    Ok(if normalize {
        raw / (image_tokens.rows() * text_tokens.rows()) as f64
    } else {
        raw
    })
}

/// Mean of all rows of all matrices.
pub fn mean_pool<'a>(matrices: impl IntoIterator<Item = &'a TokenMatrix>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for m in matrices {
        for row in m.iter_rows() {
            acc.iter_mut().zip(row).for_each(|(a, x)| *a += x);
            n += 1;
        }
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

/// Seeded unit embedding of a vocabulary token.
pub fn token_embedding(token: u32, dim: usize, seed: u64) -> Vec<f64> {
    unit_gaussian(dim, seed, &[tag::TOKEN_TABLE, u64::from(token)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ramp() -> Image {
        Image::from_fn(8, 8, |r, c| (r * 8 + c) as f64 / 63.0)
    }

    /// Independent double loop over the definition.
    #[allow(clippy::needless_range_loop)]
    fn brute_force(v: &TokenMatrix, e: &TokenMatrix) -> f64 {
        let mut total = 0.0;
        for i in 0..v.rows() {
            for j in 0..e.rows() {
                let (a, b) = (v.row(i), e.row(j));
                let mut d = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..a.len() {
                    d += a[k] * b[k];
                }
                for k in 0..a.len() {
                    na += a[k] * a[k];
                }
                for k in 0..b.len() {
                    nb += b[k] * b[k];
                }
                total += d / (na.sqrt() * nb.sqrt());
            }
        }
        total
    }

    fn random_matrix(rows: usize, dim: usize, rng: &mut impl Rng) -> TokenMatrix {
        let data = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        TokenMatrix::new(rows, dim, data).unwrap()
    }

    #[test]
    fn hand_computed_two_by_two() {
        let h = 2f64.sqrt() / 2.0;
        let v = TokenMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let e = TokenMatrix::from_rows(&[vec![1.0, 0.0], vec![h, h]]).unwrap();
        let raw = attention_score(&v, &e, false).unwrap();
        assert!((raw - (1.0 + 2f64.sqrt())).abs() < 1e-12);
        let norm = attention_score(&v, &e, true).unwrap();
        assert!((norm - (1.0 + 2f64.sqrt()) / 4.0).abs() < 1e-12);
        assert!((norm - 0.6036).abs() < 1e-4);
    }

    #[test]
    fn perfect_alignment_and_orthogonality() {
        let v = TokenMatrix::from_rows(&vec![vec![0.0, 2.0, 0.0]; 3]).unwrap();
        let e = TokenMatrix::from_rows(&vec![vec![0.0, 1.0, 0.0]; 2]).unwrap();
        assert_eq!(attention_score(&v, &e, true).unwrap(), 1.0);
        let o = TokenMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(attention_score(&o, &e, true).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let v = TokenMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let e = TokenMatrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(attention_score(&v, &e, true), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matches_brute_force_bit_for_bit() {
        let mut rng = rng::stream(42, &[]);
        for _ in 0..200 {
            let dim = rng.random_range(1..24);
            let v = random_matrix(rng.random_range(1..6), dim, &mut rng);
            let e = random_matrix(rng.random_range(1..9), dim, &mut rng);
            assert_eq!(attention_score(&v, &e, false).unwrap().to_bits(), brute_force(&v, &e).to_bits());
        }
    }

    #[test]
    fn invariant_under_positive_row_rescaling() {
        let mut rng = rng::stream(9, &[]);
        for _ in 0..50 {
            let v = random_matrix(4, 16, &mut rng);
            let e = random_matrix(8, 16, &mut rng);
            let before = attention_score(&v, &e, true).unwrap();
            let mut scaled = v.clone();
            let i = rng.random_range(0..4);
            let s = rng.random_range(0.01..100.0);
            scaled.row_mut(i).iter_mut().for_each(|x| *x *= s);
            assert!((attention_score(&scaled, &e, true).unwrap() - before).abs() < 1e-12);
        }
    }

    #[test]
    fn full_relevance_tokens_equal_prompt_direction() {
        let spec = EncoderSpec {
            relevance_injection: RelevanceInjection::Constant(1.0),
            ..EncoderSpec::default()
        };
        let m = encode_region(&ramp(), "find the ships", &spec, 3, 7).unwrap();
        let dir = spec.prompt_direction("find the ships");
        for row in m.iter_rows() {
            assert_eq!(row, dir.as_slice());
        }
    }

    #[test]
    fn encoders_are_deterministic_and_unit_norm() {
        let spec = EncoderSpec::default();
        let a = encode_region(&ramp(), "p", &spec, 1, 2).unwrap();
        assert_eq!(a, encode_region(&ramp(), "p", &spec, 1, 2).unwrap());
        let p = encode_prompt("how many planes?", &spec).unwrap();
        assert_eq!(p, encode_prompt("how many planes?", &spec).unwrap());
        assert_ne!(p, encode_prompt("is there a river?", &spec).unwrap());
        for row in a.iter_rows().chain(p.iter_rows()) {
            assert!((norm(row) - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.rows(), spec.tokens_per_prompt);
        assert_eq!(a.rows(), spec.tokens_per_region);
    }

    #[test]
    fn empty_inputs_rejected() {
        let spec = EncoderSpec::default();
        assert!(encode_prompt("", &spec).is_err());
        assert!(encode_region(&Image::empty(), "p", &spec, 0, 0).is_err());
    }

    #[test]
    fn zero_relevance_gives_near_zero_cosine() {
        let spec = EncoderSpec::default();
        let d = spec.embedding_dim as f64;
        let mut total = 0.0;
        for draw in 0..100u64 {
            let prompt = format!("prompt {draw}");
            let v = encode_region(&ramp(), &prompt, &spec, draw, 0).unwrap();
            let e = encode_prompt(&prompt, &spec).unwrap();
            total += attention_score(&v, &e, true).unwrap();
        }
        assert!((total / 100.0).abs() < 3.0 / d.sqrt());
    }

    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let mut r = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn score_rises_with_planted_relevance() {
        let mut rhos = Vec::new();
        let mut scores = Vec::new();
        for seed in 0..100u64 {
            let rho = (seed % 11) as f64 / 10.0;
            let spec = EncoderSpec {
                seed,
                relevance_injection: RelevanceInjection::Constant(rho),
                ..EncoderSpec::default()
            };
            let v = encode_region(&ramp(), "count the vehicles", &spec, seed, 0).unwrap();
            let e = encode_prompt("count the vehicles", &spec).unwrap();
            rhos.push(rho);
            scores.push(attention_score(&v, &e, true).unwrap());
        }
        let spearman = pearson(&ranks(&rhos), &ranks(&scores));
        assert!(spearman > 0.9, "spearman {spearman}");
    }
}
