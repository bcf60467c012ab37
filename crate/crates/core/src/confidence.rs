//! Progressive confidence network.
//!
//! Stage `i` sees the pooled image features concatenated with the pooled
//! embeddings of the `i - 1` token blocks the onboard model has produced so
//! far. Each stage has its own input projection into a shared trunk; the
//! trunk regresses the similarity between onboard and ground outputs.
//!
//! All parameters live in one flat vector. Layers are views into it, which
//! keeps the optimizer, finite-difference checks and the on-disk format
//! trivially consistent with each other.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const MAGIC: &[u8; 4] = b"PCN1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub stages: usize,
    /// Dimension of the pooled image features.
    pub image_dim: usize,
    /// Dimension of one pooled token block.
    pub token_embed_dim: usize,
    /// Tokens generated between consecutive stages.
    pub token_block: usize,
    pub trunk_width: usize,
    pub hidden_layers: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            image_dim: 64,
            token_embed_dim: 16,
            token_block: 8,
            trunk_width: 16,
            hidden_layers: Vec::new(),
            thresholds: vec![0.5, 0.4],
            init_seed: 17,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.stages == 0 {
            errs.push("confidence.stages must be >= 1".to_string());
        }
        if self.thresholds.len() != self.stages {
            errs.push(format!(
                "confidence.thresholds has {} entries, expected {} (one per stage)",
                self.thresholds.len(),
                self.stages
            ));
        }
        if self.thresholds.iter().any(|t| t.is_nan()) {
            errs.push("confidence.thresholds must not be NaN".to_string());
        }
        if self.image_dim == 0 || self.trunk_width == 0 {
            errs.push("confidence.image_dim and confidence.trunk_width must be >= 1".to_string());
        }
        if self.stages > 1 && self.token_embed_dim == 0 {
            errs.push("confidence.token_embed_dim must be >= 1 with more than one stage".to_string());
        }
        if self.token_block == 0 {
            errs.push("confidence.token_block must be >= 1".to_string());
        }
        if self.hidden_layers.contains(&0) {
            errs.push("confidence.hidden_layers entries must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Input width of stage `stage` (1-based).
    pub fn stage_input_dim(&self, stage: usize) -> usize {
        self.image_dim + (stage - 1) * self.token_embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    in_dim: usize,
    out_dim: usize,
    offset: usize,
}

impl Layer {
    fn weights_len(&self) -> usize {
        self.in_dim * self.out_dim
    }

    fn len(&self) -> usize {
        self.weights_len() + self.out_dim
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.weights_len()
    }

    /// `out = W x + b`
    fn apply(&self, params: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = &params[self.offset..self.bias_offset()];
        let b = &params[self.bias_offset()..self.offset + self.len()];
        for (row, bias) in w.chunks_exact(self.in_dim).zip(b) {
            out.push(bias + fast_dot(row, x));
        }
    }
}

/// Dot product with four independent accumulators.
fn fast_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Per-stage features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInput {
    pub image_features: Vec<f64>,
    pub token_blocks: Vec<Vec<f64>>,
}

impl StageInput {
    pub fn image_only(image_features: Vec<f64>) -> Self {
        Self {
            image_features,
            token_blocks: Vec::new(),
        }
    }

    fn concat(&self) -> Vec<f64> {
        let mut v = self.image_features.clone();
        for b in &self.token_blocks {
            v.extend_from_slice(b);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfidenceDecision {
    Offload { stage: usize },
    Continue { stage: usize },
    AcceptOnboard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveConfidenceNet {
    config: NetConfig,
    projections: Vec<Layer>,
    hidden: Vec<Layer>,
    output: Layer,
    params: Vec<f64>,
}

impl ProgressiveConfidenceNet {
    /// Xavier-uniform initialization seeded by `config.init_seed`.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut net = Self::zeroed(config);
        let mut rng = rng::stream(net.config.init_seed, &[tag::NET_INIT]);
        let layers: Vec<Layer> = net
            .projections
            .iter()
            .chain(&net.hidden)
            .chain(std::iter::once(&net.output))
            .copied()
            .collect();
        for layer in layers {
            let bound = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut net.params[layer.offset..layer.bias_offset()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Random init with the scalar output layer set to zero.
    pub fn with_zero_output(config: NetConfig) -> Result<Self> {
        let mut net = Self::new(config)?;
        let out = net.output;
        net.params[out.offset..out.offset + out.len()].fill(0.0);
        Ok(net)
    }

    fn zeroed(config: NetConfig) -> Self {
        let mut offset = 0;
        let mut layer = |in_dim: usize, out_dim: usize| {
            let l = Layer { in_dim, out_dim, offset };
            offset += l.len();
            l
        };
        let projections: Vec<Layer> = (1..=config.stages)
            .map(|s| layer(config.stage_input_dim(s), config.trunk_width))
            .collect();
        let mut prev = config.trunk_width;
        let hidden: Vec<Layer> = config
            .hidden_layers
            .iter()
            .map(|&w| {
                let l = layer(prev, w);
                prev = w;
                l
            })
            .collect();
        let output = layer(prev, 1);
        Self {
            config,
            projections,
            hidden,
            output,
            params: vec![0.0; offset],
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn stages(&self) -> usize {
        self.config.stages
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.config.thresholds
    }

    pub fn set_thresholds(&mut self, thresholds: Vec<f64>) -> Result<()> {
        if thresholds.len() != self.config.stages {
            return Err(Error::invalid(format!(
                "{} thresholds for a {}-stage network",
                thresholds.len(),
                self.config.stages
            )));
        }
        self.config.thresholds = thresholds;
        Ok(())
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.config.stages {
            return Err(Error::invalid(format!(
                "stage {stage} outside 1..={}",
                self.config.stages
            )));
        }
        Ok(())
    }

    fn stage_vector(&self, stage: usize, input: &StageInput) -> Result<Vec<f64>> {
        self.check_stage(stage)?;
        if input.image_features.len() != self.config.image_dim {
            return Err(Error::invalid(format!(
                "image features have {} dims, network expects {}",
                input.image_features.len(),
                self.config.image_dim
            )));
        }
        if input.token_blocks.len() != stage - 1 {
            return Err(Error::invalid(format!(
                "stage {stage} takes {} token blocks, got {}",
                stage - 1,
                input.token_blocks.len()
            )));
        }
        if let Some(b) = input.token_blocks.iter().find(|b| b.len() != self.config.token_embed_dim) {
            return Err(Error::invalid(format!(
                "token block has {} dims, network expects {}",
                b.len(),
                self.config.token_embed_dim
            )));
        }
        Ok(input.concat())
    }

    /// Activations of every layer; the last entry is the scalar output.
    fn forward(&self, stage: usize, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.hidden.len() + 2);
        let mut z = Vec::new();
        self.projections[stage - 1].apply(&self.params, x, &mut z);
        acts.push(z);
        for layer in &self.hidden {
            let mut h = Vec::new();
            layer.apply(&self.params, acts.last().unwrap(), &mut h);
            h.iter_mut().for_each(|v| *v = v.tanh());
            acts.push(h);
        }
        let mut y = Vec::new();
        self.output.apply(&self.params, acts.last().unwrap(), &mut y);
        acts.push(y);
        acts
    }

    /// Predicted onboard/ground similarity at `stage` (1-based). The raw
    /// linear output is returned; clamp for display only.
    pub fn estimate(&self, stage: usize, input: &StageInput) -> Result<f64> {
        let x = self.stage_vector(stage, input)?;
        Ok(self.forward(stage, &x).last().unwrap()[0])
    }

    pub fn decide(&self, stage: usize, score: f64) -> Result<ConfidenceDecision> {
        self.check_stage(stage)?;
        Ok(decide(&self.config.thresholds, stage, score))
    }

    /// Accumulates `scale * d(y - target)^2` gradients for one stage input.
    fn backprop(&self, stage: usize, x: &[f64], target: f64, scale: f64, grad: &mut [f64]) -> f64 {
        let acts = self.forward(stage, x);
        let y = acts.last().unwrap()[0];
        let err = y - target;
        let dy = 2.0 * err * scale;

        let out = self.output;
        let last = &acts[acts.len() - 2];
        let mut delta: Vec<f64> = Vec::with_capacity(last.len());
        for (k, a) in last.iter().enumerate() {
            grad[out.offset + k] += dy * a;
            delta.push(dy * self.params[out.offset + k]);
        }
        grad[out.bias_offset()] += dy;

        for (li, layer) in self.hidden.iter().enumerate().rev() {
            let a = &acts[li + 1];
            let prev = &acts[li];
            let mut next = vec![0.0; layer.in_dim];
            let (w_grad, b_grad) = grad[layer.offset..layer.offset + layer.len()].split_at_mut(layer.weights_len());
            let weights = &self.params[layer.offset..layer.bias_offset()];
            for ((d, h), (gb, (g_row, w_row))) in delta
                .iter()
                .zip(a)
                .zip(b_grad.iter_mut().zip(w_grad.chunks_exact_mut(layer.in_dim).zip(weights.chunks_exact(layer.in_dim))))
            {
                let dz = d * (1.0 - h * h);
                for ((g, n), (w, p)) in g_row.iter_mut().zip(next.iter_mut()).zip(w_row.iter().zip(prev)) {
                    *g += dz * p;
                    *n += dz * w;
                }
                *gb += dz;
            }
            delta = next;
        }

        let proj = self.projections[stage - 1];
        let (w_grad, b_grad) = grad[proj.offset..proj.offset + proj.len()].split_at_mut(proj.weights_len());
        for ((d, gb), g_row) in delta.iter().zip(b_grad.iter_mut()).zip(w_grad.chunks_exact_mut(proj.in_dim)) {
            for (g, xc) in g_row.iter_mut().zip(x) {
                *g += d * xc;
            }
            *gb += d;
        }
        err * err
    }

    /// Mean over `batch` of the summed per-stage squared error, and its
    /// gradient with respect to `params()`.
    pub fn loss_and_gradient(&self, batch: &[&TrainingRecord]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        if batch.is_empty() {
            return Ok((0.0, grad));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for rec in batch {
            self.check_record(rec)?;
            for (s, input) in rec.stages.iter().enumerate() {
                let x = self.stage_vector(s + 1, input)?;
                loss += self.backprop(s + 1, &x, rec.target, scale, &mut grad);
            }
        }
        Ok((loss * scale, grad))
    }

    /// Mean summed-stage squared error over a dataset.
    pub fn loss(&self, data: &[TrainingRecord]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for rec in data {
            self.check_record(rec)?;
            for (s, input) in rec.stages.iter().enumerate() {
                let e = self.estimate(s + 1, input)? - rec.target;
                total += e * e;
            }
        }
        Ok(total / data.len() as f64)
    }

    fn check_record(&self, rec: &TrainingRecord) -> Result<()> {
        if rec.stages.len() != self.config.stages {
            return Err(Error::invalid(format!(
                "training record has {} stage inputs, network has {} stages",
                rec.stages.len(),
                self.config.stages
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        let dims = [
            c.stages,
            c.image_dim,
            c.token_embed_dim,
            c.token_block,
            c.trunk_width,
            c.hidden_layers.len(),
        ];
        for d in dims.iter().chain(&c.hidden_layers) {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.init_seed.to_le_bytes());
        for v in c.thresholds.iter().chain(&self.params) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a confidence network file (bad magic)".into()));
        }
        let mut u32s = [0usize; 6];
        for d in &mut u32s {
            *d = read_u32(&mut cur)? as usize;
        }
        let [stages, image_dim, token_embed_dim, token_block, trunk_width, n_hidden] = u32s;
        if n_hidden > 64 || stages > 1024 {
            return Err(Error::Format("implausible network header".into()));
        }
        let hidden_layers = (0..n_hidden)
            .map(|_| read_u32(&mut cur).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut seed = [0u8; 8];
        read_exact(&mut cur, &mut seed)?;
        let thresholds = (0..stages).map(|_| read_f64(&mut cur)).collect::<Result<Vec<_>>>()?;
        let config = NetConfig {
            stages,
            image_dim,
            token_embed_dim,
            token_block,
            trunk_width,
            hidden_layers,
            thresholds,
            init_seed: u64::from_le_bytes(seed),
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("network header: {e}")))?;
        let mut net = Self::zeroed(config);
        if cur.len() != 8 * net.params.len() {
            return Err(Error::Format(format!(
                "parameter block has {} bytes, header implies {}",
                cur.len(),
                8 * net.params.len()
            )));
        }
        for p in &mut net.params {
            *p = read_f64(&mut cur)?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::Format("truncated network file".into()))
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(cur: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(cur, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Threshold rule: a score strictly below `thresholds[stage-1]` offloads;
/// otherwise continue, or accept the onboard answer at the last stage.
pub fn decide(thresholds: &[f64], stage: usize, score: f64) -> ConfidenceDecision {
    if score < thresholds[stage - 1] {
        ConfidenceDecision::Offload { stage }
    } else if stage < thresholds.len() {
        ConfidenceDecision::Continue { stage }
    } else {
        ConfidenceDecision::AcceptOnboard
    }
}

/// One supervised example: the inputs every stage would see, and the
/// observed onboard/ground similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub stages: Vec<StageInput>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            seed: 23,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.learning_rate > 0.0) {
            errs.push(format!("training.learning_rate must be > 0 (got {})", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("training.momentum must be in [0,1) (got {})", self.momentum));
        }
        if self.batch_size == 0 {
            errs.push("training.batch_size must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Mini-batch SGD with momentum on the summed per-stage squared error.
/// Returns the trained network and the per-epoch training loss (mean of
/// the mini-batch losses seen during that epoch).
pub fn train(
    net: &ProgressiveConfidenceNet,
    dataset: &[TrainingRecord],
    cfg: &TrainConfig,
) -> Result<(ProgressiveConfidenceNet, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    cfg.validate()?;
    for rec in dataset {
        net.check_record(rec)?;
        if !rec.target.is_finite() {
            return Err(Error::invalid("training target is not finite"));
        }
    }
    let mut net = net.clone();
    let mut velocity = vec![0.0; net.params.len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingRecord> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grad) = net.loss_and_gradient(&batch)?;
            epoch_loss += loss * batch.len() as f64;
            for ((p, v), g) in net.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v;
            }
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    Ok((net, history))
}

/// Cosine similarity of two output embeddings.
pub fn similarity_target(sat_output_embedding: &[f64], gs_output_embedding: &[f64]) -> Result<f64> {
    embedding::cosine(sat_output_embedding, gs_output_embedding)
}
