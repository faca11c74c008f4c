//! Stage I: the emotion classification head.
//!
//! The head mixes the transformer layers of a [`LayerStack`] with softmax
//! weights, averages the mixture over time, and applies two affine maps:
//! `D -> F` (the emotion feature) and `F -> C` (class logits). There is no
//! hidden nonlinearity, so the feature is a linear map of the input features.
//! Gradients are derived by hand.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::config::{HeadConfig, PipelineConfig};
use crate::error::{AvError, Result};
use crate::formats::{self, ByteReader};
use crate::types::{Dataset, EmotionFeature, LayerStack, Split};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVHD";

/// Trainable tensors of the head. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    /// One logit per layer; softmax gives the layer mixing weights.
    pub layer_logits: Vec<f64>,
    /// `D x F`, row-major: `proj1_w[d * F + f]`.
    pub proj1_w: Vec<f64>,
    pub proj1_b: Vec<f64>,
    /// `F x C`, row-major: `proj2_w[f * C + c]`.
    pub proj2_w: Vec<f64>,
    pub proj2_b: Vec<f64>,
}

impl HeadTensors {
    pub fn zeros(layers: usize, dims: usize, feature_dim: usize, classes: usize) -> Self {
        HeadTensors {
            layer_logits: vec![0.0; layers],
            proj1_w: vec![0.0; dims * feature_dim],
            proj1_b: vec![0.0; feature_dim],
            proj2_w: vec![0.0; feature_dim * classes],
            proj2_b: vec![0.0; classes],
        }
    }

    /// Parameter groups in declaration order.
    pub fn groups(&self) -> [&[f64]; 5] {
        [
            &self.layer_logits,
            &self.proj1_w,
            &self.proj1_b,
            &self.proj2_w,
            &self.proj2_b,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.layer_logits,
            &mut self.proj1_w,
            &mut self.proj1_b,
            &mut self.proj2_w,
            &mut self.proj2_b,
        ]
    }

    pub fn num_values(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    fn add_scaled(&mut self, other: &HeadTensors, scale: f64) {
        for (dst, src) in self.groups_mut().into_iter().zip(other.groups()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layers: usize,
    pub dims: usize,
    pub feature_dim: usize,
    /// Class names; logit `c` scores `classes[c]`.
    pub classes: Vec<String>,
    pub tensors: HeadTensors,
}

/// Logits and emotion feature of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub logits: Vec<f64>,
    pub feature: EmotionFeature,
}

/// Intermediate activations kept for the backward pass.
struct ForwardCache {
    layer_weights: Vec<f64>,
    /// Temporal mean of each layer, `L x D`.
    layer_means: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    feature: Vec<f64>,
    logits: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`, evaluated with the max-shifted log-sum-exp.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(AvError::input(format!(
            "label index {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[label]).max(0.0))
}

impl HeadParams {
    /// Glorot-uniform projections, zero biases, uniform layer weights.
    pub fn init<R: Rng>(layers: usize, dims: usize, feature_dim: usize, classes: Vec<String>, rng: &mut R) -> Self {
        let c = classes.len();
        let mut t = HeadTensors::zeros(layers, dims, feature_dim, c);
        let s1 = (6.0 / (dims + feature_dim) as f64).sqrt();
        for w in &mut t.proj1_w {
            *w = rng.random_range(-s1..s1);
        }
        let s2 = (6.0 / (feature_dim + c) as f64).sqrt();
        for w in &mut t.proj2_w {
            *w = rng.random_range(-s2..s2);
        }
        HeadParams {
            layers,
            dims,
            feature_dim,
            classes,
            tensors: t,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn layer_weights(&self) -> Vec<f64> {
        softmax(&self.tensors.layer_logits)
    }

    fn check_shapes(&self) -> Result<()> {
        let t = &self.tensors;
        let (l, d, f, c) = (self.layers, self.dims, self.feature_dim, self.num_classes());
        if t.layer_logits.len() != l
            || t.proj1_w.len() != d * f
            || t.proj1_b.len() != f
            || t.proj2_w.len() != f * c
            || t.proj2_b.len() != c
        {
            return Err(AvError::shape("head tensors inconsistent with declared shapes"));
        }
        Ok(())
    }

    fn check_stack(&self, stack: &LayerStack) -> Result<()> {
        if stack.layers() != self.layers || stack.dims() != self.dims {
            return Err(AvError::shape(format!(
                "stack `{}` is {}x{}x{}, head expects {} layers of dimension {}",
                stack.utterance_id,
                stack.layers(),
                stack.frames(),
                stack.dims(),
                self.layers,
                self.dims
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, stack: &LayerStack) -> Result<ForwardCache> {
        self.check_stack(stack)?;
        let (d_in, f_dim, c_dim) = (self.dims, self.feature_dim, self.num_classes());
        let t = &self.tensors;
        let layer_weights = self.layer_weights();
        let inv_t = 1.0 / stack.frames() as f64;

        let mut layer_means = Vec::with_capacity(self.layers);
        let mut pooled = vec![0.0; d_in];
        for (l, &w) in layer_weights.iter().enumerate() {
            let mut mean = vec![0.0; d_in];
            for fr in 0..stack.frames() {
                for (m, &x) in mean.iter_mut().zip(stack.frame(l, fr)) {
                    *m += x as f64;
                }
            }
            for (p, m) in pooled.iter_mut().zip(mean.iter_mut()) {
                *m *= inv_t;
                *p += w * *m;
            }
            layer_means.push(mean);
        }

        let mut feature = t.proj1_b.clone();
        for (d, &h) in pooled.iter().enumerate() {
            let row = &t.proj1_w[d * f_dim..(d + 1) * f_dim];
            for (z, &w) in feature.iter_mut().zip(row) {
                *z += h * w;
            }
        }

        let mut logits = t.proj2_b.clone();
        for (f, &z) in feature.iter().enumerate() {
            let row = &t.proj2_w[f * c_dim..(f + 1) * c_dim];
            for (o, &w) in logits.iter_mut().zip(row) {
                *o += z * w;
            }
        }

        Ok(ForwardCache {
            layer_weights,
            layer_means,
            pooled,
            feature,
            logits,
        })
    }

    pub fn forward(&self, stack: &LayerStack) -> Result<HeadOutput> {
        let cache = self.forward_cached(stack)?;
        Ok(HeadOutput {
            logits: cache.logits,
            feature: EmotionFeature {
                utterance_id: stack.utterance_id.clone(),
                vector: cache.feature,
            },
        })
    }

    /// Cross-entropy loss and its gradient with respect to every tensor.
    pub fn backward(&self, stack: &LayerStack, label: usize) -> Result<(f64, HeadTensors)> {
        let cache = self.forward_cached(stack)?;
        let loss = cross_entropy_loss(&cache.logits, label)?;
        let (d_in, f_dim, c_dim) = (self.dims, self.feature_dim, self.num_classes());
        let t = &self.tensors;
        let mut g = HeadTensors::zeros(self.layers, d_in, f_dim, c_dim);

        let mut g_logits = softmax(&cache.logits);
        g_logits[label] -= 1.0;

        // proj2
        let mut g_feature = vec![0.0; f_dim];
        for f in 0..f_dim {
            let z = cache.feature[f];
            let mut acc = 0.0;
            for c in 0..c_dim {
                g.proj2_w[f * c_dim + c] = z * g_logits[c];
                acc += t.proj2_w[f * c_dim + c] * g_logits[c];
            }
            g_feature[f] = acc;
        }
        g.proj2_b.copy_from_slice(&g_logits);

        // proj1
        let mut g_pooled = vec![0.0; d_in];
        for d in 0..d_in {
            let h = cache.pooled[d];
            let mut acc = 0.0;
            for f in 0..f_dim {
                g.proj1_w[d * f_dim + f] = h * g_feature[f];
                acc += t.proj1_w[d * f_dim + f] * g_feature[f];
            }
            g_pooled[d] = acc;
        }
        g.proj1_b.copy_from_slice(&g_feature);

        // Softmax layer weighting: dL/dlogit_l = w_l * (s_l - sum_k w_k s_k).
        let scores: Vec<f64> = cache
            .layer_means
            .iter()
            .map(|m| m.iter().zip(&g_pooled).map(|(a, b)| a * b).sum())
            .collect();
        let mean_score: f64 = cache.layer_weights.iter().zip(&scores).map(|(w, s)| w * s).sum();
        for (l, gl) in g.layer_logits.iter_mut().enumerate() {
            *gl = cache.layer_weights[l] * (scores[l] - mean_score);
        }

        Ok((loss, g))
    }
}

/// Per-epoch loss history of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
    pub rng_seed: u64,
}

/// Knobs used by tests and ablations; the defaults train everything.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub freeze_layer_logits: bool,
    pub freeze_proj1: bool,
    /// Start from these parameters instead of a fresh initialization.
    pub init: Option<HeadParams>,
}

/// Labeled training examples as (stack, class index).
fn training_examples<'a>(dataset: &'a Dataset<LayerStack>, classes: &[String]) -> Result<Vec<(&'a LayerStack, usize)>> {
    dataset
        .split_rows(Split::Train)
        .filter_map(|r| r.label.as_ref().map(|l| (r, l)))
        .map(|(r, l)| {
            let idx = classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| AvError::UnknownLabel(l.clone()))?;
            Ok((dataset.require_feature(&r.utterance_id)?, idx))
        })
        .collect()
}

/// Sorted distinct labels of the training split.
pub fn training_classes<F>(dataset: &Dataset<F>) -> Vec<String> {
    let mut classes: Vec<String> = dataset
        .split_rows(Split::Train)
        .filter_map(|r| r.label.clone())
        .collect();
    classes.sort();
    classes.dedup();
    classes
}

pub fn train_head(dataset: &Dataset<LayerStack>, config: &PipelineConfig) -> Result<(HeadParams, TrainReport)> {
    train_head_with(dataset, &config.head, TrainOptions::default())
}

pub fn train_head_with(
    dataset: &Dataset<LayerStack>,
    config: &HeadConfig,
    options: TrainOptions,
) -> Result<(HeadParams, TrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let classes = match &options.init {
        Some(p) => p.classes.clone(),
        None => training_classes(dataset),
    };
    if classes.len() < 2 {
        return Err(AvError::input(format!(
            "need at least two labeled classes in the training split, found {}",
            classes.len()
        )));
    }
    let examples = training_examples(dataset, &classes)?;
    for (c, name) in classes.iter().enumerate() {
        if !examples.iter().any(|&(_, idx)| idx == c) {
            return Err(AvError::input(format!("class `{name}` has no training rows")));
        }
    }
    let (layers, dims) = (examples[0].0.layers(), examples[0].0.dims());

    let mut params = match options.init {
        Some(p) => {
            p.check_shapes()?;
            p
        }
        None => HeadParams::init(layers, dims, config.feature_dim, classes, &mut rng),
    };
    for (s, _) in &examples {
        params.check_stack(s)?;
    }

    let mut adam = Adam::new(params.tensors.num_values(), config.adam_lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad = HeadTensors::zeros(layers, dims, params.feature_dim, params.num_classes());
            for &i in batch {
                let (stack, label) = examples[i];
                let (loss, g) = params.backward(stack, label)?;
                if !loss.is_finite() {
                    return Err(AvError::numerical(format!(
                        "non-finite loss at epoch {epoch} on `{}`",
                        stack.utterance_id
                    )));
                }
                loss_sum += loss;
                grad.add_scaled(&g, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grad.groups_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            if options.freeze_layer_logits {
                grad.layer_logits.iter_mut().for_each(|v| *v = 0.0);
            }
            adam.begin_step();
            let mut offset = 0;
            for (i, (p, g)) in params.tensors.groups_mut().into_iter().zip(grad.groups()).enumerate() {
                let frozen = (i == 0 && options.freeze_layer_logits) || ((i == 1 || i == 2) && options.freeze_proj1);
                if !frozen {
                    adam.update(offset, p, g);
                }
                offset += p.len();
            }
        }
        let mean = loss_sum / examples.len() as f64;
        log::debug!("head epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }

    let correct = examples
        .iter()
        .map(|&(s, label)| params.forward(s).map(|o| argmax(&o.logits) == label))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&ok| ok)
        .count();
    let report = TrainReport {
        epoch_losses,
        final_train_accuracy: correct as f64 / examples.len() as f64,
        rng_seed: config.rng_seed,
    };
    Ok((params, report))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One feature per dataset row, in row order.
pub fn extract_features(params: &HeadParams, dataset: &Dataset<LayerStack>) -> Result<Vec<EmotionFeature>> {
    dataset
        .rows()
        .par_iter()
        .map(|r| {
            let stack = dataset.require_feature(&r.utterance_id)?;
            Ok(params.forward(stack)?.feature)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    layers: usize,
    dims: usize,
    feature_dim: usize,
    classes: Vec<String>,
    config: HeadConfig,
    seed: u64,
}

pub fn encode_checkpoint(params: &HeadParams, config: &HeadConfig) -> Result<Vec<u8>> {
    params.check_shapes()?;
    let header = CheckpointHeader {
        layers: params.layers,
        dims: params.dims,
        feature_dim: params.feature_dim,
        classes: params.classes.clone(),
        config: config.clone(),
        seed: config.rng_seed,
    };
    let json = serde_json::to_string(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    formats::put_json_header(&mut out, &json)?;
    for g in params.tensors.groups() {
        for &v in g {
            formats::put_f64(&mut out, v);
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &HeadParams, config: &HeadConfig) -> Result<()> {
    formats::write_file(path.as_ref(), &encode_checkpoint(params, config)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(HeadParams, HeadConfig)> {
    let path = path.as_ref();
    let bytes = formats::read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let h: CheckpointHeader = formats::json_header(&mut r)?;
    let c = h.classes.len();
    let mut tensors = HeadTensors::zeros(h.layers, h.dims, h.feature_dim, c);
    for g in tensors.groups_mut() {
        let n = g.len();
        *g = r.f64_vec(n)?;
    }
    r.finish()?;
    let params = HeadParams {
        layers: h.layers,
        dims: h.dims,
        feature_dim: h.feature_dim,
        classes: h.classes,
        tensors,
    };
    params
        .check_shapes()
        .map_err(|e| AvError::format(path, e.to_string()))?;
    Ok((params, h.config))
}
