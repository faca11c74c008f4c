//! Stage II: anchored embedding of emotion features onto the AV plane.
//!
//! Points start at their label's anchor (plus a small Gaussian jitter) and
//! are refined by stochastic gradient steps on the fuzzy-set cross-entropy:
//! sampled graph edges pull their endpoints together, uniformly drawn
//! negatives push them apart.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorTable, Av};
use crate::config::EmbedConfig;
use crate::error::{AvError, Result};
use crate::formats::{self, ByteReader};
use crate::graph::{self, Edge, FuzzyGraph};
use crate::types::{AvPoint, EmotionFeature};

pub const MODEL_MAGIC: &[u8; 4] = b"AVEM";

/// Coordinates are kept inside `[-AV_BOUND, AV_BOUND]`.
pub const AV_BOUND: f64 = 1.2;
pub const REPULSION_EPS: f64 = 0.001;
pub const GRAD_CLIP: f64 = 4.0;
const CURVE_SAMPLES: usize = 300;

/// Parameters of the low-dimensional similarity `1 / (1 + a r^(2b))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub a: f64,
    pub b: f64,
    /// Sum of squared residuals of the fit.
    pub residual: f64,
}

impl CurveParams {
    pub fn phi(&self, r: f64) -> f64 {
        1.0 / (1.0 + self.a * r.powf(2.0 * self.b))
    }

    /// Coefficient `c` with `grad_x log phi(|x - y|) = c * (x - y)`.
    pub fn attractive_coeff(&self, dist_sq: f64) -> f64 {
        if dist_sq <= 0.0 {
            return 0.0;
        }
        -2.0 * self.a * self.b * dist_sq.powf(self.b - 1.0) / (1.0 + self.a * dist_sq.powf(self.b))
    }

    /// Coefficient `c` with `grad_x log(1 - phi(|x - y|)) = c * (x - y)` when
    /// `eps = 0`; `eps` regularizes the pole at zero distance.
    pub fn repulsive_coeff(&self, dist_sq: f64, eps: f64) -> f64 {
        2.0 * self.b / ((eps + dist_sq) * (1.0 + self.a * dist_sq.powf(self.b)))
    }

    /// `d/dr log phi(r)`.
    pub fn d_log_phi(&self, r: f64) -> f64 {
        self.attractive_coeff(r * r) * r
    }

    /// `d/dr log(1 - phi(r))`.
    pub fn d_log_one_minus_phi(&self, r: f64) -> f64 {
        self.repulsive_coeff(r * r, 0.0) * r
    }
}

fn curve_target(r: f64, min_dist: f64, spread: f64) -> f64 {
    if r <= min_dist {
        1.0
    } else {
        (-(r - min_dist) / spread).exp()
    }
}

/// Least-squares fit of `phi` to the offset exponential, by Levenberg-Marquardt
/// on 300 evenly spaced radii in `(0, 3 * spread]`.
pub fn fit_curve(min_dist: f64, spread: f64) -> Result<CurveParams> {
    if !(min_dist > 0.0 && min_dist < spread && spread.is_finite()) {
        return Err(AvError::input(format!(
            "curve fit needs 0 < min_dist < spread, got {min_dist}, {spread}"
        )));
    }
    let xs: Vec<f64> = (1..=CURVE_SAMPLES)
        .map(|i| 3.0 * spread * i as f64 / CURVE_SAMPLES as f64)
        .collect();
    let ys: Vec<f64> = xs.iter().map(|&x| curve_target(x, min_dist, spread)).collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };

    let (mut a, mut b) = (1.0, 1.0);
    let mut cost = sse(a, b);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        // Normal equations J^T J and J^T r for the two parameters.
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            let p = x.powf(2.0 * b);
            let denom = 1.0 + a * p;
            let r = 1.0 / denom - y;
            let da = -p / (denom * denom);
            let db = -a * p * 2.0 * x.ln() / (denom * denom);
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let (m11, m22) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
            let det = m11 * m22 - jab * jab;
            if det.abs() < f64::MIN_POSITIVE {
                lambda *= 10.0;
                continue;
            }
            let step_a = -(m22 * ga - jab * gb) / det;
            let step_b = -(m11 * gb - jab * ga) / det;
            let (na, nb) = (a + step_a, b + step_b);
            if na > 0.0 && nb > 0.0 {
                let nc = sse(na, nb);
                if nc.is_finite() && nc <= cost {
                    let rel = (cost - nc) / cost.max(f64::MIN_POSITIVE);
                    a = na;
                    b = nb;
                    cost = nc;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = rel > 1e-15 || step_a.abs() + step_b.abs() > 1e-14;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if !cost.is_finite() || !a.is_finite() || !b.is_finite() {
        return Err(AvError::numerical("curve fit diverged"));
    }
    Ok(CurveParams { a, b, residual: cost })
}

/// Anchor positions plus `N(0, sigma^2)` jitter, one point per label.
pub fn init_embedding<S: AsRef<str>, R: Rng>(
    labels: &[S],
    anchors: &AnchorTable,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<[f64; 2]>> {
    labels
        .iter()
        .map(|l| {
            let Av { valence, arousal } = anchors.lookup(l.as_ref())?;
            let dv: f64 = rng.sample(StandardNormal);
            let da: f64 = rng.sample(StandardNormal);
            Ok([valence + sigma * dv, arousal + sigma * da])
        })
        .collect()
}

/// Schedule and step constants of one optimization run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub negative_sample_rate: usize,
    /// Also move the tail of each attractive edge.
    pub move_tail: bool,
    /// Negatives are drawn from points `0..negative_pool`.
    pub negative_pool: usize,
    /// Optimization runs on coordinates multiplied by this factor.
    pub layout_scale: f64,
}

impl LayoutParams {
    pub fn from_config(config: &EmbedConfig, epochs: usize, negative_pool: usize) -> Self {
        LayoutParams {
            epochs,
            learning_rate: config.opt_lr,
            negative_sample_rate: config.negative_sample_rate,
            move_tail: config.move_both,
            negative_pool,
            layout_scale: config.layout_scale,
        }
    }
}

/// Epochs between consecutive samples of each edge: `max_w / w`.
pub fn epochs_per_sample(edges: &[Edge]) -> Vec<f64> {
    let max_w = edges.iter().map(|e| e.w).fold(0.0, f64::max);
    edges.iter().map(|e| max_w / e.w).collect()
}

#[inline]
fn clip(v: f64) -> f64 {
    v.clamp(-GRAD_CLIP, GRAD_CLIP)
}

// The optimizer works on coordinates multiplied by `layout_scale`; the clamp
// after dividing back keeps non-power-of-two scales inside the bound.
fn scale_up(coords: &mut [[f64; 2]], s: f64) {
    for c in coords {
        c[0] *= s;
        c[1] *= s;
    }
}

#[inline]
fn scale_down(c: [f64; 2], s: f64) -> [f64; 2] {
    [
        (c[0] / s).clamp(-AV_BOUND, AV_BOUND),
        (c[1] / s).clamp(-AV_BOUND, AV_BOUND),
    ]
}

/// Uniform draw from `0..pool` skipping `exclude`, or `None` if nothing is left.
#[inline]
fn draw_negative<R: Rng>(rng: &mut R, pool: usize, exclude: usize) -> Option<usize> {
    if exclude < pool {
        if pool < 2 {
            return None;
        }
        let r = rng.random_range(0..pool - 1);
        Some(if r >= exclude { r + 1 } else { r })
    } else if pool == 0 {
        None
    } else {
        Some(rng.random_range(0..pool))
    }
}

fn non_finite(epoch: usize, edge: &Edge, coords: &[[f64; 2]]) -> AvError {
    AvError::numerical(format!(
        "non-finite coordinate at epoch {epoch} on edge {}->{} (w = {}): head {:?}, tail {:?}",
        edge.i, edge.j, edge.w, coords[edge.i], coords[edge.j]
    ))
}

/// Sequential, seeded optimization loop. `on_epoch` sees the coordinates
/// after every epoch.
pub fn optimize_layout<R: Rng>(
    coords: &mut [[f64; 2]],
    edges: &[Edge],
    curve: &CurveParams,
    params: &LayoutParams,
    rng: &mut R,
    mut on_epoch: impl FnMut(usize, &[[f64; 2]]),
) -> Result<()> {
    if edges.is_empty() || params.epochs == 0 {
        return Ok(());
    }
    let scale = params.layout_scale;
    scale_up(coords, scale);
    let result = optimize_scaled(coords, edges, curve, params, rng, &mut on_epoch);
    for c in coords.iter_mut() {
        *c = scale_down(*c, scale);
    }
    result
}

fn optimize_scaled<R: Rng>(
    coords: &mut [[f64; 2]],
    edges: &[Edge],
    curve: &CurveParams,
    params: &LayoutParams,
    rng: &mut R,
    on_epoch: &mut impl FnMut(usize, &[[f64; 2]]),
) -> Result<()> {
    let scale = params.layout_scale;
    let bound = AV_BOUND * scale;
    let clamp_av = |v: f64| v.clamp(-bound, bound);
    let mut view = vec![[0.0; 2]; coords.len()];
    let per_sample = epochs_per_sample(edges);
    let mut next = per_sample.clone();
    for epoch in 1..=params.epochs {
        let alpha = params.learning_rate * (1.0 - (epoch - 1) as f64 / params.epochs as f64);
        for (e, edge) in edges.iter().enumerate() {
            if next[e] > epoch as f64 {
                continue;
            }
            next[e] += per_sample[e];
            let (i, j) = (edge.i, edge.j);

            let diff = [coords[i][0] - coords[j][0], coords[i][1] - coords[j][1]];
            let coeff = curve.attractive_coeff(diff[0] * diff[0] + diff[1] * diff[1]);
            for d in 0..2 {
                let g = clip(coeff * diff[d]) * alpha;
                coords[i][d] = clamp_av(coords[i][d] + g);
                if params.move_tail {
                    coords[j][d] = clamp_av(coords[j][d] - g);
                }
            }

            for _ in 0..params.negative_sample_rate {
                let Some(l) = draw_negative(rng, params.negative_pool, i) else {
                    break;
                };
                let diff = [coords[i][0] - coords[l][0], coords[i][1] - coords[l][1]];
                let dsq = diff[0] * diff[0] + diff[1] * diff[1];
                let coeff = if dsq > 0.0 {
                    curve.repulsive_coeff(dsq, REPULSION_EPS)
                } else {
                    0.0
                };
                for d in 0..2 {
                    let g = if coeff > 0.0 { clip(coeff * diff[d]) } else { GRAD_CLIP };
                    coords[i][d] = clamp_av(coords[i][d] + g * alpha);
                }
            }

            if !(coords[i][0].is_finite() && coords[i][1].is_finite())
                || !(coords[j][0].is_finite() && coords[j][1].is_finite())
            {
                return Err(non_finite(epoch, edge, coords));
            }
        }
        for (v, c) in view.iter_mut().zip(coords.iter()) {
            *v = scale_down(*c, scale);
        }
        on_epoch(epoch, &view);
    }
    Ok(())
}

/// Hogwild-style variant: edge shards run concurrently and write coordinates
/// without synchronization (last write wins). Results depend on scheduling.
pub fn optimize_layout_parallel(
    coords: &mut [[f64; 2]],
    edges: &[Edge],
    curve: &CurveParams,
    params: &LayoutParams,
    seed: u64,
    shards: usize,
) -> Result<()> {
    if edges.is_empty() || params.epochs == 0 {
        return Ok(());
    }
    let shards = shards.max(1);
    let scale = params.layout_scale;
    let bound = AV_BOUND * scale;
    let clamp_av = |v: f64| v.clamp(-bound, bound);
    scale_up(coords, scale);
    let shared: Vec<[AtomicU64; 2]> = coords
        .iter()
        .map(|c| [AtomicU64::new(c[0].to_bits()), AtomicU64::new(c[1].to_bits())])
        .collect();
    let load = |p: usize, d: usize| f64::from_bits(shared[p][d].load(Ordering::Relaxed));
    let store = |p: usize, d: usize, v: f64| shared[p][d].store(v.to_bits(), Ordering::Relaxed);

    let per_sample = epochs_per_sample(edges);
    let mut next = per_sample.clone();
    let chunk = edges.len().div_ceil(shards);
    let mut rngs: Vec<ChaCha8Rng> = (0..edges.len().div_ceil(chunk))
        .map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(1000 + s as u64);
            r
        })
        .collect();

    for epoch in 1..=params.epochs {
        let alpha = params.learning_rate * (1.0 - (epoch - 1) as f64 / params.epochs as f64);
        edges
            .par_chunks(chunk)
            .zip(next.par_chunks_mut(chunk))
            .zip(per_sample.par_chunks(chunk))
            .zip(rngs.par_iter_mut())
            .for_each(|(((edges, next), per_sample), rng)| {
                for ((edge, nx), &ps) in edges.iter().zip(next.iter_mut()).zip(per_sample) {
                    if *nx > epoch as f64 {
                        continue;
                    }
                    *nx += ps;
                    let (i, j) = (edge.i, edge.j);
                    let diff = [load(i, 0) - load(j, 0), load(i, 1) - load(j, 1)];
                    let coeff = curve.attractive_coeff(diff[0] * diff[0] + diff[1] * diff[1]);
                    for d in 0..2 {
                        let g = clip(coeff * diff[d]) * alpha;
                        store(i, d, clamp_av(load(i, d) + g));
                        if params.move_tail {
                            store(j, d, clamp_av(load(j, d) - g));
                        }
                    }
                    for _ in 0..params.negative_sample_rate {
                        let Some(l) = draw_negative(rng, params.negative_pool, i) else {
                            break;
                        };
                        let diff = [load(i, 0) - load(l, 0), load(i, 1) - load(l, 1)];
                        let dsq = diff[0] * diff[0] + diff[1] * diff[1];
                        let coeff = if dsq > 0.0 {
                            curve.repulsive_coeff(dsq, REPULSION_EPS)
                        } else {
                            0.0
                        };
                        for d in 0..2 {
                            let g = if coeff > 0.0 { clip(coeff * diff[d]) } else { GRAD_CLIP };
                            store(i, d, clamp_av(load(i, d) + g * alpha));
                        }
                    }
                }
            });
    }
    for (c, s) in coords.iter_mut().zip(&shared) {
        *c = scale_down(
            [
                f64::from_bits(s[0].load(Ordering::Relaxed)),
                f64::from_bits(s[1].load(Ordering::Relaxed)),
            ],
            scale,
        );
        if !(c[0].is_finite() && c[1].is_finite()) {
            return Err(AvError::numerical(format!(
                "non-finite coordinate {c:?} after parallel run"
            )));
        }
    }
    Ok(())
}

/// Scheduling of the optimizer loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Deterministic,
    /// Unsynchronized concurrent updates over this many edge shards.
    Parallel { threads: usize },
}

/// Random stream used for the initial jitter of training points.
pub(crate) const INIT_STREAM: u64 = 0;
pub(crate) const OPTIMIZE_STREAM: u64 = 1;
pub(crate) const TRANSFORM_INIT_STREAM: u64 = 2;
pub(crate) const TRANSFORM_OPTIMIZE_STREAM: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Everything needed to place new utterances against a fitted embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedModel {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    /// Training features, rounded to `f32` precision.
    pub features: Vec<Vec<f64>>,
    pub embedding: Vec<[f64; 2]>,
    pub graph: FuzzyGraph,
    pub curve: CurveParams,
    pub anchors: AnchorTable,
    pub config: EmbedConfig,
    pub seed: u64,
}

impl EmbedModel {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn points(&self) -> Vec<AvPoint> {
        self.ids
            .iter()
            .zip(&self.embedding)
            .map(|(id, c)| AvPoint {
                utterance_id: id.clone(),
                valence: c[0],
                arousal: c[1],
            })
            .collect()
    }
}

fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// Builds the graph, places points at their anchors and optimizes them.
pub fn fit<S: AsRef<str>>(
    features: &[EmotionFeature],
    labels: &[S],
    anchors: &AnchorTable,
    config: &EmbedConfig,
) -> Result<EmbedModel> {
    fit_with_mode(features, labels, anchors, config, ExecMode::Deterministic)
}

pub fn fit_with_mode<S: AsRef<str>>(
    features: &[EmotionFeature],
    labels: &[S],
    anchors: &AnchorTable,
    config: &EmbedConfig,
    mode: ExecMode,
) -> Result<EmbedModel> {
    if features.len() != labels.len() {
        return Err(AvError::shape(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let n = features.len();
    if config.k_neighbors >= n {
        return Err(AvError::input(format!(
            "k_neighbors = {} must be smaller than the {n} training points",
            config.k_neighbors
        )));
    }
    let labels: Vec<String> = labels
        .iter()
        .map(|l| {
            let l = crate::anchors::normalize_label(l.as_ref());
            if anchors.contains(&l) {
                Ok(l)
            } else {
                Err(AvError::UnknownLabel(l))
            }
        })
        .collect::<Result<_>>()?;
    let feats: Vec<Vec<f64>> = features.iter().map(|f| quantize(&f.vector)).collect();

    let optional: Vec<Option<&str>> = labels.iter().map(|l| Some(l.as_str())).collect();
    let graph = graph::build_graph(&feats, &optional, config)?;
    let curve = fit_curve(config.min_dist, config.spread)?;

    let seed = config.rng_seed;
    let mut embedding = init_embedding(&labels, anchors, config.init_sigma, &mut stream_rng(seed, INIT_STREAM))?;
    let params = LayoutParams::from_config(config, config.epochs, n);
    match mode {
        ExecMode::Deterministic => optimize_layout(
            &mut embedding,
            &graph.edges,
            &curve,
            &params,
            &mut stream_rng(seed, OPTIMIZE_STREAM),
            |_, _| {},
        )?,
        ExecMode::Parallel { threads } => {
            optimize_layout_parallel(&mut embedding, &graph.edges, &curve, &params, seed, threads)?
        }
    }

    Ok(EmbedModel {
        ids: features.iter().map(|f| f.utterance_id.clone()).collect(),
        labels,
        features: feats,
        embedding,
        graph,
        curve,
        anchors: anchors.clone(),
        config: config.clone(),
        seed,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    config: EmbedConfig,
    curve: CurveParams,
    seed: u64,
    n: usize,
    feature_dim: usize,
    n_edges: usize,
    ids: Vec<String>,
    labels: Vec<String>,
    anchors: BTreeMap<String, [f64; 2]>,
}

pub fn encode_model(model: &EmbedModel) -> Result<Vec<u8>> {
    let n = model.len();
    let dim = model.feature_dim();
    let header = ModelHeader {
        config: model.config.clone(),
        curve: model.curve,
        seed: model.seed,
        n,
        feature_dim: dim,
        n_edges: model.graph.edges.len(),
        ids: model.ids.clone(),
        labels: model.labels.clone(),
        anchors: model
            .anchors
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_array()))
            .collect(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    formats::put_json_header(&mut out, &serde_json::to_string(&header)?)?;
    for f in &model.features {
        if f.len() != dim {
            return Err(AvError::shape("ragged training features"));
        }
        for &v in f {
            formats::put_f32(&mut out, v as f32);
        }
    }
    for c in &model.embedding {
        formats::put_f64(&mut out, c[0]);
        formats::put_f64(&mut out, c[1]);
    }
    for e in &model.graph.edges {
        formats::put_u32(&mut out, formats::to_u32(e.i, "edge index")?);
        formats::put_u32(&mut out, formats::to_u32(e.j, "edge index")?);
        formats::put_f64(&mut out, e.w);
    }
    for &v in model.graph.rho.iter().chain(&model.graph.sigma) {
        formats::put_f64(&mut out, v);
    }
    Ok(out)
}

pub fn save_model(path: impl AsRef<Path>, model: &EmbedModel) -> Result<()> {
    formats::write_file(path.as_ref(), &encode_model(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EmbedModel> {
    let path = path.as_ref();
    let bytes = formats::read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(MODEL_MAGIC)?;
    let h: ModelHeader = formats::json_header(&mut r)?;
    if h.ids.len() != h.n || h.labels.len() != h.n {
        return Err(r.err("header ids/labels disagree with n"));
    }
    let flat = r.f32_vec(h.n * h.feature_dim)?;
    let features = flat
        .chunks(h.feature_dim.max(1))
        .take(h.n)
        .map(|c| c.iter().map(|&v| v as f64).collect())
        .collect();
    let emb = r.f64_vec(h.n * 2)?;
    let embedding = emb.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let mut edges = Vec::with_capacity(h.n_edges);
    for _ in 0..h.n_edges {
        let i = r.u32()? as usize;
        let j = r.u32()? as usize;
        let w = r.f64_vec(1)?[0];
        if i >= h.n || j >= h.n {
            return Err(r.err("edge index out of range"));
        }
        edges.push(Edge { i, j, w });
    }
    let rho = r.f64_vec(h.n)?;
    let sigma = r.f64_vec(h.n)?;
    r.finish()?;
    let anchors = AnchorTable::new(h.anchors.into_iter().map(|(k, [v, a])| (k, Av::new(v, a))))?;
    Ok(EmbedModel {
        ids: h.ids,
        labels: h.labels,
        features,
        embedding,
        graph: FuzzyGraph {
            n: h.n,
            edges,
            rho,
            sigma,
        },
        curve: h.curve,
        anchors,
        config: h.config,
        seed: h.seed,
    })
}
