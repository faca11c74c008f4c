//! Out-of-sample AV prediction against a fitted [`EmbedModel`].
//!
//! With labels, new points start at their anchors and are optimized against
//! the frozen training embedding. Without labels, each query is the weighted
//! mean of its nearest training points' embeddings.

use rayon::prelude::*;

use crate::anchors::normalize_label;
use crate::config::NeighborWeighting;
use crate::embed::{
    init_embedding, optimize_layout, stream_rng, EmbedModel, LayoutParams, TRANSFORM_INIT_STREAM,
    TRANSFORM_OPTIMIZE_STREAM,
};
use crate::error::{AvError, Result};
use crate::graph::{self, label_factor, smooth_knn_calibrate, Edge, KnnIndex, PRUNE_THRESHOLD};
use crate::types::{AvPoint, EmotionFeature};

/// Optimization epochs used for new points: a third of training, rounded up.
pub fn transform_epochs(train_epochs: usize) -> usize {
    train_epochs.div_ceil(3)
}

fn query_index(model: &EmbedModel, features: &[EmotionFeature]) -> Result<KnnIndex> {
    if model.is_empty() {
        return Err(AvError::input("model has no training points"));
    }
    let dim = model.feature_dim();
    let queries: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            if f.vector.len() != dim {
                return Err(AvError::shape(format!(
                    "query `{}` has dimension {}, model expects {dim}",
                    f.utterance_id,
                    f.vector.len()
                )));
            }
            Ok(f.vector.iter().map(|&x| x as f32 as f64).collect())
        })
        .collect::<Result<_>>()?;
    let k = model.config.k_neighbors.min(model.len());
    graph::knn_query(&queries, &model.features, k)
}

fn neighbor_weights(distances: &[f64], k: usize, weighting: NeighborWeighting) -> Vec<f64> {
    let raw: Vec<f64> = match weighting {
        NeighborWeighting::Membership => {
            let cal = smooth_knn_calibrate(distances, k);
            distances.iter().map(|&d| cal.membership(d)).collect()
        }
        NeighborWeighting::InverseDistance => distances.iter().map(|&d| 1.0 / (d + 1e-12)).collect(),
    };
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Weighted average of neighbor embeddings; no optimization and no RNG.
pub fn transform_without_labels(model: &EmbedModel, features: &[EmotionFeature]) -> Result<Vec<AvPoint>> {
    let index = query_index(model, features)?;
    let weighting = model.config.transform_weighting;
    let out = (0..features.len())
        .into_par_iter()
        .map(|q| {
            let weights = neighbor_weights(index.distances(q), index.k(), weighting);
            let (mut v, mut a) = (0.0, 0.0);
            for (&j, &w) in index.neighbors(q).iter().zip(&weights) {
                v += w * model.embedding[j][0];
                a += w * model.embedding[j][1];
            }
            AvPoint {
                utterance_id: features[q].utterance_id.clone(),
                valence: v,
                arousal: a,
            }
        })
        .collect();
    Ok(out)
}

/// Anchor-initialized new points optimized against the frozen training layout.
pub fn transform_with_labels<S: AsRef<str>>(
    model: &EmbedModel,
    features: &[EmotionFeature],
    labels: &[S],
) -> Result<Vec<AvPoint>> {
    if labels.len() != features.len() {
        return Err(AvError::shape(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let labels: Vec<String> = labels.iter().map(|l| normalize_label(l.as_ref())).collect();
    let index = query_index(model, features)?;
    let n_train = model.len();
    let cfg = &model.config;

    let init = init_embedding(
        &labels,
        &model.anchors,
        cfg.init_sigma,
        &mut stream_rng(model.seed, TRANSFORM_INIT_STREAM),
    )?;

    let mut edges = Vec::with_capacity(features.len() * index.k());
    for (q, label) in labels.iter().enumerate() {
        let cal = smooth_knn_calibrate(index.distances(q), index.k());
        for (&j, &d) in index.neighbors(q).iter().zip(index.distances(q)) {
            let w =
                cal.membership(d) * label_factor(Some(label), Some(&model.labels[j]), cfg.far_dist, cfg.unknown_dist);
            if w >= PRUNE_THRESHOLD {
                edges.push(Edge { i: n_train + q, j, w });
            }
        }
    }

    let mut coords: Vec<[f64; 2]> = model.embedding.clone();
    coords.extend_from_slice(&init);
    let params = LayoutParams {
        move_tail: false,
        ..LayoutParams::from_config(cfg, transform_epochs(cfg.epochs), n_train)
    };
    optimize_layout(
        &mut coords,
        &edges,
        &model.curve,
        &params,
        &mut stream_rng(model.seed, TRANSFORM_OPTIMIZE_STREAM),
        |_, _| {},
    )?;
    debug_assert_eq!(&coords[..n_train], &model.embedding[..]);

    Ok(features
        .iter()
        .zip(&coords[n_train..])
        .map(|(f, c)| AvPoint {
            utterance_id: f.utterance_id.clone(),
            valence: c[0],
            arousal: c[1],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_rounding() {
        assert_eq!(transform_epochs(500), 167);
        assert_eq!(transform_epochs(0), 0);
        assert_eq!(transform_epochs(3), 1);
        assert_eq!(transform_epochs(4), 2);
    }

    #[test]
    fn weights_are_normalized() {
        let w = neighbor_weights(&[0.1, 0.2, 0.4], 3, NeighborWeighting::Membership);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.windows(2).all(|p| p[0] >= p[1]));
        let w = neighbor_weights(&[0.0, 1.0], 2, NeighborWeighting::InverseDistance);
        assert!(w[0] > 0.999_999);
    }
}
