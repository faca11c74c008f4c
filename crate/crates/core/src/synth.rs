//! Synthetic corpora with known ground-truth AV values.
//!
//! Each utterance gets a ground-truth AV point drawn uniformly from a square
//! around its label's anchor. A fixed linear map with orthonormal columns
//! lifts the point into `F` dimensions, and isotropic Gaussian noise is
//! added. Optionally the feature is wrapped into a layer stack so that the
//! stage-I head can be trained on it.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anchors::{normalize_label, AnchorTable};
use crate::error::{AvError, Result};
use crate::formats::{self, AvRecord};
use crate::types::{EmotionFeature, LayerStack, Row, Split};

/// Per-frame jitter added when a feature is replicated into a layer stack.
pub const FRAME_JITTER: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackShape {
    pub layers: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub labels: Vec<String>,
    pub per_label: usize,
    pub feature_dim: usize,
    /// Wrap features into layer stacks of this shape (dims = `feature_dim`).
    pub stack: Option<StackShape>,
    /// Half-width of the uniform square around each anchor.
    pub spread: f64,
    /// Standard deviation of the ambient feature noise.
    pub noise: f64,
    /// Utterance `i` of every label belongs to speaker `i % speakers`.
    pub speakers: usize,
    /// The last `test_speakers` speakers form the test split.
    pub test_speakers: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(labels: &[&str], per_label: usize, feature_dim: usize, seed: u64) -> Self {
        SynthSpec {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            per_label,
            feature_dim,
            stack: None,
            spread: 0.1,
            noise: 0.0,
            speakers: 5,
            test_speakers: 1,
            seed,
        }
    }

    fn validate(&self, anchors: &AnchorTable) -> Result<()> {
        if self.labels.is_empty() || self.per_label == 0 || self.feature_dim < 2 {
            return Err(AvError::input(
                "synth spec needs labels, per_label >= 1 and feature_dim >= 2",
            ));
        }
        if !(self.spread >= 0.0 && self.noise >= 0.0) {
            return Err(AvError::input("spread and noise must be non-negative"));
        }
        if self.speakers == 0 || self.test_speakers > self.speakers {
            return Err(AvError::input("need speakers >= 1 and test_speakers <= speakers"));
        }
        if let Some(s) = self.stack {
            if s.layers == 0 || s.frames == 0 {
                return Err(AvError::input("layer stack shape must be positive"));
            }
        }
        for l in &self.labels {
            anchors.lookup(l)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub rows: Vec<Row>,
    pub features: Vec<EmotionFeature>,
    pub stacks: Option<Vec<LayerStack>>,
    pub truth: Vec<AvRecord>,
    /// The `F x 2` lifting map, one `[valence, arousal]` coefficient pair per
    /// feature dimension. Its columns are orthonormal.
    pub lift: Vec<[f64; 2]>,
}

/// Random `F x 2` matrix with orthonormal columns (Gram-Schmidt).
fn orthonormal_lift<R: Rng>(dim: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let mut u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nu = norm(&u);
    u.iter_mut().for_each(|a| *a /= nu);
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(b, a)| *b -= proj * a);
    let nv = norm(&v);
    v.iter_mut().for_each(|a| *a /= nv);
    u.into_iter().zip(v).map(|(a, b)| [a, b]).collect()
}

pub fn synth_generate(spec: &SynthSpec, anchors: &AnchorTable) -> Result<SynthData> {
    spec.validate(anchors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lift = orthonormal_lift(spec.feature_dim, &mut rng);

    let mut rows = Vec::new();
    let mut features = Vec::new();
    let mut stacks = spec.stack.map(|_| Vec::new());
    let mut truth = Vec::new();
    let first_test = spec.speakers - spec.test_speakers;

    for label in &spec.labels {
        let label = normalize_label(label);
        let anchor = anchors.lookup(&label)?;
        for i in 0..spec.per_label {
            let id = format!("{label}_{i:04}");
            let mut jitter = || -> f64 {
                if spec.spread > 0.0 {
                    rng.random_range(-spec.spread..=spec.spread)
                } else {
                    0.0
                }
            };
            let av = [anchor.valence + jitter(), anchor.arousal + jitter()];
            let vector: Vec<f64> = lift
                .iter()
                .map(|r| {
                    let z: f64 = rng.sample(StandardNormal);
                    r[0] * av[0] + r[1] * av[1] + spec.noise * z
                })
                .collect();

            let speaker = i % spec.speakers;
            let split = if speaker >= first_test {
                Split::Test
            } else {
                Split::Train
            };
            if let (Some(shape), Some(out)) = (spec.stack, stacks.as_mut()) {
                out.push(wrap_stack(&id, &vector, shape, &mut rng)?);
            }
            rows.push(Row {
                utterance_id: id.clone(),
                label: Some(label.clone()),
                speaker: Some(format!("spk{speaker}")),
                split,
                feature_path: None,
            });
            truth.push(AvRecord {
                utterance_id: id.clone(),
                valence: av[0],
                arousal: av[1],
                label: Some(label.clone()),
            });
            features.push(EmotionFeature {
                utterance_id: id,
                vector,
            });
        }
    }
    Ok(SynthData {
        rows,
        features,
        stacks,
        truth,
        lift,
    })
}

/// Spreads `x` over the layers with scales `2(l+1)/(L+1)`, whose mean is 1,
/// and replicates it over frames with small jitter.
fn wrap_stack<R: Rng>(id: &str, x: &[f64], shape: StackShape, rng: &mut R) -> Result<LayerStack> {
    let (l_n, t_n) = (shape.layers, shape.frames);
    let mut data = Vec::with_capacity(l_n * t_n * x.len());
    for l in 0..l_n {
        let scale = 2.0 * (l + 1) as f64 / (l_n + 1) as f64;
        for _ in 0..t_n {
            for &v in x {
                let z: f64 = rng.sample(StandardNormal);
                data.push((scale * v + FRAME_JITTER * z) as f32);
            }
        }
    }
    LayerStack::new(id, l_n, t_n, x.len(), data)
}

/// Paths written by [`write_synth`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub truth: PathBuf,
}

/// Writes `manifest.csv`, `features.avfm`, `truth.csv` and, for stack specs,
/// one `stacks/<id>.avls` per row.
pub fn write_synth(dir: impl AsRef<Path>, data: &SynthData) -> Result<SynthFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| AvError::io(dir, e))?;
    let mut rows = data.rows.clone();
    if let Some(stacks) = &data.stacks {
        for (row, stack) in rows.iter_mut().zip(stacks) {
            let p = dir.join("stacks").join(format!("{}.avls", row.utterance_id));
            formats::write_layer_stack(&p, stack)?;
            row.feature_path = Some(p);
        }
    }
    let files = SynthFiles {
        manifest: dir.join("manifest.csv"),
        features: dir.join("features.avfm"),
        truth: dir.join("truth.csv"),
    };
    formats::write_manifest(&files.manifest, &rows)?;
    formats::write_feature_matrix(&files.features, &data.features)?;
    formats::write_av_csv(&files.truth, &data.truth)?;
    Ok(files)
}
