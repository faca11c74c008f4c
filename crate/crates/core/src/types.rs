//! Shared domain types: layer stacks, emotion features, AV points and the
//! dataset container.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchors::normalize_label;
use crate::error::{AvError, Result};

/// Per-utterance stack of self-supervised features, `layers x frames x dims`,
/// stored row-major as (layer, frame, dim).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub utterance_id: String,
    layers: usize,
    frames: usize,
    dims: usize,
    data: Vec<f32>,
}

impl LayerStack {
    pub fn new(
        utterance_id: impl Into<String>,
        layers: usize,
        frames: usize,
        dims: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if layers == 0 || frames == 0 || dims == 0 {
            return Err(AvError::shape(format!(
                "layer stack `{utterance_id}` has an empty axis ({layers}x{frames}x{dims})"
            )));
        }
        if data.len() != layers * frames * dims {
            return Err(AvError::shape(format!(
                "layer stack `{utterance_id}`: expected {} values, got {}",
                layers * frames * dims,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AvError::numerical(format!(
                "layer stack `{utterance_id}` contains non-finite values"
            )));
        }
        Ok(LayerStack {
            utterance_id,
            layers,
            frames,
            dims,
            data,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, layer: usize, frame: usize, dim: usize) -> f32 {
        self.data[(layer * self.frames + frame) * self.dims + dim]
    }

    /// The `dims`-long vector for one (layer, frame).
    pub fn frame(&self, layer: usize, frame: usize) -> &[f32] {
        let start = (layer * self.frames + frame) * self.dims;
        &self.data[start..start + self.dims]
    }
}

/// Utterance-level emotion feature produced by the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionFeature {
    pub utterance_id: String,
    pub vector: Vec<f64>,
}

/// Embedded position of an utterance on the AV plane.
#[derive(Debug, Clone, PartialEq)]
pub struct AvPoint {
    pub utterance_id: String,
    pub valence: f64,
    pub arousal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = AvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(AvError::input(format!("unknown split `{other}`"))),
        }
    }
}

/// Parses a manifest label cell. Empty cells and the "no majority"
/// placeholders (`others`, `xxx`) become unlabeled rows.
pub fn parse_label(cell: &str) -> Option<String> {
    let norm = normalize_label(cell);
    match norm.as_str() {
        "" | "others" | "other" | "xxx" => None,
        _ => Some(norm),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub utterance_id: String,
    pub label: Option<String>,
    pub speaker: Option<String>,
    pub split: Split,
    pub feature_path: Option<PathBuf>,
}

/// Rows plus a feature store keyed by utterance id.
///
/// `F` is the per-utterance payload: [`LayerStack`] for stage I or a feature
/// vector for stage II.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    rows: Vec<Row>,
    index: HashMap<String, usize>,
    features: HashMap<String, F>,
}

impl<F> Default for Dataset<F> {
    fn default() -> Self {
        Dataset {
            rows: Vec::new(),
            index: HashMap::new(),
            features: HashMap::new(),
        }
    }
}

impl<F> Dataset<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Row>) -> Result<Self> {
        let mut ds = Dataset::new();
        for row in rows {
            ds.push_row(row)?;
        }
        Ok(ds)
    }

    pub fn push_row(&mut self, row: Row) -> Result<()> {
        if self.index.contains_key(&row.utterance_id) {
            return Err(AvError::DuplicateId(row.utterance_id));
        }
        self.index.insert(row.utterance_id.clone(), self.rows.len());
        self.rows.push(row);
        Ok(())
    }

    pub fn insert(&mut self, row: Row, feature: F) -> Result<()> {
        let id = row.utterance_id.clone();
        self.push_row(row)?;
        self.features.insert(id, feature);
        Ok(())
    }

    pub fn set_feature(&mut self, utterance_id: &str, feature: F) -> Result<()> {
        if !self.index.contains_key(utterance_id) {
            return Err(AvError::input(format!("no row for utterance `{utterance_id}`")));
        }
        self.features.insert(utterance_id.to_string(), feature);
        Ok(())
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, utterance_id: &str) -> Option<&Row> {
        self.index.get(utterance_id).map(|&i| &self.rows[i])
    }

    pub fn feature(&self, utterance_id: &str) -> Option<&F> {
        self.features.get(utterance_id)
    }

    pub fn require_feature(&self, utterance_id: &str) -> Result<&F> {
        self.feature(utterance_id)
            .ok_or_else(|| AvError::input(format!("missing features for `{utterance_id}`")))
    }

    pub fn split_rows(&self, split: Split) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(move |r| r.split == split)
    }
}
