//! Two-stage arousal-valence prediction from self-supervised speech features.
//!
//! Stage I trains a small classification head over per-layer encoder outputs
//! and uses its penultimate projection as an emotion feature. Stage II embeds
//! those features onto the 2-D arousal-valence plane with a neighbor-graph
//! layout whose points start at, and are pulled toward, fixed per-emotion
//! anchors.

#![allow(clippy::needless_range_loop)]

pub mod adam;
pub mod anchors;
pub mod config;
pub mod embed;
pub mod error;
pub mod formats;
pub mod graph;
pub mod head;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod synth;
pub mod transform;
pub mod types;

pub use anchors::{AnchorTable, Av};
pub use config::{EmbedConfig, HeadConfig, NeighborWeighting, PipelineConfig};
pub use embed::{fit, fit_with_mode, load_model, save_model, EmbedModel, ExecMode};
pub use error::{AvError, ErrorKind, Result};
pub use formats::AvRecord;
pub use head::{extract_features, train_head, HeadParams};
pub use metrics::{ccc, cluster_anchor_mae, evaluate, mae};
pub use pipeline::{run_pipeline, RunOptions};
pub use transform::{transform_with_labels, transform_without_labels};
pub use types::{AvPoint, Dataset, EmotionFeature, LayerStack, Row, Split};
