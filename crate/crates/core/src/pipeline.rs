//! End-to-end orchestration: head training, feature extraction, anchored
//! embedding, test-split transform, evaluation and plotting.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use crate::anchors::AnchorTable;
use crate::config::PipelineConfig;
use crate::embed::{self, EmbedModel, ExecMode};
use crate::error::{AvError, Result};
use crate::formats::{self, AvRecord};
use crate::head;
use crate::metrics::{self, EvalReport};
use crate::plot;
use crate::transform;
use crate::types::{AvPoint, EmotionFeature, Row, Split};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub config: PipelineConfig,
    pub anchors: AnchorTable,
    /// Ground-truth AV CSV for the test split.
    pub reference: Option<PathBuf>,
    pub label_free: bool,
    pub with_labels: bool,
    /// Embed labeled test rows together with the training rows instead of
    /// transforming them afterwards.
    pub joint: bool,
    pub mode: ExecMode,
}

impl RunOptions {
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            manifest: manifest.into(),
            out_dir: out_dir.into(),
            config: PipelineConfig::default(),
            anchors: AnchorTable::default_table(),
            reference: None,
            label_free: true,
            with_labels: false,
            joint: false,
            mode: ExecMode::Deterministic,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub head: PathBuf,
    pub features: PathBuf,
    pub model: PathBuf,
    /// Label-free predictions (or joint-mode predictions).
    pub av: Option<PathBuf>,
    /// Predictions from the label-aware transform.
    pub av_with_labels: Option<PathBuf>,
    pub plot: PathBuf,
    pub run_log: PathBuf,
    pub report: Option<EvalReport>,
    pub report_with_labels: Option<EvalReport>,
}

#[derive(Debug, Serialize)]
struct StageTiming {
    stage: &'static str,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct RunLog<'a> {
    version: &'static str,
    head_seed: u64,
    embed_seed: u64,
    config: &'a PipelineConfig,
    mode: String,
    n_train: usize,
    n_test: usize,
    head_final_loss: Option<f64>,
    head_train_accuracy: f64,
    timings: Vec<StageTiming>,
    report: Option<EvalReport>,
    report_with_labels: Option<EvalReport>,
}

/// Rows of `split` that carry a label, with their features and labels.
pub fn labeled_subset(
    rows: &[Row],
    features: &[EmotionFeature],
    split: Option<Split>,
) -> (Vec<EmotionFeature>, Vec<String>) {
    rows.iter()
        .zip(features)
        .filter(|(r, _)| split.is_none_or(|s| r.split == s))
        .filter_map(|(r, f)| r.label.clone().map(|l| (f.clone(), l)))
        .unzip()
}

/// AV records carrying each row's manifest label (if any).
pub fn records_for(points: &[AvPoint], rows: &[Row]) -> Vec<AvRecord> {
    let labels: std::collections::HashMap<&str, Option<&str>> = rows
        .iter()
        .map(|r| (r.utterance_id.as_str(), r.label.as_deref()))
        .collect();
    points
        .iter()
        .map(|p| AvRecord::from_point(p, labels.get(p.utterance_id.as_str()).copied().flatten()))
        .collect()
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    let seconds = start.elapsed().as_secs_f64();
    log::info!("{stage} done in {seconds:.2}s");
    timings.push(StageTiming { stage, seconds });
    Ok(out)
}

pub fn run_pipeline(opts: &RunOptions) -> Result<RunOutputs> {
    opts.config.validate()?;
    if !opts.label_free && !opts.with_labels && !opts.joint {
        return Err(AvError::input(
            "nothing to predict: enable label-free, with-labels or joint output",
        ));
    }
    let out = &opts.out_dir;
    std::fs::create_dir_all(out).map_err(|e| AvError::io(out, e))?;
    let mut timings = Vec::new();

    let dataset = timed(&mut timings, "load", || formats::load_stack_dataset(&opts.manifest))?;
    let rows = dataset.rows().to_vec();

    let head_path = out.join("head.avhd");
    let (params, head_report) = timed(&mut timings, "train-head", || {
        let (p, r) = head::train_head(&dataset, &opts.config)?;
        head::save_checkpoint(&head_path, &p, &opts.config.head)?;
        Ok((p, r))
    })?;

    // Features go through the on-disk format so that a stage-by-stage CLI
    // run sees exactly the same values.
    let features_path = out.join("features.avfm");
    let features = timed(&mut timings, "extract", || {
        let f = head::extract_features(&params, &dataset)?;
        formats::write_feature_matrix(&features_path, &f)?;
        formats::read_features_for_rows(&features_path, &rows)
    })?;
    drop(dataset);

    let test_rows: Vec<Row> = rows.iter().filter(|r| r.split == Split::Test).cloned().collect();
    let test_features: Vec<EmotionFeature> = rows
        .iter()
        .zip(&features)
        .filter(|(r, _)| r.split == Split::Test)
        .map(|(_, f)| f.clone())
        .collect();
    if test_rows.is_empty() {
        return Err(AvError::input("manifest has no test rows").in_stage("transform"));
    }

    let model_path = out.join("model.avem");
    let fit_split = if opts.joint { None } else { Some(Split::Train) };
    let model: EmbedModel = timed(&mut timings, "fit", || {
        let (f, l) = labeled_subset(&rows, &features, fit_split);
        let m = embed::fit_with_mode(&f, &l, &opts.anchors, &opts.config.embed, opts.mode)?;
        embed::save_model(&model_path, &m)?;
        Ok(m)
    })?;

    let mut av = None;
    let mut av_with_labels = None;
    let mut primary: Option<Vec<AvRecord>> = None;
    timed(&mut timings, "transform", || {
        if opts.joint {
            let in_model: std::collections::HashMap<&str, usize> =
                model.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let all = model.points();
            let points: Vec<AvPoint> = test_rows
                .iter()
                .filter_map(|r| in_model.get(r.utterance_id.as_str()))
                .map(|&i| all[i].clone())
                .collect();
            let recs = records_for(&points, &test_rows);
            let p = out.join("av.csv");
            formats::write_av_csv(&p, &recs)?;
            av = Some(p);
            primary = Some(recs);
            return Ok(());
        }
        if opts.label_free {
            let points = transform::transform_without_labels(&model, &test_features)?;
            let recs = records_for(&points, &test_rows);
            let p = out.join("av.csv");
            formats::write_av_csv(&p, &recs)?;
            av = Some(p);
            primary = Some(recs);
        }
        if opts.with_labels {
            let (f, l) = labeled_subset(&test_rows, &test_features, None);
            if f.len() < test_rows.len() {
                log::warn!(
                    "{} unlabeled test rows skipped by the label-aware transform",
                    test_rows.len() - f.len()
                );
            }
            let points = transform::transform_with_labels(&model, &f, &l)?;
            let recs = records_for(&points, &test_rows);
            let p = out.join("av_with_labels.csv");
            formats::write_av_csv(&p, &recs)?;
            av_with_labels = Some(p);
            if primary.is_none() {
                primary = Some(recs);
            }
        }
        Ok(())
    })?;

    let mut report = None;
    let mut report_with_labels = None;
    if let Some(reference) = &opts.reference {
        timed(&mut timings, "eval", || {
            let truth = formats::read_av_csv(reference)?;
            if let Some(p) = &av {
                let r = metrics::evaluate(&formats::read_av_csv(p)?, &truth)?;
                formats::write_json(out.join("report.json"), &r)?;
                report = Some(r);
            }
            if let Some(p) = &av_with_labels {
                let r = metrics::evaluate(&formats::read_av_csv(p)?, &truth)?;
                formats::write_json(out.join("report_with_labels.json"), &r)?;
                report_with_labels = Some(r);
            }
            Ok(())
        })?;
    }

    let plot_path = out.join("plot.svg");
    timed(&mut timings, "plot", || {
        let svg = plot::plot_scatter(primary.as_deref().unwrap_or(&[]), &opts.anchors);
        std::fs::write(&plot_path, svg).map_err(|e| AvError::io(&plot_path, e))
    })?;

    let run_log = out.join("run_log.json");
    let log = RunLog {
        version: env!("CARGO_PKG_VERSION"),
        head_seed: opts.config.head.rng_seed,
        embed_seed: opts.config.embed.rng_seed,
        config: &opts.config,
        mode: format!("{:?}", opts.mode),
        n_train: model.len(),
        n_test: test_rows.len(),
        head_final_loss: head_report.epoch_losses.last().copied(),
        head_train_accuracy: head_report.final_train_accuracy,
        timings,
        report,
        report_with_labels,
    };
    formats::write_json(&run_log, &log)?;

    Ok(RunOutputs {
        head: head_path,
        features: features_path,
        model: model_path,
        av,
        av_with_labels,
        plot: plot_path,
        run_log,
        report,
        report_with_labels,
    })
}
