use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use av_anchor_core::embed::{self, ExecMode};
use av_anchor_core::formats::{self, AvRecord};
use av_anchor_core::metrics::{self, AnchorMaeWeighting};
use av_anchor_core::pipeline::{self, RunOptions};
use av_anchor_core::synth::{self, StackShape, SynthSpec};
use av_anchor_core::{graph, head, plot, transform};
use av_anchor_core::{AnchorTable, AvError, ErrorKind, PipelineConfig, Result, Split};

#[derive(Parser)]
#[command(
    name = "av-anchor",
    version,
    about = "Anchored arousal-valence embedding of speech emotion features"
)]
struct Cli {
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON pipeline config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Sequential, bit-reproducible optimization. `--deterministic false`
    /// enables the unsynchronized parallel optimizer.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    deterministic: bool,

    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground-truth AV values.
    Synth(SynthArgs),
    /// Train the stage-I classification head on layer stacks.
    TrainHead {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch loss history as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a trained head over every manifest row.
    Extract {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `.csv` writes a feature CSV, anything else the binary matrix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the label-intersected neighbor graph as JSON.
    Graph {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the anchored embedding on the labeled training rows.
    Fit {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Fit on labeled rows of every split.
        #[arg(long)]
        joint: bool,
        /// Attractive updates move both endpoints.
        #[arg(long)]
        move_both: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict AV values for new rows against a fitted model.
    Transform {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Initialize at label anchors and optimize (labeled rows only).
        #[arg(long)]
        use_labels: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concordance and absolute error of predictions against references.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distance between per-label prediction centroids and their anchors.
    AnchorMae {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Weight labels by utterance count instead of equally.
        #[arg(long)]
        per_utterance: bool,
    },
    /// Render an AV CSV as an SVG scatter plot.
    Plot {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// End-to-end: train-head, extract, fit, transform, eval, plot.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Ground-truth AV CSV; enables report.json.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Also run the label-aware transform (av_with_labels.csv).
        #[arg(long)]
        with_labels: bool,
        /// Skip the label-free transform.
        #[arg(long)]
        no_label_free: bool,
        /// Embed labeled test rows jointly with the training rows.
        #[arg(long)]
        joint: bool,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Comma-separated anchor labels.
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<String>,
    #[arg(long, default_value_t = 50)]
    per_label: usize,
    #[arg(long, default_value_t = 100)]
    feature_dim: usize,
    /// Also write layer stacks with this many layers.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 5)]
    speakers: usize,
    #[arg(long, default_value_t = 1)]
    test_speakers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn keep(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_anchors(path: &Option<PathBuf>) -> Result<AnchorTable> {
    match path {
        Some(p) => AnchorTable::load(p),
        None => Ok(AnchorTable::default_table()),
    }
}

fn exec_mode(cli: &Cli) -> ExecMode {
    if cli.deterministic {
        ExecMode::Deterministic
    } else {
        ExecMode::Parallel {
            threads: cli.threads.unwrap_or_else(rayon::current_num_threads),
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| AvError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| AvError::io(path, e))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            let seed = cli.seed.unwrap_or(0);
            let labels: Vec<&str> = a.labels.iter().map(String::as_str).collect();
            let mut spec = SynthSpec::new(&labels, a.per_label, a.feature_dim, seed);
            spec.spread = a.spread;
            spec.noise = a.noise;
            spec.speakers = a.speakers;
            spec.test_speakers = a.test_speakers;
            spec.stack = a.layers.map(|layers| StackShape {
                layers,
                frames: a.frames,
            });
            let data = synth::synth_generate(&spec, &AnchorTable::default_table())?;
            let files = synth::write_synth(&a.out, &data)?;
            log::info!("wrote {} rows to {}", data.rows.len(), files.manifest.display());
        }
        Command::TrainHead { manifest, out, report } => {
            let cfg = load_config(cli)?;
            let ds = formats::load_stack_dataset(manifest)?;
            let (params, rep) = head::train_head(&ds, &cfg)?;
            head::save_checkpoint(out, &params, &cfg.head)?;
            log::info!(
                "final loss {:?}, train accuracy {:.3}",
                rep.epoch_losses.last(),
                rep.final_train_accuracy
            );
            if let Some(p) = report {
                formats::write_json(p, &rep)?;
            }
        }
        Command::Extract { head: h, manifest, out } => {
            let (params, _) = head::load_checkpoint(h)?;
            let ds = formats::load_stack_dataset(manifest)?;
            let feats = head::extract_features(&params, &ds)?;
            if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                formats::write_feature_csv(out, &feats)?;
            } else {
                formats::write_feature_matrix(out, &feats)?;
            }
        }
        Command::Graph {
            features,
            manifest,
            k,
            out,
        } => {
            let mut cfg = load_config(cli)?;
            if let Some(k) = k {
                cfg.embed.k_neighbors = *k;
            }
            let rows = formats::read_manifest(manifest)?;
            let feats = formats::read_features_for_rows(features, &rows)?;
            let points: Vec<&[f64]> = feats.iter().map(|f| f.vector.as_slice()).collect();
            let labels: Vec<Option<&str>> = rows.iter().map(|r| r.label.as_deref()).collect();
            let g = graph::build_graph(&points, &labels, &cfg.embed)?;
            let ids: Vec<&str> = rows.iter().map(|r| r.utterance_id.as_str()).collect();
            formats::write_json(
                out,
                &serde_json::json!({ "k": cfg.embed.k_neighbors, "ids": ids, "graph": g }),
            )?;
        }
        Command::Fit {
            features,
            manifest,
            anchors,
            joint,
            move_both,
            out,
        } => {
            let mut cfg = load_config(cli)?;
            cfg.embed.move_both |= *move_both;
            let anchors = load_anchors(anchors)?;
            let rows = formats::read_manifest(manifest)?;
            let feats = formats::read_features_for_rows(features, &rows)?;
            let split = if *joint { None } else { Some(Split::Train) };
            let (f, l) = pipeline::labeled_subset(&rows, &feats, split);
            let model = embed::fit_with_mode(&f, &l, &anchors, &cfg.embed, exec_mode(cli))?;
            embed::save_model(out, &model)?;
        }
        Command::Transform {
            model,
            features,
            manifest,
            use_labels,
            split,
            out,
        } => {
            let model = embed::load_model(model)?;
            let rows = formats::read_manifest(manifest)?;
            let feats = formats::read_features_for_rows(features, &rows)?;
            let (rows, feats): (Vec<_>, Vec<_>) =
                rows.into_iter().zip(feats).filter(|(r, _)| split.keep(r.split)).unzip();
            let points = if *use_labels {
                let (f, l) = pipeline::labeled_subset(&rows, &feats, None);
                if f.len() < rows.len() {
                    log::warn!("{} unlabeled rows skipped", rows.len() - f.len());
                }
                transform::transform_with_labels(&model, &f, &l)?
            } else {
                transform::transform_without_labels(&model, &feats)?
            };
            formats::write_av_csv(out, &pipeline::records_for(&points, &rows))?;
        }
        Command::Eval { pred, reference, out } => {
            let report = metrics::evaluate(&formats::read_av_csv(pred)?, &formats::read_av_csv(reference)?)?;
            if let Some(p) = out {
                formats::write_json(p, &report)?;
            }
            print_json(&report)?;
        }
        Command::AnchorMae {
            pred,
            anchors,
            per_utterance,
        } => {
            let anchors = load_anchors(anchors)?;
            let recs = formats::read_av_csv(pred)?;
            let weighting = if *per_utterance {
                AnchorMaeWeighting::PerUtterance
            } else {
                AnchorMaeWeighting::PerLabel
            };
            let labeled = recs
                .iter()
                .filter_map(|r: &AvRecord| r.label.as_deref().map(|l| (r.valence, r.arousal, l)));
            print_json(&metrics::cluster_anchor_mae(labeled, &anchors, weighting)?)?;
        }
        Command::Plot { pred, anchors, out } => {
            let anchors = load_anchors(anchors)?;
            let recs = formats::read_av_csv(pred)?;
            write_text(out, &plot::plot_scatter(&recs, &anchors))?;
        }
        Command::Run {
            manifest,
            out,
            anchors,
            reference,
            with_labels,
            no_label_free,
            joint,
        } => {
            let mut opts = RunOptions::new(manifest, out);
            opts.config = load_config(cli)?;
            opts.anchors = load_anchors(anchors)?;
            opts.reference = reference.clone();
            opts.with_labels = *with_labels;
            opts.label_free = !*no_label_free;
            opts.joint = *joint;
            opts.mode = exec_mode(cli);
            let outputs = pipeline::run_pipeline(&opts)?;
            if let Some(r) = &outputs.report {
                print_json(r)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            })
        }
    }
}
