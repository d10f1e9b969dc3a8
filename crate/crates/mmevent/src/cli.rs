//! Command-line entry point wiring corpus synthesis, coreference and
//! transformer training, prediction, scoring, and the two-stage
//! pipeline.
//!
//! Every run writes a manifest next to its primary output (resolved
//! configuration, seed, and SHA-256 hashes of inputs and outputs) so it
//! can be reproduced exactly. Outputs are written atomically. Exit
//! codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{
    load_coref_model, load_jmmt_model, save_coref_model, save_jmmt_model, write_atomic,
};
use crate::coref::{predict_links_doc, train_coref, tune_threshold, CorefTrainConfig};
use crate::corpus::{
    candidate_pairs, load_corpus, load_predictions, save_corpus, save_predictions, CorefLink,
    DocPredictions, MultimediaDocument,
};
use crate::error::{Error, Result};
use crate::jmmt::{predict_for_links, train_jmmt, JmmtConfig, JmmtTrainConfig};
use crate::metrics::{
    render_table, score_coref, score_extraction, ScoreRecord, ScoreReport, Setting,
};
use crate::ontology::{load_ontology, Ontology};
use crate::synthgen::{generate_corpus, plant_report, SynthConfig};

#[derive(Parser)]
#[command(
    name = "mmevent",
    about = "Multimodal event coreference and extraction lab",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted structure.
    Synth(SynthArgs),
    /// Train the self-supervised coreference model.
    TrainCoref(TrainCorefArgs),
    /// Predict coreference links with a trained model.
    PredictCoref(PredictCorefArgs),
    /// Choose the link threshold maximizing F1 on a validation corpus.
    TuneThreshold(TuneThresholdArgs),
    /// Train the joint multimodal transformer on gold pairs.
    TrainJmmt(TrainJmmtArgs),
    /// Extract events with a trained transformer.
    PredictJmmt(PredictJmmtArgs),
    /// Score predictions against gold under one setting.
    Score(ScoreArgs),
    /// Score predictions under every setting and print one table.
    Report(ReportArgs),
    /// Two-stage run: link prediction, then extraction on gold and on
    /// predicted pairs (the latter reported as indicative only).
    Pipeline(PipelineArgs),
}

/// Runs the CLI; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Usage and parse errors are configuration errors (exit 1);
            // --help/--version print to stdout and exit 0.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::TrainCoref(a) => cmd_train_coref(a),
        Command::PredictCoref(a) => cmd_predict_coref(a),
        Command::TuneThreshold(a) => cmd_tune_threshold(a),
        Command::TrainJmmt(a) => cmd_train_jmmt(a),
        Command::PredictJmmt(a) => cmd_predict_jmmt(a),
        Command::Score(a) => cmd_score(a),
        Command::Report(a) => cmd_report(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Precondition(_) => 1,
                Error::Numeric { .. } => 3,
                _ => 2,
            }
        }
    }
}

// ---------------------------------------------------------------------
// key=value config files and manifests
// ---------------------------------------------------------------------

/// Optional `key = value` configuration file; flags override file
/// entries, which override built-in defaults. Unknown keys are
/// rejected.
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>, allowed: &[&str]) -> Result<FileConfig> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap().trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected key = value",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                let key = key.trim().to_string();
                if !allowed.contains(&key.as_str()) {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown key {key:?}",
                        path.display(),
                        lineno + 1
                    )));
                }
                if map.insert(key.clone(), value.trim().to_string()).is_some() {
                    return Err(Error::Config(format!(
                        "{}:{}: duplicate key {key:?}",
                        path.display(),
                        lineno + 1
                    )));
                }
            }
        }
        Ok(FileConfig(map))
    }

    /// Effective value of one option: flag, else file entry, else
    /// default.
    fn resolve<V: FromStr + ToString>(&self, key: &str, flag: Option<V>, default: V) -> Result<V> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}"))),
            None => Ok(default),
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str) -> Manifest {
        Manifest {
            command: command.to_string(),
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn config(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(self)
    }

    fn output(&mut self, path: &Path) -> Result<&mut Self> {
        self.outputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(self)
    }

    fn write_next_to(&self, primary_output: &Path) -> Result<()> {
        let path = manifest_path(primary_output);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// `foo.jsonl` -> `foo.manifest.json`.
pub fn manifest_path(primary_output: &Path) -> PathBuf {
    let stem = primary_output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    primary_output.with_file_name(format!("{stem}.manifest.json"))
}

fn sha256_file(path: &Path) -> Result<String> {
    let data = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&data);
    Ok(format!("{:x}", h.finalize()))
}

fn load_ontology_arg(path: Option<&Path>) -> Result<Ontology> {
    match path {
        Some(p) => load_ontology(p),
        None => Ok(Ontology::bundled()),
    }
}

/// Writes a loss trace next to a checkpoint as JSON.
fn write_trace(primary_output: &Path, trace: &[f64]) -> Result<PathBuf> {
    let stem = primary_output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let path = primary_output.with_file_name(format!("{stem}.trace.json"));
    let json = serde_json::to_string_pretty(&serde_json::json!({ "loss_trace": trace }))?;
    write_atomic(&path, json.as_bytes())?;
    Ok(path)
}

// ---------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// Output corpus path (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Optional key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ontology file (TSV or JSON); bundled 16-type ontology when
    /// omitted.
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    sentences_per_doc: Option<usize>,
    #[arg(long)]
    segments_per_doc: Option<usize>,
    #[arg(long)]
    d_x: Option<usize>,
    #[arg(long)]
    d_y: Option<usize>,
    #[arg(long)]
    d_z: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    distractor_regions_per_frame: Option<usize>,
    /// Make clip features pure noise; the type signal then lives in one
    /// region per segment.
    #[arg(long)]
    multi_instance: bool,
    #[arg(long)]
    keyframes_per_segment: Option<usize>,
    #[arg(long)]
    types_per_doc: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

const SYNTH_KEYS: &[&str] = &[
    "n_docs",
    "sentences_per_doc",
    "segments_per_doc",
    "d_x",
    "d_y",
    "d_z",
    "noise_sigma",
    "distractor_regions_per_frame",
    "multi_instance_mode",
    "keyframes_per_segment",
    "types_per_doc",
    "seed",
];

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref(), SYNTH_KEYS)?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_docs: file.resolve("n_docs", a.n_docs, d.n_docs)?,
        sentences_per_doc: file.resolve("sentences_per_doc", a.sentences_per_doc, d.sentences_per_doc)?,
        segments_per_doc: file.resolve("segments_per_doc", a.segments_per_doc, d.segments_per_doc)?,
        d_x: file.resolve("d_x", a.d_x, d.d_x)?,
        d_y: file.resolve("d_y", a.d_y, d.d_y)?,
        d_z: file.resolve("d_z", a.d_z, d.d_z)?,
        noise_sigma: file.resolve("noise_sigma", a.noise_sigma, d.noise_sigma)?,
        distractor_regions_per_frame: file.resolve(
            "distractor_regions_per_frame",
            a.distractor_regions_per_frame,
            d.distractor_regions_per_frame,
        )?,
        multi_instance_mode: file.resolve(
            "multi_instance_mode",
            a.multi_instance.then_some(true),
            d.multi_instance_mode,
        )?,
        keyframes_per_segment: file.resolve(
            "keyframes_per_segment",
            a.keyframes_per_segment,
            d.keyframes_per_segment,
        )?,
        types_per_doc: file.resolve("types_per_doc", a.types_per_doc, d.types_per_doc)?,
        seed: file.resolve("seed", a.seed, d.seed)?,
    };
    let ontology = load_ontology_arg(a.ontology.as_deref())?;
    let docs = generate_corpus(&cfg, &ontology)?;
    save_corpus(&docs, &a.out)?;
    let report = plant_report(&docs);
    println!(
        "wrote {} documents, {} gold links to {}",
        docs.len(),
        report.total_links,
        a.out.display()
    );
    for (arity, count) in &report.arity_histogram {
        println!("  links in {arity} components: {count}");
    }

    let mut m = Manifest::new("synth");
    m.config("n_docs", cfg.n_docs)
        .config("sentences_per_doc", cfg.sentences_per_doc)
        .config("segments_per_doc", cfg.segments_per_doc)
        .config("d_x", cfg.d_x)
        .config("d_y", cfg.d_y)
        .config("d_z", cfg.d_z)
        .config("noise_sigma", cfg.noise_sigma)
        .config("distractor_regions_per_frame", cfg.distractor_regions_per_frame)
        .config("multi_instance_mode", cfg.multi_instance_mode)
        .config("keyframes_per_segment", cfg.keyframes_per_segment)
        .config("types_per_doc", cfg.types_per_doc)
        .config("seed", cfg.seed);
    if let Some(p) = &a.ontology {
        m.input(p)?;
    }
    m.output(&a.out)?;
    m.write_next_to(&a.out)
}

// ---------------------------------------------------------------------
// train-coref / predict-coref / tune-threshold
// ---------------------------------------------------------------------

#[derive(Args)]
struct TrainCorefArgs {
    /// Training corpus (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    common_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames_t: Option<usize>,
    #[arg(long)]
    per_frame_k: Option<usize>,
    #[arg(long)]
    max_region_negatives: Option<usize>,
    /// Cap the total number of optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Train with the global contrastive loss only.
    #[arg(long)]
    no_milo: bool,
}

const TRAIN_COREF_KEYS: &[&str] = &[
    "common_dim",
    "epochs",
    "batch_size",
    "learning_rate",
    "seed",
    "frames_t",
    "per_frame_k",
    "max_region_negatives",
    "max_steps",
    "use_milo",
];

fn cmd_train_coref(a: TrainCorefArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref(), TRAIN_COREF_KEYS)?;
    let d = CorefTrainConfig::default();
    let max_steps_flag = a.max_steps.map(Some);
    let cfg = CorefTrainConfig {
        common_dim: file.resolve("common_dim", a.common_dim, d.common_dim)?,
        epochs: file.resolve("epochs", a.epochs, d.epochs)?,
        batch_size: file.resolve("batch_size", a.batch_size, d.batch_size)?,
        learning_rate: file.resolve("learning_rate", a.learning_rate, d.learning_rate)?,
        seed: file.resolve("seed", a.seed, d.seed)?,
        frames_t: file.resolve("frames_t", a.frames_t, d.frames_t)?,
        per_frame_k: file.resolve("per_frame_k", a.per_frame_k, d.per_frame_k)?,
        max_region_negatives: file.resolve(
            "max_region_negatives",
            a.max_region_negatives,
            d.max_region_negatives,
        )?,
        use_milo: file.resolve("use_milo", a.no_milo.then_some(false), d.use_milo)?,
        max_steps: match max_steps_flag {
            Some(v) => v,
            None => file
                .0
                .get("max_steps")
                .map(|raw| {
                    raw.parse()
                        .map_err(|_| Error::Config(format!("invalid value {raw:?} for max_steps")))
                })
                .transpose()?,
        },
    };
    let docs = load_corpus(&a.corpus)?;
    let (model, trace) = train_coref(&docs, &cfg)?;
    save_coref_model(&model, &a.out)?;
    let trace_path = write_trace(&a.out, &trace)?;
    println!(
        "trained on {} documents; final loss {:.6}; checkpoint {}",
        docs.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );

    let mut m = Manifest::new("train-coref");
    m.config("common_dim", cfg.common_dim)
        .config("epochs", cfg.epochs)
        .config("batch_size", cfg.batch_size)
        .config("learning_rate", cfg.learning_rate)
        .config("seed", cfg.seed)
        .config("frames_t", cfg.frames_t)
        .config("per_frame_k", cfg.per_frame_k)
        .config("max_region_negatives", cfg.max_region_negatives)
        .config("use_milo", cfg.use_milo)
        .config(
            "max_steps",
            cfg.max_steps.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
        );
    m.input(&a.corpus)?;
    m.output(&a.out)?.output(&trace_path)?;
    m.write_next_to(&a.out)
}

#[derive(Args)]
struct PredictCorefArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output predictions path (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Similarity threshold for link prediction.
    #[arg(long, default_value_t = 0.13)]
    threshold: f64,
}

fn cmd_predict_coref(a: PredictCorefArgs) -> Result<()> {
    let model = load_coref_model(&a.model)?;
    let docs = load_corpus(&a.corpus)?;
    let mut preds = Vec::with_capacity(docs.len());
    for doc in &docs {
        preds.push(DocPredictions {
            doc_id: doc.doc_id.clone(),
            pred_coref_links: predict_links_doc(&model, doc, a.threshold)?,
            ..Default::default()
        });
    }
    save_predictions(&preds, &a.out)?;
    let n: usize = preds.iter().map(|p| p.pred_coref_links.len()).sum();
    println!("predicted {n} links over {} documents", docs.len());

    let mut m = Manifest::new("predict-coref");
    m.config("threshold", a.threshold);
    m.input(&a.model)?.input(&a.corpus)?;
    m.output(&a.out)?;
    m.write_next_to(&a.out)
}

#[derive(Args)]
struct TuneThresholdArgs {
    #[arg(long)]
    model: PathBuf,
    /// Validation corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Optional JSON output ({"threshold": ...}).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_tune_threshold(a: TuneThresholdArgs) -> Result<()> {
    let model = load_coref_model(&a.model)?;
    let docs = load_corpus(&a.corpus)?;
    let threshold = tune_threshold(&model, &docs)?;
    println!("threshold {threshold:.2}");
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&serde_json::json!({ "threshold": threshold }))?;
        write_atomic(out, json.as_bytes())?;
        let mut m = Manifest::new("tune-threshold");
        m.config("threshold", threshold);
        m.input(&a.model)?.input(&a.corpus)?;
        m.output(out)?;
        m.write_next_to(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// train-jmmt / predict-jmmt
// ---------------------------------------------------------------------

#[derive(Args)]
struct TrainJmmtArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    frames_t: Option<usize>,
    #[arg(long)]
    per_frame_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

const TRAIN_JMMT_KEYS: &[&str] = &[
    "layers",
    "heads",
    "model_dim",
    "ff_dim",
    "bins",
    "epochs",
    "batch_size",
    "learning_rate",
    "beam_width",
    "frames_t",
    "per_frame_k",
    "seed",
];

fn resolve_jmmt_cfg(file: &FileConfig, a: &TrainJmmtArgs, docs: &[MultimediaDocument]) -> Result<JmmtTrainConfig> {
    let dm = JmmtConfig::default();
    let dt = JmmtTrainConfig::default();
    let d_clip = docs
        .iter()
        .flat_map(|d| d.segments.first())
        .map(|s| s.clip_feature.len())
        .next()
        .unwrap_or(dm.d_clip);
    let d_region = docs
        .iter()
        .flat_map(|d| d.segments.iter())
        .flat_map(|s| s.keyframes.iter())
        .flat_map(|k| k.regions.first())
        .map(|r| r.feature.len())
        .next()
        .unwrap_or(dm.d_region);
    Ok(JmmtTrainConfig {
        model: JmmtConfig {
            layers: file.resolve("layers", a.layers, dm.layers)?,
            heads: file.resolve("heads", a.heads, dm.heads)?,
            model_dim: file.resolve("model_dim", a.model_dim, dm.model_dim)?,
            ff_dim: file.resolve("ff_dim", a.ff_dim, dm.ff_dim)?,
            d_clip,
            d_region,
            max_len: dm.max_len,
            frames_t: file.resolve("frames_t", a.frames_t, dm.frames_t)?,
            per_frame_k: file.resolve("per_frame_k", a.per_frame_k, dm.per_frame_k)?,
            seed: file.resolve("seed", a.seed, dt.seed)?,
        },
        bins: file.resolve("bins", a.bins, dt.bins)?,
        epochs: file.resolve("epochs", a.epochs, dt.epochs)?,
        batch_size: file.resolve("batch_size", a.batch_size, dt.batch_size)?,
        learning_rate: file.resolve("learning_rate", a.learning_rate, dt.learning_rate)?,
        beam_width: file.resolve("beam_width", a.beam_width, dt.beam_width)?,
        seed: file.resolve("seed", a.seed, dt.seed)?,
    })
}

fn cmd_train_jmmt(a: TrainJmmtArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref(), TRAIN_JMMT_KEYS)?;
    let docs = load_corpus(&a.corpus)?;
    let cfg = resolve_jmmt_cfg(&file, &a, &docs)?;
    let ontology = load_ontology_arg(a.ontology.as_deref())?;
    let (model, trace) = train_jmmt(&docs, &ontology, &cfg)?;
    save_jmmt_model(&model, &a.out)?;
    let trace_path = write_trace(&a.out, &trace)?;
    println!(
        "trained {} epochs; final loss {:.6}; checkpoint {}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );

    let mut m = Manifest::new("train-jmmt");
    m.config("layers", cfg.model.layers)
        .config("heads", cfg.model.heads)
        .config("model_dim", cfg.model.model_dim)
        .config("ff_dim", cfg.model.ff_dim)
        .config("bins", cfg.bins)
        .config("epochs", cfg.epochs)
        .config("batch_size", cfg.batch_size)
        .config("learning_rate", cfg.learning_rate)
        .config("beam_width", cfg.beam_width)
        .config("frames_t", cfg.model.frames_t)
        .config("per_frame_k", cfg.model.per_frame_k)
        .config("seed", cfg.seed);
    if let Some(p) = &a.ontology {
        m.input(p)?;
    }
    m.input(&a.corpus)?;
    m.output(&a.out)?.output(&trace_path)?;
    m.write_next_to(&a.out)
}

#[derive(Args)]
struct PredictJmmtArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam_width: usize,
    /// Predictions file whose coreference links select the pairs to
    /// decode; gold links are used when omitted.
    #[arg(long)]
    links: Option<PathBuf>,
}

fn cmd_predict_jmmt(a: PredictJmmtArgs) -> Result<()> {
    let model = load_jmmt_model(&a.model)?;
    let docs = load_corpus(&a.corpus)?;
    let ontology = load_ontology_arg(a.ontology.as_deref())?;
    let link_map: Option<BTreeMap<String, Vec<CorefLink>>> = match &a.links {
        Some(path) => Some(
            load_predictions(path)?
                .into_iter()
                .map(|p| (p.doc_id, p.pred_coref_links))
                .collect(),
        ),
        None => None,
    };
    let preds = predict_corpus(&model, &ontology, &docs, link_map.as_ref(), a.beam_width)?;
    save_predictions(&preds, &a.out)?;
    println!(
        "decoded {} text events, {} video events",
        preds.iter().map(|p| p.pred_text_events.len()).sum::<usize>(),
        preds.iter().map(|p| p.pred_video_events.len()).sum::<usize>()
    );

    let mut m = Manifest::new("predict-jmmt");
    m.config("beam_width", a.beam_width);
    m.config(
        "pairs",
        if a.links.is_some() { "predicted" } else { "gold" },
    );
    m.input(&a.model)?.input(&a.corpus)?;
    if let Some(p) = &a.links {
        m.input(p)?;
    }
    m.output(&a.out)?;
    m.write_next_to(&a.out)
}

fn predict_corpus(
    model: &crate::jmmt::JmmtModel,
    ontology: &Ontology,
    docs: &[MultimediaDocument],
    link_map: Option<&BTreeMap<String, Vec<CorefLink>>>,
    beam_width: usize,
) -> Result<Vec<DocPredictions>> {
    let empty: Vec<CorefLink> = Vec::new();
    docs.iter()
        .map(|doc| {
            let links = match link_map {
                Some(map) => map.get(&doc.doc_id).unwrap_or(&empty),
                None => &doc.coref_links,
            };
            predict_for_links(model, ontology, doc, links, beam_width)
        })
        .collect()
}

// ---------------------------------------------------------------------
// score / report
// ---------------------------------------------------------------------

/// Coreference links flattened across documents, namespaced by document
/// id so identical sentence ids in different documents stay distinct.
fn flatten_links(doc_id: &str, links: &[CorefLink]) -> Vec<CorefLink> {
    links
        .iter()
        .map(|l| CorefLink {
            sentence_id: format!("{doc_id}/{}", l.sentence_id),
            segment_id: format!("{doc_id}/{}", l.segment_id),
        })
        .collect()
}

fn coref_report(docs: &[MultimediaDocument], preds: &[DocPredictions]) -> Result<ScoreReport> {
    let pred_by_id: BTreeMap<&str, &DocPredictions> =
        preds.iter().map(|p| (p.doc_id.as_str(), p)).collect();
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut all_pairs = 0;
    for doc in docs {
        all_pairs += candidate_pairs(doc).len();
        gold.extend(flatten_links(&doc.doc_id, &doc.coref_links));
        if let Some(p) = pred_by_id.get(doc.doc_id.as_str()) {
            pred.extend(flatten_links(&doc.doc_id, &p.pred_coref_links));
        }
    }
    score_coref(&gold, &pred, all_pairs)
}

fn one_report(
    docs: &[MultimediaDocument],
    preds: &[DocPredictions],
    setting: Setting,
) -> Result<ScoreReport> {
    match setting {
        Setting::Coref => coref_report(docs, preds),
        other => score_extraction(docs, preds, other),
    }
}

#[derive(Args)]
struct ScoreArgs {
    /// Gold corpus.
    #[arg(long)]
    gold: PathBuf,
    /// Predictions (JSON lines).
    #[arg(long)]
    pred: PathBuf,
    /// text | video | multimedia | coref
    #[arg(long)]
    setting: String,
    /// Optional JSON record output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let setting: Setting = a.setting.parse().map_err(|_| {
        Error::Config(format!(
            "invalid setting {:?} (expected text, video, multimedia, or coref)",
            a.setting
        ))
    })?;
    let docs = load_corpus(&a.gold)?;
    let preds = load_predictions(&a.pred)?;
    let report = one_report(&docs, &preds, setting)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    if let Some(out) = &a.out {
        write_records(out, &[report])?;
        let mut m = Manifest::new("score");
        m.config("setting", setting);
        m.input(&a.gold)?.input(&a.pred)?;
        m.output(out)?;
        m.write_next_to(out)?;
    }
    Ok(())
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn all_reports(docs: &[MultimediaDocument], preds: &[DocPredictions]) -> Result<Vec<ScoreReport>> {
    [
        Setting::Text,
        Setting::Video,
        Setting::Multimedia,
        Setting::Coref,
    ]
    .into_iter()
    .map(|s| one_report(docs, preds, s))
    .collect()
}

fn write_records(path: &Path, reports: &[ScoreReport]) -> Result<()> {
    let records: Vec<ScoreRecord> = reports.iter().map(|r| r.record()).collect();
    write_atomic(path, serde_json::to_string_pretty(&records)?.as_bytes())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let docs = load_corpus(&a.gold)?;
    let preds = load_predictions(&a.pred)?;
    let reports = all_reports(&docs, &preds)?;
    print!("{}", render_table(&reports));
    if let Some(out) = &a.out {
        write_records(out, &reports)?;
        let mut m = Manifest::new("report");
        m.input(&a.gold)?.input(&a.pred)?;
        m.output(out)?;
        m.write_next_to(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    coref_model: PathBuf,
    #[arg(long)]
    jmmt_model: PathBuf,
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long, default_value_t = 0.13)]
    threshold: f64,
    #[arg(long, default_value_t = 5)]
    beam_width: usize,
    /// Directory receiving predictions and reports.
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let coref = load_coref_model(&a.coref_model)?;
    let jmmt = load_jmmt_model(&a.jmmt_model)?;
    let ontology = load_ontology_arg(a.ontology.as_deref())?;
    let docs = load_corpus(&a.corpus)?;
    std::fs::create_dir_all(&a.out_dir)?;

    // Stage 1: link prediction.
    let mut predicted_links: BTreeMap<String, Vec<CorefLink>> = BTreeMap::new();
    for doc in &docs {
        predicted_links.insert(doc.doc_id.clone(), predict_links_doc(&coref, doc, a.threshold)?);
    }

    // Stage 2, gold-pair mode: extraction on the gold coreferential
    // pairs (identical to standalone predict-jmmt + score).
    let gold_preds = predict_corpus(&jmmt, &ontology, &docs, None, a.beam_width)?;
    let gold_pred_path = a.out_dir.join("predictions_gold_pairs.jsonl");
    save_predictions(&gold_preds, &gold_pred_path)?;
    let gold_reports = all_reports(&docs, &gold_preds)?;

    // Stage 2, predicted-pair mode: end-to-end argument evaluation is
    // not fully defined, so these scores are indicative only.
    let pred_preds = predict_corpus(&jmmt, &ontology, &docs, Some(&predicted_links), a.beam_width)?;
    let pred_pred_path = a.out_dir.join("predictions_predicted_pairs.jsonl");
    save_predictions(&pred_preds, &pred_pred_path)?;
    let pred_reports = all_reports(&docs, &pred_preds)?;

    println!("== gold-pair extraction ==");
    print!("{}", render_table(&gold_reports));
    println!();
    println!("== predicted-pair extraction (indicative only) ==");
    print!("{}", render_table(&pred_reports));

    let report_path = a.out_dir.join("pipeline_report.json");
    let payload = serde_json::json!({
        "gold_pairs": gold_reports.iter().map(|r| r.record()).collect::<Vec<_>>(),
        "predicted_pairs": {
            "indicative": true,
            "reports": pred_reports.iter().map(|r| r.record()).collect::<Vec<_>>(),
        },
    });
    write_atomic(&report_path, serde_json::to_string_pretty(&payload)?.as_bytes())?;

    let mut m = Manifest::new("pipeline");
    m.config("threshold", a.threshold)
        .config("beam_width", a.beam_width);
    m.input(&a.corpus)?.input(&a.coref_model)?.input(&a.jmmt_model)?;
    m.output(&gold_pred_path)?
        .output(&pred_pred_path)?
        .output(&report_path)?;
    m.write_next_to(&report_path)
}
