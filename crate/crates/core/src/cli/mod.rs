//! The `qlab` command line: single-step subcommands plus the config-driven pipeline.

mod pipeline;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::awq::AwqConfig;
use crate::calibkit::synthetic::SyntheticCorpus;
use crate::calibkit::{
    build, read_calibration, token_stream, write_calibration, BuildParams, CalibrationSet, Corpus, Strategy,
    Tokenizer, CANONICAL_LANGS, DEFAULT_BUDGET, DEFAULT_MIX_FRACTION,
};
use crate::diagnostics::{
    activation_profile, delta_ppl, deterministic_timestamp, inverse_hessian, layer_mse_quantized,
    max_channel_activations, pairwise_hessian_distances, sha256_hex, vocab_overlap, vocab_stats, DiagnosticsReport,
    Metric, RunManifest, HESSIAN_DISTANCE_METRIC,
};
use crate::error::{QlabError, Result};
use crate::nanomodel::container::{decode_qlb1, decode_qlq1, encode_qlb1, encode_qlq1, QLB1_MAGIC, QLQ1_MAGIC};
use crate::nanomodel::{
    capture_activations, perplexity, quantize_model, InitOptions, Model, ModelConfig, NamedTensorStore,
    QuantizedStore, StoredTensor,
};
use crate::quantgrid::{Method, QuantSpec};
pub use pipeline::{
    run_pipeline, CorpusSource, EvalConfig, ModelSource, PipelineConfig, PipelineOptions, PipelineSummary,
    QuantOptions, SyntheticSource,
};

#[derive(Debug, Parser)]
#[command(name = "qlab", version, about = "Post-training weight quantization lab")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or generate calibration data.
    #[command(subcommand)]
    Calib(CalibCmd),
    /// Create, evaluate and quantize models.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Emit one diagnostics report.
    #[command(subcommand)]
    Diagnose(DiagnoseCmd),
    /// Run every method × calibration cell of a pipeline config.
    Pipeline {
        config: PathBuf,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check a pipeline config and its inputs without running anything.
    Validate { config: PathBuf },
    /// Print the tool version.
    Version,
}

#[derive(Debug, Subcommand)]
enum CalibCmd {
    Build(CalibBuildArgs),
    /// Write a seeded synthetic multilingual corpus as JSON Lines.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        docs_per_lang: usize,
        #[arg(long, default_value_t = 60)]
        words_per_doc: usize,
        /// Comma-separated tags; defaults to the ten canonical languages.
        #[arg(long, value_delimiter = ',')]
        langs: Vec<String>,
    },
}

#[derive(Debug, Args)]
struct CalibBuildArgs {
    /// single, multi10, multimix, multi, plus_code:<base>, ... ("single" takes --lang).
    #[arg(long)]
    strategy: String,
    #[arg(long = "lang", value_delimiter = ',')]
    langs: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mix_fraction: Option<f64>,
    /// Code/math corpus for plus_* strategies.
    #[arg(long)]
    extra: Option<PathBuf>,
    #[arg(long, default_value = "byte_level")]
    tokenizer: String,
}

#[derive(Debug, Subcommand)]
enum ModelCmd {
    /// Random model written as QLB1.
    InitRandom {
        /// JSON with model dimensions and optional "init" options.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity of a QLB1 or QLQ1 model on a JSONL corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        lang: Option<String>,
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    Quantize(QuantizeArgs),
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 128)]
    group_size: usize,
    #[arg(long, default_value_t = 0.01)]
    damping: f64,
    #[arg(long)]
    cross_group: bool,
    #[arg(long, default_value_t = 0.01)]
    salience_fraction: f64,
    #[arg(long, default_value_t = 16.0)]
    s_max: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 8192)]
    capture_cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a report with proxy errors and layer MSE.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum DiagnoseCmd {
    /// Per-tensor MSE between a QLB1 model and its quantized QLQ1 version.
    Mse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        quantized: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Activation profile of a calibration set, optionally against a reference set.
    Act {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "layer0.q_proj")]
        projection: String,
        #[arg(long, default_value_t = 8192)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise inverse-Hessian distances between calibration sets.
    Hessdist {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "calib", num_args = 1.., required = true)]
        calibs: Vec<PathBuf>,
        #[arg(long, default_value = "layer0.q_proj")]
        projection: String,
        #[arg(long, default_value_t = 0.01)]
        damping: f64,
        #[arg(long, default_value_t = 8192)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vocabulary statistics and overlaps of one to three calibration sets.
    Vocab {
        #[arg(long = "calib", num_args = 1.., required = true)]
        calibs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Δ-PPL = baseline − other.
    Delta {
        #[arg(long)]
        baseline: f64,
        #[arg(long)]
        other: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Machine-readable error object.
pub fn error_json(e: &QlabError) -> String {
    let mut v = json!({
        "error": e.tag(),
        "exit_code": e.exit_code(),
        "message": e.to_string(),
    });
    if let QlabError::Config { pointer, .. } = e {
        v["pointer"] = json!(pointer);
    }
    v.to_string()
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => QlabError::MissingInput(path.to_path_buf()),
        _ => QlabError::Io(e),
    })
}

enum LoadedModel {
    Dense(NamedTensorStore),
    Quantized(QuantizedStore),
}

fn load_model_file(path: &Path) -> Result<(LoadedModel, String)> {
    let bytes = read_bytes(path)?;
    let hash = sha256_hex(&bytes);
    let model = match bytes.get(..4) {
        Some(m) if m == QLB1_MAGIC => LoadedModel::Dense(decode_qlb1(&bytes)?),
        Some(m) if m == QLQ1_MAGIC => LoadedModel::Quantized(decode_qlq1(&bytes)?),
        _ => return Err(QlabError::Container(format!("{} is neither QLB1 nor QLQ1", path.display()))),
    };
    Ok((model, hash))
}

fn load_dense(path: &Path) -> Result<(NamedTensorStore, String)> {
    match load_model_file(path)? {
        (LoadedModel::Dense(s), h) => Ok((s, h)),
        _ => Err(QlabError::Container(format!("{} is not a QLB1 model", path.display()))),
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(sha256_hex(bytes))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Manifest for a single-step command; the config hash covers the argument vector.
struct StepManifest {
    argv: Vec<String>,
    seed: u64,
    model_hash: String,
    method: String,
    strategy: String,
    spec: Value,
    hashes: BTreeMap<String, String>,
}

impl StepManifest {
    fn new(argv: &[String]) -> Self {
        Self {
            argv: argv.to_vec(),
            seed: 0,
            model_hash: "none".into(),
            method: "none".into(),
            strategy: "none".into(),
            spec: json!({}),
            hashes: BTreeMap::new(),
        }
    }

    fn finish(self) -> RunManifest {
        RunManifest {
            config_hash: sha256_hex(self.argv.join("\u{0}").as_bytes()),
            command: self.argv,
            seed: self.seed,
            model_hash: self.model_hash,
            container_hashes: self.hashes,
            method: self.method,
            calib_strategy: self.strategy,
            spec: self.spec,
            tool_version: crate::VERSION.to_string(),
            timestamp: deterministic_timestamp(),
        }
    }

    /// Writes the manifest beside an artifact as `<artifact>.manifest.json`.
    fn write_beside(self, artifact: &Path) -> Result<()> {
        let report = DiagnosticsReport::new(self.finish());
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest.json");
        report.emit(Path::new(&name))
    }
}

fn cmd_calib_build(a: &CalibBuildArgs, argv: &[String]) -> Result<String> {
    let tokenizer: Tokenizer = a.tokenizer.parse()?;
    let (strategy, langs): (Strategy, Vec<String>) = if a.strategy == "single" {
        match a.langs.as_slice() {
            [lang] => (Strategy::Single(lang.clone()), Vec::new()),
            _ => return Err(QlabError::config("/lang", "strategy single takes exactly one --lang")),
        }
    } else {
        (a.strategy.parse()?, a.langs.clone())
    };
    let corpus = Corpus::load(&a.input)?;
    let extra = a.extra.as_deref().map(Corpus::load).transpose()?;
    let params = BuildParams {
        n: a.n,
        t: a.t,
        seed: a.seed,
        tokenizer,
    };
    let set = build(
        &strategy,
        &corpus,
        extra.as_ref(),
        &langs,
        a.mix_fraction.unwrap_or(DEFAULT_MIX_FRACTION),
        &params,
    )?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_calibration(&set, &a.out)?;
    let mut m = StepManifest::new(argv);
    m.seed = a.seed;
    m.strategy = strategy.to_string();
    m.hashes.insert(file_name(&a.out), sha256_hex(&read_bytes(&a.out)?));
    m.write_beside(&a.out)?;
    Ok(json!({
        "out": a.out.display().to_string(),
        "examples": set.examples.len(),
        "tokens": set.total_tokens(),
        "lang_counts": set.lang_counts(),
    })
    .to_string())
}

fn cmd_calib_synth(out: &Path, seed: u64, docs: usize, words: usize, langs: &[String]) -> Result<String> {
    let langs: Vec<&str> = if langs.is_empty() {
        CANONICAL_LANGS.to_vec()
    } else {
        langs.iter().map(String::as_str).collect()
    };
    let corpus = SyntheticCorpus::new(seed).docs_per_lang(docs).words_per_doc(words).build(&langs);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    corpus.write_jsonl(out)?;
    Ok(json!({"out": out.display().to_string(), "docs": corpus.all_docs().len()}).to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitFile {
    #[serde(flatten)]
    config: ModelConfig,
    #[serde(default)]
    init: InitOptions,
}

fn cmd_init_random(config: Option<&Path>, seed: u64, out: &Path, argv: &[String]) -> Result<String> {
    let (cfg, init) = match config {
        Some(p) => {
            let text = String::from_utf8(read_bytes(p)?).map_err(|_| QlabError::config("/", "config is not UTF-8"))?;
            let f: InitFile = serde_json::from_str(&text).map_err(|e| QlabError::config("/", e.to_string()))?;
            (f.config, f.init)
        }
        None => (ModelConfig::default(), InitOptions::default()),
    };
    let store = NamedTensorStore::init_random(&cfg, &init, seed)?;
    let hash = write_out(out, &encode_qlb1(&store)?)?;
    let mut m = StepManifest::new(argv);
    m.seed = seed;
    m.model_hash = hash.clone();
    m.spec = json!({"model": cfg, "init": init});
    m.hashes.insert(file_name(out), hash.clone());
    m.write_beside(out)?;
    Ok(json!({"out": out.display().to_string(), "sha256": hash}).to_string())
}

fn runnable(model: LoadedModel) -> Result<Model> {
    match model {
        LoadedModel::Dense(s) => Model::from_store(&s),
        LoadedModel::Quantized(q) => q.to_model(),
    }
}

fn cmd_eval(
    model: &Path,
    data: &Path,
    context: Option<usize>,
    lang: Option<&str>,
    max_tokens: Option<usize>,
) -> Result<String> {
    let (loaded, _) = load_model_file(model)?;
    let model = runnable(loaded)?;
    let corpus = Corpus::load(data)?;
    let docs = match lang {
        Some(l) => corpus.docs(l).to_vec(),
        None => corpus.all_docs(),
    };
    let stream = token_stream(&docs, Tokenizer::ByteLevel, max_tokens);
    let context = context.unwrap_or(model.config().context_length);
    let ppl = perplexity(&model, &stream, context)?;
    Ok(json!({"ppl": ppl, "tokens": stream.len(), "context": context}).to_string())
}

fn load_calib(path: &Path, hashes: &mut BTreeMap<String, String>) -> Result<CalibrationSet> {
    let set = read_calibration(path)?;
    hashes.insert(file_name(path), sha256_hex(&read_bytes(path)?));
    Ok(set)
}

fn cmd_quantize(a: &QuantizeArgs, argv: &[String]) -> Result<String> {
    let spec = QuantSpec {
        bits: a.bits,
        group_size: a.group_size,
        method: a.method,
        damping: a.damping,
        cross_group_propagation: a.cross_group,
        awq: AwqConfig {
            salience_fraction: a.salience_fraction,
            s_max: a.s_max,
            ..AwqConfig::default()
        },
        batch_size: a.batch_size,
        capture_cap: a.capture_cap,
        seed: a.seed,
    };
    let (store, model_hash) = load_dense(&a.model)?;
    let mut m = StepManifest::new(argv);
    let calib = a.calib.as_deref().map(|p| load_calib(p, &mut m.hashes)).transpose()?;
    let outcome = quantize_model(&store, calib.as_ref(), &spec)?;
    let hash = write_out(&a.out, &encode_qlq1(&outcome.store)?)?;
    m.seed = a.seed;
    m.model_hash = model_hash;
    m.method = spec.method.to_string();
    m.strategy = calib.as_ref().map_or("none".into(), |c| c.strategy.to_string());
    m.spec = serde_json::to_value(&spec)?;
    m.hashes.insert(file_name(&a.out), hash);
    let total: f64 = outcome.proxy_errors.values().sum();
    if let Some(path) = &a.report {
        let mut report = DiagnosticsReport::new(m.finish());
        report.scalar("proxy_error.total", total);
        for (name, v) in &outcome.proxy_errors {
            report.scalar(format!("proxy_error.{name}"), *v);
        }
        add_mse(&mut report, &store, &outcome.store)?;
        report.emit(path)?;
    } else {
        m.write_beside(&a.out)?;
    }
    Ok(json!({"out": a.out.display().to_string(), "proxy_error": total}).to_string())
}

fn add_mse(report: &mut DiagnosticsReport, original: &NamedTensorStore, q: &QuantizedStore) -> Result<()> {
    let mse = layer_mse_quantized(original, q)?;
    for (name, v) in &mse.per_tensor {
        report.scalar(format!("mse.{name}"), *v);
    }
    if let Some(a) = &mse.argmax {
        report.insert("mse.argmax", Metric::Label(a.clone()));
    }
    for (layer, name) in &mse.per_layer_argmax {
        report.insert(format!("mse.argmax.{layer}"), Metric::Label(name.clone()));
    }
    Ok(())
}

fn capture_spec(cap: usize) -> QuantSpec {
    let mut spec = QuantSpec::new(Method::Rtn);
    spec.capture_cap = cap;
    spec
}

fn run_diagnose(cmd: &DiagnoseCmd, argv: &[String]) -> Result<String> {
    let mut m = StepManifest::new(argv);
    let (out, report) = match cmd {
        DiagnoseCmd::Mse { model, quantized, out } => {
            let (store, hash) = load_dense(model)?;
            let (q, qhash) = match load_model_file(quantized)? {
                (LoadedModel::Quantized(q), h) => (q, h),
                _ => return Err(QlabError::Container(format!("{} is not a QLQ1 model", quantized.display()))),
            };
            m.model_hash = hash;
            m.hashes.insert(file_name(quantized), qhash);
            if let Some(StoredTensor::Quantized(t)) = q.iter().map(|(_, t)| t).find(|t| matches!(t, StoredTensor::Quantized(_))) {
                m.method = t.method.to_string();
            }
            let mut report = DiagnosticsReport::new(m.finish());
            add_mse(&mut report, &store, &q)?;
            (out, report)
        }
        DiagnoseCmd::Act {
            model,
            calib,
            reference,
            projection,
            cap,
            out,
        } => {
            let (store, hash) = load_dense(model)?;
            m.model_hash = hash;
            let set = load_calib(calib, &mut m.hashes)?;
            m.strategy = set.strategy.to_string();
            m.seed = set.seed;
            let spec = capture_spec(*cap);
            let buf = capture_activations(&store, &set, &spec)?;
            let ref_profile = match reference {
                Some(r) => {
                    let rset = load_calib(r, &mut m.hashes)?;
                    Some(activation_profile(&capture_activations(&store, &rset, &spec)?, None)?)
                }
                None => None,
            };
            let p = activation_profile(&buf, ref_profile.as_ref())?;
            let mut report = DiagnosticsReport::new(m.finish());
            for (k, v) in [("p50", p.p50), ("p90", p.p90), ("p99", p.p99), ("p999", p.p999), ("max", p.max)] {
                report.scalar(format!("act.{k}"), v);
            }
            report.scalar("act.n", p.n as f64);
            report.scalar("act.tail_mass", p.tail_mass);
            if let Some(c) = p.range_coverage {
                report.scalar("act.range_coverage", c);
            }
            report.insert(
                format!("act.max_channel.{projection}"),
                Metric::Vector(max_channel_activations(&buf, projection)?),
            );
            (out, report)
        }
        DiagnoseCmd::Hessdist {
            model,
            calibs,
            projection,
            damping,
            cap,
            out,
        } => {
            if calibs.len() < 2 {
                return Err(QlabError::config("/calib", "needs at least two calibration sets"));
            }
            let (store, hash) = load_dense(model)?;
            m.model_hash = hash;
            let spec = capture_spec(*cap);
            let mut hinvs = Vec::new();
            let mut names = Vec::new();
            for c in calibs {
                let set = load_calib(c, &mut m.hashes)?;
                names.push(set.strategy.to_string());
                let buf = capture_activations(&store, &set, &spec)?;
                hinvs.push(inverse_hessian(&buf.matrix(projection)?, *damping)?);
            }
            m.strategy = names.join(",");
            m.spec = json!({"damping": damping, "projection": projection});
            let mut report = DiagnosticsReport::new(m.finish());
            report.insert("hessian_distance", Metric::Matrix(pairwise_hessian_distances(&hinvs)?));
            report.insert("hessian_distance.metric", Metric::Label(HESSIAN_DISTANCE_METRIC.into()));
            report.insert("hessian_distance.labels", Metric::Label(names.join(",")));
            (out, report)
        }
        DiagnoseCmd::Vocab { calibs, out } => {
            if calibs.len() > 3 {
                return Err(QlabError::config("/calib", "takes at most three calibration sets"));
            }
            let sets = calibs
                .iter()
                .map(|c| load_calib(c, &mut m.hashes))
                .collect::<Result<Vec<_>>>()?;
            m.strategy = sets.iter().map(|s| s.strategy.to_string()).collect::<Vec<_>>().join(",");
            let mut report_metrics = Vec::new();
            for (i, s) in sets.iter().enumerate() {
                let v = vocab_stats(s)?;
                report_metrics.push((format!("vocab.{i}.unique_types"), v.unique_types as f64));
                report_metrics.push((format!("vocab.{i}.mean_tokens_per_example"), v.mean_tokens_per_example));
            }
            if sets.len() >= 2 {
                let refs: Vec<&CalibrationSet> = sets.iter().collect();
                let o = vocab_overlap(&refs)?;
                for (i, j, n) in o.pairwise {
                    report_metrics.push((format!("overlap.{i}_{j}"), n as f64));
                }
                if let Some(t) = o.triple {
                    report_metrics.push(("overlap.0_1_2".into(), t as f64));
                }
            }
            let mut report = DiagnosticsReport::new(m.finish());
            for (k, v) in report_metrics {
                report.scalar(k, v);
            }
            (out, report)
        }
        DiagnoseCmd::Delta { baseline, other, out } => {
            let d = delta_ppl(*baseline, *other)?;
            let mut report = DiagnosticsReport::new(m.finish());
            report.scalar("ppl.baseline", *baseline);
            report.scalar("ppl.other", *other);
            report.scalar("delta_ppl", d);
            (out, report)
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    report.emit(out)?;
    Ok(json!({"out": out.display().to_string(), "metrics": report.metrics.len()}).to_string())
}

/// Runs a parsed command and returns its stdout text. `argv` is recorded in manifests.
pub fn run_with_args(cli: Cli, argv: &[String]) -> Result<String> {
    match cli.command {
        Command::Calib(CalibCmd::Build(a)) => cmd_calib_build(&a, argv),
        Command::Calib(CalibCmd::Synth {
            out,
            seed,
            docs_per_lang,
            words_per_doc,
            langs,
        }) => cmd_calib_synth(&out, seed, docs_per_lang, words_per_doc, &langs),
        Command::Model(ModelCmd::InitRandom { config, seed, out }) => cmd_init_random(config.as_deref(), seed, &out, argv),
        Command::Model(ModelCmd::Eval {
            model,
            data,
            context,
            lang,
            max_tokens,
        }) => cmd_eval(&model, &data, context, lang.as_deref(), max_tokens),
        Command::Model(ModelCmd::Quantize(a)) => cmd_quantize(&a, argv),
        Command::Diagnose(d) => run_diagnose(&d, argv),
        Command::Pipeline { config, jobs } => {
            let summary = run_pipeline(
                &config,
                &PipelineOptions {
                    jobs,
                    command: argv.to_vec(),
                    timestamp: deterministic_timestamp(),
                },
            )?;
            Ok(json!({
                "run_dir": summary.run_dir.display().to_string(),
                "cells": summary.cells.len(),
                "delta_csv": summary.csv.display().to_string(),
            })
            .to_string())
        }
        Command::Validate { config } => {
            let cfg = PipelineConfig::load(&config)?;
            cfg.validate(config.parent().unwrap_or(Path::new(".")))?;
            Ok("ok".into())
        }
        Command::Version => Ok(format!("qlab {}", crate::VERSION)),
    }
}

/// Outcome of one invocation: exit code plus stdout and stderr text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Full invocation with argument parsing and error reporting, as the binary runs it.
pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let os: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = os.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&os) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            return if code == 0 {
                Outcome { code, stdout: text, stderr: String::new() }
            } else {
                Outcome { code, stdout: String::new(), stderr: text }
            };
        }
    };
    match run_with_args(cli, &argv) {
        Ok(out) => Outcome {
            code: 0,
            stdout: out,
            stderr: String::new(),
        },
        Err(e) => Outcome {
            code: e.exit_code(),
            stdout: String::new(),
            stderr: error_json(&e),
        },
    }
}
