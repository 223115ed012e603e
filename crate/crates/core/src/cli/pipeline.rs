//! Config-driven cross product: every method × calibration strategy, quantized,
//! evaluated per language and summarized as a Δ-PPL table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{error_json, read_bytes};
use crate::awq::AwqConfig;
use crate::calibkit::synthetic::SyntheticCorpus;
use crate::calibkit::{
    build, derive_seed, token_stream, write_calibration, BuildParams, CalibrationSet, Corpus, Strategy, Tokenizer,
    CANONICAL_LANGS, DEFAULT_BUDGET, DEFAULT_MIX_FRACTION,
};
use crate::diagnostics::{
    delta_table, layer_mse_quantized, sha256_hex, vocab_stats, DiagnosticsReport, Metric, PplCell, RunManifest,
};
use crate::error::{QlabError, Result};
use crate::nanomodel::container::{encode_qlb1, encode_qlq1, load_qlb1};
use crate::nanomodel::{perplexity, quantize_model, InitOptions, Model, ModelConfig, NamedTensorStore};
use crate::quantgrid::{Method, QuantSpec};

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_budget() -> usize {
    DEFAULT_BUDGET
}
fn default_mix() -> f64 {
    DEFAULT_MIX_FRACTION
}
fn default_baseline() -> String {
    "single:en".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Path(PathBuf),
    InitRandom {
        #[serde(default)]
        config: ModelConfig,
        #[serde(default)]
        init: InitOptions,
        #[serde(default)]
        seed: u64,
    },
}

fn default_docs() -> usize {
    40
}
fn default_words() -> usize {
    60
}
fn default_synth_langs() -> Vec<String> {
    CANONICAL_LANGS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_docs")]
    pub docs_per_lang: usize,
    #[serde(default = "default_words")]
    pub words_per_doc: usize,
    #[serde(default = "default_synth_langs")]
    pub langs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Path(PathBuf),
    Synthetic(SyntheticSource),
}

fn default_bits() -> u8 {
    4
}
fn default_group() -> usize {
    128
}
fn default_damping() -> f64 {
    0.01
}
fn default_batch() -> usize {
    2
}
fn default_cap() -> usize {
    8192
}

/// Every `QuantSpec` field except the method and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantOptions {
    #[serde(default = "default_bits")]
    pub bits: u8,
    #[serde(default = "default_group")]
    pub group_size: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default)]
    pub cross_group_propagation: bool,
    #[serde(default)]
    pub awq: AwqConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_cap")]
    pub capture_cap: usize,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self {
            bits: default_bits(),
            group_size: default_group(),
            damping: default_damping(),
            cross_group_propagation: false,
            awq: AwqConfig::default(),
            batch_size: default_batch(),
            capture_cap: default_cap(),
        }
    }
}

impl QuantOptions {
    pub fn spec(&self, method: Method, seed: u64) -> QuantSpec {
        QuantSpec {
            bits: self.bits,
            group_size: self.group_size,
            method,
            damping: self.damping,
            cross_group_propagation: self.cross_group_propagation,
            awq: self.awq.clone(),
            batch_size: self.batch_size,
            capture_cap: self.capture_cap,
            seed,
        }
    }
}

fn default_eval_tokens() -> usize {
    2048
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub langs: Vec<String>,
    /// Window length; defaults to the model's context length.
    #[serde(default)]
    pub context: Option<usize>,
    #[serde(default = "default_eval_tokens")]
    pub tokens_per_lang: usize,
    /// Held-out text. Without it, a synthetic training corpus is regenerated
    /// under a derived seed and a path corpus is reused as is.
    #[serde(default)]
    pub corpus: Option<CorpusSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub model: ModelSource,
    pub corpus: CorpusSource,
    #[serde(default)]
    pub extra_corpus: Option<CorpusSource>,
    pub calibrations: Vec<String>,
    /// Languages for multi10 / multi; empty means the defaults.
    #[serde(default)]
    pub langs: Vec<String>,
    #[serde(default = "default_mix")]
    pub mix_fraction: f64,
    #[serde(default = "default_budget")]
    pub n: usize,
    #[serde(default = "default_budget")]
    pub t: usize,
    #[serde(default)]
    pub tokenizer: Tokenizer,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub quant: QuantOptions,
    pub eval: EvalConfig,
    #[serde(default = "default_baseline")]
    pub baseline: String,
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn prefix(pointer: &str, err: QlabError) -> QlabError {
    match err {
        QlabError::Config { pointer: p, message } => QlabError::config(format!("{pointer}{p}"), message),
        other => other,
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            QlabError::config(pointer, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_bytes(path)?)
            .map_err(|_| QlabError::config("/", "config is not UTF-8"))?;
        Self::from_json(&text)
    }

    /// Canonical JSON of the config with defaults filled in.
    pub fn canonical(&self) -> Result<String> {
        let mut out = String::new();
        crate::diagnostics::write_canonical(&serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical()?.as_bytes()))
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        if self.calibrations.is_empty() {
            return Err(QlabError::config("/calibrations", "needs at least one strategy"));
        }
        let mut out: Vec<Strategy> = Vec::new();
        for (i, s) in self.calibrations.iter().enumerate() {
            let strategy: Strategy = s.parse().map_err(|e| match e {
                QlabError::Config { message, .. } => QlabError::config(format!("/calibrations/{i}"), message),
                other => other,
            })?;
            if out.contains(&strategy) {
                return Err(QlabError::config(format!("/calibrations/{i}"), format!("duplicate strategy `{s}`")));
            }
            out.push(strategy);
        }
        Ok(out)
    }

    /// Schema and semantic checks plus input-file availability; runs nothing.
    pub fn validate(&self, base: &Path) -> Result<()> {
        let strategies = self.strategies()?;
        let baseline: Strategy = self
            .baseline
            .parse()
            .map_err(|_| QlabError::config("/baseline", format!("unknown strategy `{}`", self.baseline)))?;
        if !strategies.contains(&baseline) {
            return Err(QlabError::config("/baseline", "baseline must be one of the calibrations"));
        }
        if self.methods.is_empty() {
            return Err(QlabError::config("/methods", "needs at least one method"));
        }
        if let Some(i) = (1..self.methods.len()).find(|&i| self.methods[..i].contains(&self.methods[i])) {
            return Err(QlabError::config(format!("/methods/{i}"), "duplicate method"));
        }
        if self.n == 0 {
            return Err(QlabError::config("/n", "must be >= 1"));
        }
        if self.t == 0 {
            return Err(QlabError::config("/t", "must be >= 1"));
        }
        if !(self.mix_fraction > 0.0 && self.mix_fraction < 1.0) {
            return Err(QlabError::config("/mix_fraction", "must lie in (0, 1)"));
        }
        if self.tokenizer != Tokenizer::ByteLevel {
            return Err(QlabError::config("/tokenizer", "the model consumes byte-level ids"));
        }
        self.quant.spec(Method::Rtn, self.seed).validate().map_err(|e| prefix("/quant", e))?;
        if self.eval.langs.is_empty() {
            return Err(QlabError::config("/eval/langs", "needs at least one language"));
        }
        if self.eval.tokens_per_lang < 2 {
            return Err(QlabError::config("/eval/tokens_per_lang", "must be >= 2"));
        }
        if let Some(c) = self.eval.context {
            if c < 2 {
                return Err(QlabError::config("/eval/context", "must be >= 2"));
            }
        }
        match &self.model {
            ModelSource::Path(p) => check_exists(&base.join(p))?,
            ModelSource::InitRandom { config, .. } => {
                config.validate().map_err(|e| prefix("/model/init_random/config", e))?;
                if let Some(c) = self.eval.context.filter(|&c| c > config.context_length) {
                    return Err(QlabError::config(
                        "/eval/context",
                        format!("{c} exceeds the model context {}", config.context_length),
                    ));
                }
            }
        }
        check_source(&self.corpus, base)?;
        if let Some(extra) = &self.extra_corpus {
            check_source(extra, base)?;
        } else if strategies.iter().any(Strategy::is_augmented) {
            return Err(QlabError::config("/extra_corpus", "code/math strategies need an extra corpus"));
        }
        if let Some(e) = &self.eval.corpus {
            check_source(e, base)?;
        }
        Ok(())
    }
}

fn check_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(QlabError::MissingInput(path.to_path_buf()))
    }
}

fn check_source(src: &CorpusSource, base: &Path) -> Result<()> {
    match src {
        CorpusSource::Path(p) => check_exists(&base.join(p)),
        CorpusSource::Synthetic(_) => Ok(()),
    }
}

fn load_source(src: &CorpusSource, base: &Path, seed_override: Option<u64>) -> Result<Corpus> {
    match src {
        CorpusSource::Path(p) => Corpus::load(&base.join(p)),
        CorpusSource::Synthetic(s) => {
            let langs: Vec<&str> = s.langs.iter().map(String::as_str).collect();
            Ok(SyntheticCorpus::new(seed_override.unwrap_or(s.seed))
                .docs_per_lang(s.docs_per_lang)
                .words_per_doc(s.words_per_doc)
                .build(&langs))
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub jobs: usize,
    pub command: Vec<String>,
    pub timestamp: String,
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub run_dir: PathBuf,
    pub cells: Vec<PplCell>,
    pub csv: PathBuf,
}

struct Shared<'a> {
    cfg: &'a PipelineConfig,
    opts: &'a PipelineOptions,
    run_dir: &'a Path,
    store: &'a NamedTensorStore,
    model_hash: &'a str,
    config_hash: &'a str,
    streams: &'a BTreeMap<String, Vec<u32>>,
    context: usize,
}

struct CalibArtifact {
    strategy: Strategy,
    set: CalibrationSet,
    file: String,
    hash: String,
}

fn cell_dir_name(method: Method, strategy: &Strategy) -> String {
    format!("{}__{}", method, strategy.slug())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(sha256_hex(bytes))
}

fn manifest(sh: &Shared<'_>, method: &str, strategy: &str, spec: Value, hashes: BTreeMap<String, String>) -> RunManifest {
    RunManifest {
        command: sh.opts.command.clone(),
        seed: sh.cfg.seed,
        config_hash: sh.config_hash.to_string(),
        model_hash: sh.model_hash.to_string(),
        container_hashes: hashes,
        method: method.to_string(),
        calib_strategy: strategy.to_string(),
        spec,
        tool_version: crate::VERSION.to_string(),
        timestamp: sh.opts.timestamp.clone(),
    }
}

fn evaluate(model: &Model, sh: &Shared<'_>) -> Result<BTreeMap<String, f64>> {
    sh.streams
        .iter()
        .map(|(lang, stream)| Ok((lang.clone(), perplexity(model, stream, sh.context)?)))
        .collect()
}

fn run_cell(sh: &Shared<'_>, method: Method, calib: &CalibArtifact) -> Result<PplCell> {
    let dir = sh.run_dir.join("cells").join(cell_dir_name(method, &calib.strategy));
    fs::create_dir_all(&dir)?;
    let spec = sh.cfg.quant.spec(method, sh.cfg.seed);
    let outcome = quantize_model(sh.store, Some(&calib.set), &spec)?;
    let qlq = encode_qlq1(&outcome.store)?;
    let qlq_hash = write_file(&dir.join("model.qlq"), &qlq)?;
    let ppl = evaluate(&outcome.store.to_model()?, sh)?;

    let mut hashes = BTreeMap::new();
    hashes.insert(calib.file.clone(), calib.hash.clone());
    hashes.insert(format!("cells/{}/model.qlq", cell_dir_name(method, &calib.strategy)), qlq_hash);
    let strategy = calib.strategy.to_string();
    let mut report = DiagnosticsReport::new(manifest(sh, method.as_str(), &strategy, serde_json::to_value(&spec)?, hashes));
    for (lang, v) in &ppl {
        report.scalar(format!("ppl.{lang}"), *v);
    }
    report.scalar("ppl.avg", ppl.values().sum::<f64>() / ppl.len() as f64);
    report.scalar("proxy_error.total", outcome.proxy_errors.values().sum());
    for (name, v) in &outcome.proxy_errors {
        report.scalar(format!("proxy_error.{name}"), *v);
    }
    let mse = layer_mse_quantized(sh.store, &outcome.store)?;
    for (name, v) in mse.per_tensor.iter().filter(|(n, _)| n.starts_with("layer") && n.ends_with("_proj")) {
        report.scalar(format!("mse.{name}"), *v);
    }
    if let Some(a) = &mse.argmax {
        report.insert("mse.argmax", Metric::Label(a.clone()));
    }
    for (layer, name) in &mse.per_layer_argmax {
        report.insert(format!("mse.argmax.{layer}"), Metric::Label(name.clone()));
    }
    let vs = vocab_stats(&calib.set)?;
    report.scalar("calib.unique_types", vs.unique_types as f64);
    report.scalar("calib.mean_tokens_per_example", vs.mean_tokens_per_example);
    report.emit(&dir.join("report.json"))?;

    Ok(PplCell {
        method: method.to_string(),
        calibration: strategy,
        ppl,
    })
}

fn ppl_csv(cells: &[PplCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let langs: Vec<&String> = cells.first().map(|c| c.ppl.keys().collect()).unwrap_or_default();
    let mut header = vec!["method".to_string(), "calibration".to_string()];
    header.extend(langs.iter().map(|l| l.to_string()));
    header.push("Avg".into());
    let csv_err = |e: csv::Error| QlabError::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    for c in cells {
        let mut rec = vec![c.method.clone(), c.calibration.clone()];
        rec.extend(c.ppl.values().map(|v| format!("{v:.6}")));
        rec.push(format!("{:.6}", c.ppl.values().sum::<f64>() / c.ppl.len() as f64));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| QlabError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

/// Runs the full cross product. Artifacts land in `<out_dir>/<config hash>/`;
/// failed cells leave a `FAILED` marker next to whatever they produced.
pub fn run_pipeline(config_path: &Path, opts: &PipelineOptions) -> Result<PipelineSummary> {
    let cfg = PipelineConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    cfg.validate(base)?;
    let strategies = cfg.strategies()?;
    let config_hash = cfg.hash()?;
    let run_dir = base.join(&cfg.out_dir).join(&config_hash[..16]);
    if run_dir.exists() {
        fs::remove_dir_all(&run_dir)?;
    }
    fs::create_dir_all(&run_dir)?;
    let mut hashes = BTreeMap::new();
    hashes.insert("config.json".to_string(), write_file(&run_dir.join("config.json"), cfg.canonical()?.as_bytes())?);

    let result = run_stages(&cfg, &strategies, opts, base, &run_dir, &config_hash, &mut hashes);
    if let Err(e) = &result {
        fs::write(run_dir.join("FAILED"), error_json(e) + "\n")?;
    }
    result
}

fn run_stages(
    cfg: &PipelineConfig,
    strategies: &[Strategy],
    opts: &PipelineOptions,
    base: &Path,
    run_dir: &Path,
    config_hash: &str,
    hashes: &mut BTreeMap<String, String>,
) -> Result<PipelineSummary> {
    let store = match &cfg.model {
        ModelSource::Path(p) => load_qlb1(&base.join(p))?,
        ModelSource::InitRandom { config, init, seed } => NamedTensorStore::init_random(config, init, *seed)?,
    };
    let model_cfg = store.validate()?;
    let qlb = encode_qlb1(&store)?;
    let model_hash = write_file(&run_dir.join("model.qlb"), &qlb)?;
    hashes.insert("model.qlb".into(), model_hash.clone());

    let corpus = load_source(&cfg.corpus, base, None)?;
    let extra = cfg.extra_corpus.as_ref().map(|s| load_source(s, base, None)).transpose()?;
    let eval_corpus = match (&cfg.eval.corpus, &cfg.corpus) {
        (Some(src), _) => load_source(src, base, None)?,
        (None, CorpusSource::Synthetic(s)) => load_source(&cfg.corpus, base, Some(derive_seed(s.seed, "eval")))?,
        (None, CorpusSource::Path(_)) => corpus.clone(),
    };
    let context = cfg.eval.context.unwrap_or(model_cfg.context_length);
    let mut streams = BTreeMap::new();
    for lang in &cfg.eval.langs {
        let stream = token_stream(eval_corpus.docs(lang), cfg.tokenizer, Some(cfg.eval.tokens_per_lang));
        if stream.len() < 2 {
            return Err(QlabError::InsufficientData {
                lang: lang.clone(),
                available: stream.len(),
                required: 2,
            });
        }
        streams.insert(lang.clone(), stream);
    }

    let params = BuildParams {
        n: cfg.n,
        t: cfg.t,
        seed: cfg.seed,
        tokenizer: cfg.tokenizer,
    };
    let calibs = strategies
        .iter()
        .map(|s| {
            let set = build(s, &corpus, extra.as_ref(), &cfg.langs, cfg.mix_fraction, &params)?;
            let file = format!("calib/{}.jsonl", s.slug());
            let path = run_dir.join(&file);
            fs::create_dir_all(path.parent().expect("has parent"))?;
            write_calibration(&set, &path)?;
            let hash = sha256_hex(&fs::read(&path)?);
            Ok(CalibArtifact {
                strategy: s.clone(),
                set,
                file,
                hash,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for c in &calibs {
        hashes.insert(c.file.clone(), c.hash.clone());
    }

    let sh = Shared {
        cfg,
        opts,
        run_dir,
        store: &store,
        model_hash: &model_hash,
        config_hash,
        streams: &streams,
        context,
    };

    // Full-precision reference perplexities.
    let fp = evaluate(&Model::from_store(&store)?, &sh)?;
    let mut reference = DiagnosticsReport::new(manifest(&sh, "none", "none", Value::Object(Default::default()), BTreeMap::new()));
    for (lang, v) in &fp {
        reference.scalar(format!("ppl.{lang}"), *v);
    }
    reference.emit(&run_dir.join("reference.json"))?;

    let cells: Vec<(Method, &CalibArtifact)> = cfg
        .methods
        .iter()
        .flat_map(|&m| calibs.iter().map(move |c| (m, c)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| QlabError::Io(std::io::Error::other(e)))?;
    let results: Vec<Result<PplCell>> = pool.install(|| cells.par_iter().map(|&(m, c)| run_cell(&sh, m, c)).collect());

    let mut ok = Vec::new();
    let mut first_err = None;
    for (&(m, c), res) in cells.iter().zip(results) {
        let dir_name = cell_dir_name(m, &c.strategy);
        match res {
            Ok(cell) => {
                let qlq = format!("cells/{dir_name}/model.qlq");
                hashes.insert(qlq.clone(), sha256_hex(&fs::read(run_dir.join(&qlq))?));
                let rep = format!("cells/{dir_name}/report.json");
                hashes.insert(rep.clone(), sha256_hex(&fs::read(run_dir.join(&rep))?));
                ok.push(cell);
            }
            Err(e) => {
                let dir = run_dir.join("cells").join(&dir_name);
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("FAILED"), error_json(&e) + "\n")?;
                log::error!("cell {dir_name} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let baseline: Strategy = cfg.baseline.parse()?;
    let table = delta_table(&ok, &baseline.to_string())?;
    let csv = run_dir.join("delta_ppl.csv");
    hashes.insert("delta_ppl.csv".into(), write_file(&csv, table.to_csv()?.as_bytes())?);
    hashes.insert("ppl.csv".into(), write_file(&run_dir.join("ppl.csv"), ppl_csv(&ok)?.as_bytes())?);
    hashes.insert(
        "reference.json".into(),
        sha256_hex(&fs::read(run_dir.join("reference.json"))?),
    );

    let strategies_joined = strategies.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    let methods_joined = cfg.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",");
    let mut summary = DiagnosticsReport::new(manifest(
        &sh,
        &methods_joined,
        &strategies_joined,
        serde_json::to_value(&cfg.quant)?,
        hashes.clone(),
    ));
    summary.scalar("cells", ok.len() as f64);
    for row in &table.rows {
        summary.scalar(format!("delta_ppl.{}.{}.avg", row.method, row.calibration), row.avg);
    }
    summary.emit(&run_dir.join("manifest.json"))?;

    Ok(PipelineSummary {
        run_dir: run_dir.to_path_buf(),
        cells: ok,
        csv,
    })
}
