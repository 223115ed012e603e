//! Calibration-set construction under a fixed token budget.
//!
//! Every builder concatenates shuffled documents into a token stream and cuts
//! it into exact `T`-token windows, so each set holds exactly `N × T` tokens.

mod container;
pub mod synthetic;
pub mod tokenizer;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QlabError, Result};
pub use container::{read_calibration, write_calibration};
pub use tokenizer::Tokenizer;

/// Fixed language order for the multi10 remainder rule.
pub const CANONICAL_LANGS: [&str; 10] = ["en", "fr", "sw", "zh", "xh", "st", "zu", "yo", "ig", "ha"];

/// Default example count and example length.
pub const DEFAULT_BUDGET: usize = 1024;

/// Default share of examples replaced by code/math chunks.
pub const DEFAULT_MIX_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub lang: String,
    #[serde(default)]
    pub source: String,
}

impl Document {
    pub fn new(text: impl Into<String>, lang: impl Into<String>, source: impl Into<String>) -> Result<Self> {
        let doc = Self {
            text: text.into(),
            lang: lang.into(),
            source: source.into(),
        };
        doc.validate()?;
        Ok(doc)
    }

    fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(QlabError::EmptyInput("document text"));
        }
        if self.lang.trim().is_empty() {
            return Err(QlabError::EmptyInput("document lang"));
        }
        Ok(())
    }
}

/// Documents grouped by language tag, in load order within each language.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    by_lang: BTreeMap<String, Vec<Document>>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, doc: Document) {
        self.by_lang.entry(doc.lang.clone()).or_default().push(doc);
    }

    pub fn extend(&mut self, docs: impl IntoIterator<Item = Document>) {
        docs.into_iter().for_each(|d| self.push(d));
    }

    pub fn langs(&self) -> Vec<String> {
        self.by_lang.keys().cloned().collect()
    }

    pub fn docs(&self, lang: &str) -> &[Document] {
        self.by_lang.get(lang).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_docs(&self) -> Vec<Document> {
        self.by_lang.values().flatten().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.by_lang.is_empty()
    }

    /// Reads one JSON Lines file of `{"text", "lang", "source"}` objects.
    pub fn load_file(path: &Path) -> Result<Self> {
        let mut corpus = Corpus::new();
        corpus.read_jsonl(path)?;
        Ok(corpus)
    }

    /// Reads every `*.jsonl` file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(QlabError::MissingInput(dir.to_path_buf()));
        }
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        let mut corpus = Corpus::new();
        for f in files {
            corpus.read_jsonl(&f)?;
        }
        Ok(corpus)
    }

    /// Loads a directory of JSONL files or a single JSONL file.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load_dir(path)
        } else if path.is_file() {
            Self::load_file(path)
        } else {
            Err(QlabError::MissingInput(path.to_path_buf()))
        }
    }

    fn read_jsonl(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => QlabError::MissingInput(path.to_path_buf()),
            _ => QlabError::Io(e),
        })?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| QlabError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let doc: Document = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            doc.validate().map_err(|e| parse_err(e.to_string()))?;
            self.push(doc);
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for doc in self.by_lang.values().flatten() {
            out.push_str(&serde_json::to_string(doc)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Calibration composition strategy.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Strategy {
    Single(String),
    Multi10,
    Multimix,
    Multi,
    PlusCode(Box<Strategy>),
    PlusMath(Box<Strategy>),
    PlusCodemath(Box<Strategy>),
}

impl Strategy {
    pub fn base(&self) -> &Strategy {
        match self {
            Strategy::PlusCode(b) | Strategy::PlusMath(b) | Strategy::PlusCodemath(b) => b.base(),
            other => other,
        }
    }

    /// Language tags an augmentation draws from.
    pub fn extra_kinds(&self) -> &'static [&'static str] {
        match self {
            Strategy::PlusCode(_) => &["code"],
            Strategy::PlusMath(_) => &["math"],
            Strategy::PlusCodemath(_) => &["code", "math"],
            _ => &[],
        }
    }

    pub fn is_augmented(&self) -> bool {
        !self.extra_kinds().is_empty()
    }

    /// File-name-safe form.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "-")
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Single(l) => write!(f, "single:{l}"),
            Strategy::Multi10 => f.write_str("multi10"),
            Strategy::Multimix => f.write_str("multimix"),
            Strategy::Multi => f.write_str("multi"),
            Strategy::PlusCode(b) => write!(f, "plus_code:{b}"),
            Strategy::PlusMath(b) => write!(f, "plus_math:{b}"),
            Strategy::PlusCodemath(b) => write!(f, "plus_codemath:{b}"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = QlabError;

    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        let unknown = || QlabError::config("/strategy", format!("unknown strategy `{s}`"));
        let base = |rest: Option<&str>| -> Result<Box<Strategy>> {
            Ok(Box::new(rest.ok_or_else(unknown)?.parse()?))
        };
        match head {
            "single" => match rest {
                Some(l) if !l.is_empty() && !l.contains(':') => Ok(Strategy::Single(l.to_string())),
                _ => Err(QlabError::config("/strategy", format!("`{s}` needs a language, e.g. single:en"))),
            },
            "multi10" if rest.is_none() => Ok(Strategy::Multi10),
            "multimix" if rest.is_none() => Ok(Strategy::Multimix),
            "multi" if rest.is_none() => Ok(Strategy::Multi),
            "plus_code" => Ok(Strategy::PlusCode(base(rest)?)),
            "plus_math" => Ok(Strategy::PlusMath(base(rest)?)),
            "plus_codemath" => Ok(Strategy::PlusCodemath(base(rest)?)),
            _ => Err(unknown()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub lang: String,
    pub ids: Vec<u32>,
}

/// Fixed-budget calibration set: `n` examples of exactly `t` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub examples: Vec<Example>,
    pub n: usize,
    pub t: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub tokenizer: Tokenizer,
    pub langs: Vec<String>,
    pub mix_fraction: Option<f64>,
}

impl CalibrationSet {
    pub fn total_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.ids.len()).sum()
    }

    pub fn lang_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            *counts.entry(e.lang.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn token_types(&self) -> BTreeSet<u32> {
        self.examples.iter().flat_map(|e| e.ids.iter().copied()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.len() != self.n {
            return Err(QlabError::ShapeMismatch(format!(
                "{} examples, header says {}",
                self.examples.len(),
                self.n
            )));
        }
        if let Some(e) = self.examples.iter().find(|e| e.ids.len() != self.t) {
            return Err(QlabError::ShapeMismatch(format!(
                "example of {} tokens in a T={} set",
                e.ids.len(),
                self.t
            )));
        }
        Ok(())
    }
}

/// Common builder inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildParams {
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub tokenizer: Tokenizer,
}

impl BuildParams {
    pub fn new(n: usize, t: usize, seed: u64) -> Self {
        Self {
            n,
            t,
            seed,
            tokenizer: Tokenizer::ByteLevel,
        }
    }

    fn required(&self) -> usize {
        self.n * self.t
    }
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic sub-seed for a named purpose.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut z = seed ^ fnv1a64(purpose);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose))
}

struct Chunk {
    lang: String,
    ids: Vec<u32>,
}

/// Shuffles docs, concatenates their tokens (EOS after each document for the
/// byte-level tokenizer) and cuts exact `t`-token windows. Each window is
/// tagged with the language contributing most of its tokens.
fn chunk_stream(docs: &[&Document], tokenizer: Tokenizer, t: usize, rng: &mut ChaCha8Rng) -> (Vec<Chunk>, usize) {
    let mut order: Vec<&Document> = docs.to_vec();
    order.shuffle(rng);
    let mut ids = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    let mut tags: Vec<&str> = Vec::new();
    for doc in order {
        let tag = match tags.iter().position(|&l| l == doc.lang) {
            Some(p) => p,
            None => {
                tags.push(&doc.lang);
                tags.len() - 1
            }
        };
        let mut toks = tokenizer.encode(&doc.text);
        if tokenizer == Tokenizer::ByteLevel {
            toks.push(tokenizer::EOS);
        }
        owners.extend(std::iter::repeat_n(tag, toks.len()));
        ids.extend(toks);
    }
    let total = ids.len();
    if t == 0 {
        return (Vec::new(), total);
    }
    let chunks = ids
        .chunks_exact(t)
        .zip(owners.chunks_exact(t))
        .map(|(c, o)| {
            let mut counts = vec![0usize; tags.len()];
            o.iter().for_each(|&i| counts[i] += 1);
            let best = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            Chunk {
                lang: tags[best].to_string(),
                ids: c.to_vec(),
            }
        })
        .collect();
    (chunks, total)
}

/// Documents in order as one token stream (EOS after each document for the
/// byte-level tokenizer), truncated to `limit` tokens.
pub fn token_stream(docs: &[Document], tokenizer: Tokenizer, limit: Option<usize>) -> Vec<u32> {
    let limit = limit.unwrap_or(usize::MAX);
    let mut ids = Vec::new();
    for doc in docs {
        if ids.len() >= limit {
            break;
        }
        ids.extend(tokenizer.encode(&doc.text));
        if tokenizer == Tokenizer::ByteLevel {
            ids.push(tokenizer::EOS);
        }
    }
    ids.truncate(limit);
    ids
}

fn lang_chunks(corpus: &Corpus, lang: &str, p: &BuildParams) -> (Vec<Chunk>, usize) {
    let docs: Vec<&Document> = corpus.docs(lang).iter().collect();
    let mut rng = rng_for(p.seed, &format!("lang:{lang}"));
    chunk_stream(&docs, p.tokenizer, p.t, &mut rng)
}

fn to_examples(chunks: impl IntoIterator<Item = Chunk>) -> Vec<Example> {
    chunks
        .into_iter()
        .map(|c| Example { lang: c.lang, ids: c.ids })
        .collect()
}

fn check_t(p: &BuildParams) -> Result<()> {
    if p.t == 0 {
        return Err(QlabError::config("/t", "tokens per example must be >= 1"));
    }
    Ok(())
}

/// Single-language set: first `n` windows of the seeded shuffled stream.
pub fn build_single(corpus: &Corpus, lang: &str, p: &BuildParams) -> Result<CalibrationSet> {
    check_t(p)?;
    let (chunks, total) = lang_chunks(corpus, lang, p);
    if chunks.len() < p.n {
        return Err(QlabError::InsufficientData {
            lang: lang.to_string(),
            available: total,
            required: p.required(),
        });
    }
    Ok(CalibrationSet {
        examples: to_examples(chunks.into_iter().take(p.n)),
        n: p.n,
        t: p.t,
        strategy: Strategy::Single(lang.to_string()),
        seed: p.seed,
        tokenizer: p.tokenizer,
        langs: vec![lang.to_string()],
        mix_fraction: None,
    })
}

/// Per-language quotas: `floor(n/10)` each, remainder to the first languages
/// in canonical order.
pub fn multi10_quotas(n: usize, langs: &[String]) -> Result<Vec<(String, usize)>> {
    if langs.len() != 10 {
        return Err(QlabError::WrongLanguageCount(langs.len()));
    }
    let mut ordered: Vec<String> = langs.to_vec();
    let rank = |l: &str| CANONICAL_LANGS.iter().position(|&c| c == l).unwrap_or(usize::MAX);
    ordered.sort_by_key(|l| rank(l));
    let (base, extra) = (n / 10, n % 10);
    Ok(ordered
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, base + usize::from(i < extra)))
        .collect())
}

/// Balanced ten-language set.
pub fn build_multi10(corpus: &Corpus, langs: &[String], p: &BuildParams) -> Result<CalibrationSet> {
    check_t(p)?;
    let quotas = multi10_quotas(p.n, langs)?;
    let mut examples = Vec::with_capacity(p.n);
    for (lang, quota) in &quotas {
        let (chunks, total) = lang_chunks(corpus, lang, p);
        if chunks.len() < *quota {
            return Err(QlabError::InsufficientData {
                lang: lang.clone(),
                available: total,
                required: quota * p.t,
            });
        }
        examples.extend(to_examples(chunks.into_iter().take(*quota)));
    }
    examples.shuffle(&mut rng_for(p.seed, "multi10:order"));
    Ok(CalibrationSet {
        examples,
        n: p.n,
        t: p.t,
        strategy: Strategy::Multi10,
        seed: p.seed,
        tokenizer: p.tokenizer,
        langs: quotas.into_iter().map(|(l, _)| l).collect(),
        mix_fraction: None,
    })
}

/// Unbalanced pooled set: uniform sample of windows from all languages mixed.
pub fn build_multimix(corpus: &Corpus, p: &BuildParams) -> Result<CalibrationSet> {
    check_t(p)?;
    let pool: Vec<&Document> = corpus.by_lang.values().flatten().collect();
    let (chunks, total) = chunk_stream(&pool, p.tokenizer, p.t, &mut rng_for(p.seed, "multimix:pool"));
    if chunks.len() < p.n {
        return Err(QlabError::InsufficientData {
            lang: "pool".into(),
            available: total,
            required: p.required(),
        });
    }
    let picks = index::sample(&mut rng_for(p.seed, "multimix:sample"), chunks.len(), p.n);
    let mut slots: Vec<Option<Chunk>> = chunks.into_iter().map(Some).collect();
    let examples = to_examples(picks.iter().map(|i| slots[i].take().expect("distinct indices")));
    Ok(CalibrationSet {
        examples,
        n: p.n,
        t: p.t,
        strategy: Strategy::Multimix,
        seed: p.seed,
        tokenizer: p.tokenizer,
        langs: corpus.langs(),
        mix_fraction: None,
    })
}

/// Each example's language drawn uniformly over `langs` (all corpus languages
/// when empty); exhausted languages leave the urn.
pub fn build_multi(corpus: &Corpus, langs: &[String], p: &BuildParams) -> Result<CalibrationSet> {
    check_t(p)?;
    let langs: Vec<String> = if langs.is_empty() { corpus.langs() } else { langs.to_vec() };
    if langs.is_empty() {
        return Err(QlabError::InsufficientData {
            lang: "*".into(),
            available: 0,
            required: p.required(),
        });
    }
    let mut streams: Vec<(String, std::vec::IntoIter<Chunk>)> = langs
        .iter()
        .map(|l| (l.clone(), lang_chunks(corpus, l, p).0.into_iter()))
        .collect();
    let mut rng = rng_for(p.seed, "multi:urn");
    let mut examples = Vec::with_capacity(p.n);
    while examples.len() < p.n {
        if streams.is_empty() {
            return Err(QlabError::InsufficientData {
                lang: "*".into(),
                available: examples.len() * p.t,
                required: p.required(),
            });
        }
        let k = rng.gen_range(0..streams.len());
        match streams[k].1.next() {
            Some(c) => examples.push(Example { lang: c.lang, ids: c.ids }),
            None => {
                log::warn!("multi: language `{}` exhausted, dropping from urn", streams[k].0);
                streams.remove(k);
            }
        }
    }
    Ok(CalibrationSet {
        examples,
        n: p.n,
        t: p.t,
        strategy: Strategy::Multi,
        seed: p.seed,
        tokenizer: p.tokenizer,
        langs,
        mix_fraction: None,
    })
}

/// Replaces `round(mix_fraction · N)` seeded-uniformly chosen examples with
/// windows cut from `extra` documents whose tag is in `kinds`.
pub fn augment(
    base: &CalibrationSet,
    extra: &Corpus,
    kinds: &[&str],
    mix_fraction: f64,
) -> Result<CalibrationSet> {
    if !(0.0..=1.0).contains(&mix_fraction) {
        return Err(QlabError::config("/mix_fraction", "must lie in [0, 1]"));
    }
    let k = (mix_fraction * base.n as f64).round() as usize;
    let docs: Vec<&Document> = kinds.iter().flat_map(|kind| extra.docs(kind)).collect();
    let mut rng = rng_for(base.seed, "augment:extra");
    let (chunks, total) = chunk_stream(&docs, base.tokenizer, base.t, &mut rng);
    if chunks.len() < k {
        return Err(QlabError::InsufficientData {
            lang: kinds.join("+"),
            available: total,
            required: k * base.t,
        });
    }
    let mut positions = index::sample(&mut rng_for(base.seed, "augment:positions"), base.n, k).into_vec();
    positions.sort_unstable();
    let mut out = base.clone();
    for (pos, chunk) in positions.into_iter().zip(chunks) {
        out.examples[pos] = Example {
            lang: chunk.lang,
            ids: chunk.ids,
        };
    }
    let boxed = Box::new(base.strategy.clone());
    out.strategy = match kinds {
        ["code"] => Strategy::PlusCode(boxed),
        ["math"] => Strategy::PlusMath(boxed),
        _ => Strategy::PlusCodemath(boxed),
    };
    for kind in kinds {
        if !out.langs.iter().any(|l| l == kind) {
            out.langs.push(kind.to_string());
        }
    }
    out.mix_fraction = Some(mix_fraction);
    Ok(out)
}

/// Builds any strategy. `langs` feeds multi10/multi; `extra` feeds the
/// code/math augmentations.
pub fn build(
    strategy: &Strategy,
    corpus: &Corpus,
    extra: Option<&Corpus>,
    langs: &[String],
    mix_fraction: f64,
    p: &BuildParams,
) -> Result<CalibrationSet> {
    match strategy {
        Strategy::Single(lang) => build_single(corpus, lang, p),
        Strategy::Multi10 => {
            let default: Vec<String>;
            let langs = if langs.is_empty() {
                default = CANONICAL_LANGS.iter().map(|s| s.to_string()).collect();
                &default[..]
            } else {
                langs
            };
            build_multi10(corpus, langs, p)
        }
        Strategy::Multimix => build_multimix(corpus, p),
        Strategy::Multi => build_multi(corpus, langs, p),
        Strategy::PlusCode(b) | Strategy::PlusMath(b) | Strategy::PlusCodemath(b) => {
            let base = build(b, corpus, extra, langs, mix_fraction, p)?;
            let extra = extra.ok_or_else(|| {
                QlabError::config("/extra", format!("strategy `{strategy}` needs an extra code/math corpus"))
            })?;
            augment(&base, extra, strategy.extra_kinds(), mix_fraction)
        }
    }
}
