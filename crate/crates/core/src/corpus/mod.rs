//! Corpus files, vocabularies, deterministic splits and head/tail labels.

mod generator;

pub use generator::{
    generate_synthetic, ConditionSpec, GeneratorConfig, GeneratorError, SlotSpec, TemplateSpec,
    DEFAULT_GENERATOR_TOML,
};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::{parse_context, ContextError, ContextExtras, ContextRecord};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Context {
        line: usize,
        #[source]
        source: ContextError,
    },
    #[error("corpus has {0} utterances; splitting needs at least 3")]
    TooSmall(usize),
    #[error("split ratios must be positive and sum to 100, got {0:?}")]
    BadRatios([u32; 3]),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercased word tokens plus the context record they were spoken in.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub context: ContextRecord,
}

impl Utterance {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedCorpus {
    pub utterances: Vec<Utterance>,
    /// Lines whose text field was empty.
    pub skipped_empty: usize,
}

/// Parses corpus text: `YYYY-MM-DD HH:MM<TAB>text` with optional
/// `<TAB>geo=XX` and `<TAB>prompt=initial|follow_up` fields. Blank lines are ignored.
pub fn parse_corpus(text: &str) -> Result<LoadedCorpus, CorpusError> {
    let mut out = LoadedCorpus::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.split('\t');
        let ts = fields.next().unwrap_or_default();
        let body = fields.next().ok_or_else(|| CorpusError::Parse {
            line,
            message: "missing tab between timestamp and text".into(),
        })?;
        let mut extras = ContextExtras::default();
        for extra in fields {
            match extra.split_once('=') {
                Some(("geo", g)) => extras.geo_hash = Some(g.to_string()),
                Some(("prompt", p)) => {
                    extras.prompt = Some(
                        p.parse()
                            .map_err(|source| CorpusError::Context { line, source })?,
                    )
                }
                _ => {
                    return Err(CorpusError::Parse {
                        line,
                        message: format!("unrecognised field {extra:?}"),
                    })
                }
            }
        }
        let context =
            parse_context(ts, extras).map_err(|source| CorpusError::Context { line, source })?;
        let tokens: Vec<String> = body.split_whitespace().map(str::to_lowercase).collect();
        if tokens.is_empty() {
            out.skipped_empty += 1;
            continue;
        }
        out.utterances.push(Utterance { tokens, context });
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<LoadedCorpus, CorpusError> {
    parse_corpus(&std::fs::read_to_string(path)?)
}

pub fn format_corpus(utterances: &[Utterance]) -> String {
    let mut out = String::new();
    for u in utterances {
        out.push_str(&u.context.timestamp());
        out.push('\t');
        out.push_str(&u.text());
        if let Some(g) = u.context.geo_hash() {
            let _ = write!(out, "\tgeo={g}");
        }
        if let Some(p) = u.context.prompt() {
            let _ = write!(out, "\tprompt={}", p.as_str());
        }
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<(), CorpusError> {
    std::fs::write(path, format_corpus(utterances))?;
    Ok(())
}

/// SHA-256 of the canonical serialization, hex encoded.
pub fn corpus_hash(utterances: &[Utterance]) -> String {
    let digest = Sha256::digest(format_corpus(utterances).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;

/// Word vocabulary with BOS/EOS/UNK at ids 0/1/2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            counts,
            index,
        }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_parts(self.tokens, self.counts)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Keeps training tokens seen at least `min_count` times, most frequent first
/// (ties lexicographic).
pub fn build_vocab(train: &[Utterance], min_count: u64) -> Vocab {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for u in train {
        for t in &u.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut tokens = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
    let mut cnts = vec![0, 0, 0];
    for (t, c) in kept {
        tokens.push(t.to_string());
        cnts.push(c);
    }
    Vocab::from_parts(tokens, cnts)
}

/// Train/dev/test percentages and the split seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [u32; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [90, 5, 5],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Uniform random partition under `spec.seed`; dev and test hold at least one utterance each.
pub fn split(corpus: &[Utterance], spec: &SplitSpec) -> Result<Splits, CorpusError> {
    if spec.ratios.iter().sum::<u32>() != 100 || spec.ratios.contains(&0) {
        return Err(CorpusError::BadRatios(spec.ratios));
    }
    let n = corpus.len();
    if n < 3 {
        return Err(CorpusError::TooSmall(n));
    }
    let share = |pct: u32| ((n as f64 * pct as f64 / 100.0).round() as usize).max(1);
    let n_dev = share(spec.ratios[1]);
    let n_test = share(spec.ratios[2]).min(n - n_dev - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::sub_rng(spec.seed, rng::stream::SPLIT));
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        dev: pick(&order[..n_dev]),
        test: pick(&order[n_dev..n_dev + n_test]),
        train: pick(&order[n_dev + n_test..]),
    })
}

/// Fraction of unique texts (by frequency rank) that form the head.
pub const HEAD_FRACTION: f64 = 0.05;

/// Head/tail membership of each evaluated utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionLabels {
    pub head: Vec<bool>,
    pub tail: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Full,
    Head,
    Tail,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Full, Partition::Head, Partition::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Full => "full",
            Partition::Head => "head",
            Partition::Tail => "tail",
        }
    }
}

impl PartitionLabels {
    /// Every utterance in the full partition, none in head or tail.
    pub fn full_only(n: usize) -> Self {
        PartitionLabels {
            head: vec![false; n],
            tail: vec![false; n],
        }
    }

    pub fn contains(&self, partition: Partition, i: usize) -> bool {
        match partition {
            Partition::Full => true,
            Partition::Head => self.head[i],
            Partition::Tail => self.tail[i],
        }
    }

    pub fn count(&self, partition: Partition) -> usize {
        (0..self.head.len())
            .filter(|&i| self.contains(partition, i))
            .count()
    }
}

/// Labels `evaluated` utterances against text frequencies counted over `full`.
///
/// Head: the text ranks in the top 5% of unique texts by descending frequency
/// (ties broken lexicographically). Tail: the text occurs exactly once.
pub fn partition_head_tail(evaluated: &[Utterance], full: &[Utterance]) -> PartitionLabels {
    let mut freq: HashMap<String, u64> = HashMap::new();
    for u in full {
        *freq.entry(u.text()).or_default() += 1;
    }
    let mut ranked: Vec<(&String, u64)> = freq.iter().map(|(t, &c)| (t, c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let n_head = (ranked.len() as f64 * HEAD_FRACTION).ceil() as usize;
    let head: std::collections::HashSet<&str> =
        ranked[..n_head].iter().map(|(t, _)| t.as_str()).collect();
    let texts: Vec<String> = evaluated.iter().map(Utterance::text).collect();
    PartitionLabels {
        head: texts.iter().map(|t| head.contains(t.as_str())).collect(),
        tail: texts
            .iter()
            .map(|t| freq.get(t).copied().unwrap_or(0) == 1)
            .collect(),
    }
}
