//! Perplexity reports, relative reductions, confidence intervals, the
//! shuffled-context ablation, probability sweeps and attention traces.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::context::{
    shuffle_contexts, ContextField, ContextInput, ContextSetKind, ContextVocab, DialoguePrompt,
};
use crate::corpus::{
    build_vocab, corpus_hash, partition_head_tail, Partition, PartitionLabels, Splits, Utterance,
    Vocab,
};
use crate::dd::Dd;
use crate::models::{
    encode, Architecture, AttentionTrace, Encoded, Model, ModelConfig, ModelError,
};
use crate::scalar::Scalar;
use crate::training::{init_params, train, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("reports were computed on different corpora ({0} vs {1})")]
    CorpusMismatch(String, String),
    #[error("confidence interval needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("confidence level must lie in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("{0}")]
    Unsupported(String),
}

/// Summed negative log-likelihood and predicted-token count of one utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nll {
    pub nll: Dd,
    pub tokens: usize,
}

/// Per-utterance NLL, scored in batches of `batch_size`.
pub fn utterance_nlls<T: Scalar>(
    model: &Model<T>,
    items: &[Encoded],
    batch_size: usize,
) -> Result<Vec<Nll>, ModelError> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let refs: Vec<&Encoded> = chunk.iter().collect();
        for s in model.score_batch(&refs)? {
            out.push(Nll {
                nll: s.nll,
                tokens: s.per_token.len(),
            });
        }
    }
    Ok(out)
}

/// `exp(Σ NLL / Σ tokens)` over all of `items`.
pub fn corpus_perplexity<T: Scalar>(
    model: &Model<T>,
    items: &[Encoded],
    batch_size: usize,
) -> Result<f64, ModelError> {
    let nlls = utterance_nlls(model, items, batch_size)?;
    Ok(perplexity_of(nlls.iter()).map_or(f64::NAN, |s| s.perplexity))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionStat {
    pub utterances: usize,
    pub tokens: usize,
    pub nll: f64,
    pub perplexity: f64,
}

fn perplexity_of<'a>(nlls: impl Iterator<Item = &'a Nll>) -> Option<PartitionStat> {
    let (mut utterances, mut tokens, mut nll) = (0, 0, Dd::default());
    for n in nlls {
        utterances += 1;
        tokens += n.tokens;
        nll = nll + n.nll;
    }
    (tokens > 0).then(|| PartitionStat {
        utterances,
        tokens,
        nll: nll.to_f64(),
        perplexity: nll.div_f64(tokens as f64).exp().to_f64(),
    })
}

/// Full/head/tail perplexities. An empty partition is `None`, never zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionPerplexity {
    pub full: Option<PartitionStat>,
    pub head: Option<PartitionStat>,
    pub tail: Option<PartitionStat>,
}

impl PartitionPerplexity {
    pub fn get(&self, p: Partition) -> Option<&PartitionStat> {
        match p {
            Partition::Full => self.full.as_ref(),
            Partition::Head => self.head.as_ref(),
            Partition::Tail => self.tail.as_ref(),
        }
    }

    pub fn ppl(&self, p: Partition) -> Option<f64> {
        self.get(p).map(|s| s.perplexity)
    }
}

pub fn partition_perplexity(nlls: &[Nll], labels: &PartitionLabels) -> PartitionPerplexity {
    let pick = |p: Partition| {
        perplexity_of(
            nlls.iter()
                .enumerate()
                .filter(|(i, _)| labels.contains(p, *i))
                .map(|(_, n)| n),
        )
    };
    PartitionPerplexity {
        full: pick(Partition::Full),
        head: pick(Partition::Head),
        tail: pick(Partition::Tail),
    }
}

pub fn perplexity<T: Scalar>(
    model: &Model<T>,
    items: &[Encoded],
    labels: &PartitionLabels,
    batch_size: usize,
) -> Result<PartitionPerplexity, ModelError> {
    Ok(partition_perplexity(
        &utterance_nlls(model, items, batch_size)?,
        labels,
    ))
}

/// Signed percentages `100·(base − model)/base`; negative is a degradation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub baseline: String,
    pub full: Option<f64>,
    pub head: Option<f64>,
    pub tail: Option<f64>,
}

impl Reductions {
    pub fn get(&self, p: Partition) -> Option<f64> {
        match p {
            Partition::Full => self.full,
            Partition::Head => self.head,
            Partition::Tail => self.tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub config: Option<ModelConfig>,
    pub seed: u64,
    pub corpus_hash: String,
    pub split: String,
    pub partitions: PartitionPerplexity,
    #[serde(default)]
    pub relative: Option<Reductions>,
}

pub fn relative_reduction(
    model: &EvalReport,
    baseline: &EvalReport,
) -> Result<Reductions, EvalError> {
    if model.corpus_hash != baseline.corpus_hash {
        return Err(EvalError::CorpusMismatch(
            model.corpus_hash.clone(),
            baseline.corpus_hash.clone(),
        ));
    }
    let r = |p: Partition| {
        Some(100.0 * reduction(baseline.partitions.ppl(p)?, model.partitions.ppl(p)?))
    };
    Ok(Reductions {
        baseline: baseline.model.clone(),
        full: r(Partition::Full),
        head: r(Partition::Head),
        tail: r(Partition::Tail),
    })
}

/// `(base − model)/base` as a fraction.
pub fn reduction(base: f64, model: f64) -> f64 {
    (base - model) / base
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table with one row per metric and a column per partition.
    pub fn table(&self) -> String {
        let cell = |v: Option<String>| v.unwrap_or_else(|| "absent".to_string());
        let mut rows = vec![
            vec!["".to_string(), "Full".into(), "Head".into(), "Tail".into()],
            std::iter::once("tokens".to_string())
                .chain(
                    Partition::ALL
                        .iter()
                        .map(|&p| cell(self.partitions.get(p).map(|s| s.tokens.to_string()))),
                )
                .collect(),
            std::iter::once("perplexity".to_string())
                .chain(
                    Partition::ALL
                        .iter()
                        .map(|&p| cell(self.partitions.ppl(p).map(|v| format!("{v:.4}")))),
                )
                .collect(),
        ];
        if let Some(r) = &self.relative {
            rows.push(
                std::iter::once(format!("reduction vs {} (%)", r.baseline))
                    .chain(
                        Partition::ALL
                            .iter()
                            .map(|&p| cell(r.get(p).map(|v| format!("{v:.2}")))),
                    )
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..4)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = format!(
            "{} on {} split ({})\n",
            self.model,
            self.split,
            &self.corpus_hash[..self.corpus_hash.len().min(12)]
        );
        for row in rows {
            let _ = write!(s, "{:<w$}", row[0], w = widths[0]);
            for (v, w) in row[1..].iter().zip(&widths[1..]) {
                let _ = write!(s, "  {v:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub half_width: f64,
    pub level: f64,
    pub n_runs: usize,
}

impl ConfidenceInterval {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }
}

/// Student-t interval on the mean of `values`.
pub fn confidence_interval(values: &[f64], level: f64) -> Result<ConfidenceInterval, EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewRuns(n));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EvalError::BadLevel(level));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive dof")
        .inverse_cdf(0.5 + level / 2.0);
    Ok(ConfidenceInterval {
        mean,
        half_width: t * (var / n as f64).sqrt(),
        level,
        n_runs: n,
    })
}

/// Everything needed to train and evaluate one model on fixed splits.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub splits: Splits,
    /// Frequency source for head/tail labels.
    pub full_corpus: Vec<Utterance>,
    pub vocab: Vocab,
    pub context_vocab: ContextVocab,
}

impl Experiment {
    pub fn new(splits: Splits, min_count: u64) -> Self {
        let vocab = build_vocab(&splits.train, min_count);
        let context_vocab = ContextVocab::from_records(splits.train.iter().map(|u| &u.context));
        let full_corpus = splits
            .train
            .iter()
            .chain(&splits.dev)
            .chain(&splits.test)
            .cloned()
            .collect();
        Experiment {
            splits,
            full_corpus,
            vocab,
            context_vocab,
        }
    }

    /// Same texts with context records permuted within each split.
    pub fn shuffled(&self, seed: u64) -> Self {
        let splits = Splits {
            train: shuffle_contexts(&self.splits.train, seed),
            dev: shuffle_contexts(&self.splits.dev, seed.wrapping_add(1)),
            test: shuffle_contexts(&self.splits.test, seed.wrapping_add(2)),
        };
        Experiment {
            full_corpus: splits
                .train
                .iter()
                .chain(&splits.dev)
                .chain(&splits.test)
                .cloned()
                .collect(),
            splits,
            vocab: self.vocab.clone(),
            context_vocab: self.context_vocab.clone(),
        }
    }

    /// Model config with this experiment's vocabulary sizes filled in.
    pub fn configure(&self, mut config: ModelConfig) -> ModelConfig {
        config.vocab_size = self.vocab.len();
        config.context_vocab_size = self.context_vocab.len();
        config
    }

    pub fn encode_all(
        &self,
        config: &ModelConfig,
        utterances: &[Utterance],
    ) -> Result<Vec<Encoded>, ModelError> {
        utterances
            .iter()
            .map(|u| encode(config, &self.vocab, &self.context_vocab, u))
            .collect()
    }

    pub fn train<T: Scalar>(
        &self,
        config: &ModelConfig,
        train_config: &TrainConfig,
    ) -> Result<TrainOutcome<T>, EvalError> {
        let config = self.configure(config.clone());
        let model = init_params::<T>(&config, train_config.seed)?;
        let tr = self.encode_all(&config, &self.splits.train)?;
        let dev = self.encode_all(&config, &self.splits.dev)?;
        Ok(train(model, &tr, &dev, train_config)?)
    }

    /// Perplexity report of `model` on the test split.
    pub fn evaluate<T: Scalar>(
        &self,
        model: &Model<T>,
        seed: u64,
        batch_size: usize,
    ) -> Result<EvalReport, EvalError> {
        let items = self.encode_all(&model.config, &self.splits.test)?;
        let labels = partition_head_tail(&self.splits.test, &self.full_corpus);
        Ok(EvalReport {
            model: model.config.label(),
            config: Some(model.config.clone()),
            seed,
            corpus_hash: corpus_hash(&self.full_corpus),
            split: "test".into(),
            partitions: perplexity(model, &items, &labels, batch_size)?,
            relative: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub true_context: EvalReport,
    pub shuffled: EvalReport,
    /// Relative change of the shuffled model against the true-context model;
    /// negative means shuffling hurt.
    pub delta: Reductions,
}

/// Trains `config` on true and on shuffled contexts and evaluates each on
/// the matching test split.
pub fn shuffled_ablation<T: Scalar>(
    exp: &Experiment,
    config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<AblationResult, EvalError> {
    if !config.architecture.is_adapted() {
        return Err(EvalError::Unsupported(format!(
            "the shuffled-context ablation needs a contextual architecture, not {}",
            config.architecture
        )));
    }
    let true_outcome = exp.train::<T>(config, train_config)?;
    let true_context = exp.evaluate(
        &true_outcome.best,
        train_config.seed,
        train_config.eval_batch_size,
    )?;
    let shuffled_exp = exp.shuffled(train_config.seed);
    let shuffled_outcome = shuffled_exp.train::<T>(config, train_config)?;
    let mut shuffled = shuffled_exp.evaluate(
        &shuffled_outcome.best,
        train_config.seed,
        train_config.eval_batch_size,
    )?;
    // Texts, and therefore head/tail labels, are untouched by shuffling.
    shuffled.corpus_hash = true_context.corpus_hash.clone();
    shuffled.model = format!("{} (shuffled)", shuffled.model);
    let delta = relative_reduction(&shuffled, &true_context)?;
    Ok(AblationResult {
        true_context,
        shuffled,
        delta,
    })
}

/// Replaces one field of a context input, leaving the others untouched.
/// `value` is the 0-based field index (hour 0–23, weekday 0–6, week 0–52,
/// month 0–11, prompt 0–1, geo position in the context vocabulary).
pub fn override_context(
    input: &ContextInput,
    kind: ContextSetKind,
    field: ContextField,
    value: usize,
    context_vocab: &ContextVocab,
) -> Result<ContextInput, EvalError> {
    use crate::context::{HOUR_BASE, MONTH_BASE, PROMPT_BASE, WEEKDAY_BASE, WEEK_BASE};
    let unsupported =
        || EvalError::Unsupported(format!("field {field:?} is not part of a {kind:?} context"));
    if let Some(card) = field.cardinality() {
        if value >= card {
            return Err(EvalError::Unsupported(format!(
                "value {value} out of range for {field:?}"
            )));
        }
    }
    Ok(match (input, kind) {
        (ContextInput::Tokens(ids), ContextSetKind::LearnedTokens) => {
            let (slot, id) = match field {
                ContextField::Month => (0, MONTH_BASE + value),
                ContextField::Week => (1, WEEK_BASE + value),
                ContextField::Weekday => (2, WEEKDAY_BASE + value),
                ContextField::Hour => (3, HOUR_BASE + value),
                _ => return Err(unsupported()),
            };
            let mut ids = ids.clone();
            ids[slot] = id;
            ContextInput::Tokens(ids)
        }
        (ContextInput::Tokens(_), ContextSetKind::Prompt) if field == ContextField::Prompt => {
            let p = [DialoguePrompt::Initial, DialoguePrompt::FollowUp][value];
            ContextInput::Tokens(vec![PROMPT_BASE + p.index()])
        }
        (ContextInput::Tokens(_), ContextSetKind::Geo) if field == ContextField::Geo => {
            let g = context_vocab
                .geo_hashes()
                .get(value)
                .ok_or_else(unsupported)?;
            ContextInput::Tokens(vec![context_vocab.geo_id(g)])
        }
        (
            ContextInput::Features(v),
            ContextSetKind::FeatureVector | ContextSetKind::FeatureVectorGated,
        ) => {
            let (pair, period) = match field {
                ContextField::Hour => (0, 24.0),
                ContextField::Weekday => (1, 7.0),
                ContextField::Week => (2, 53.0),
                ContextField::Month => (3, 12.0),
                _ => return Err(unsupported()),
            };
            let angle = 2.0 * std::f64::consts::PI * value as f64 / period;
            let mut v = v.clone();
            v[2 * pair] = angle.sin();
            v[2 * pair + 1] = angle.cos();
            ContextInput::Features(v)
        }
        _ => return Err(unsupported()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub field: ContextField,
    pub target: String,
    pub points: Vec<(usize, f64)>,
    /// Probability under a context-free baseline model, when one is given.
    pub baseline: Option<f64>,
}

impl SweepCurve {
    /// Field value with the highest probability (lowest value on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &(v, p) in &self.points {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((v, p));
            }
        }
        best.map(|(v, _)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{:?},probability,baseline\n", self.field).to_lowercase();
        for (v, p) in &self.points {
            let b = self.baseline.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{v},{p},{b}");
        }
        s
    }
}

/// What a sweep conditions on: the words after BOS and a reference context.
pub struct SweepQuery<'a> {
    pub prefix: &'a [String],
    pub target: &'a str,
    pub field: ContextField,
    pub values: &'a [usize],
    pub reference: &'a crate::context::ContextRecord,
}

fn next_word_prob<T: Scalar>(
    model: &Model<T>,
    words: &[usize],
    context: Option<ContextInput>,
    target: usize,
) -> Result<f64, ModelError> {
    let item = Encoded {
        words: words.to_vec(),
        context,
    };
    let dists = model.distributions(&item)?;
    Ok(dists[model.config.prefix_len() + words.len()][target])
}

/// `P(target | BOS prefix, context with field = v)` for each `v`.
pub fn probability_sweep<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    context_vocab: &ContextVocab,
    query: &SweepQuery<'_>,
    baseline: Option<&Model<T>>,
) -> Result<SweepCurve, EvalError> {
    let target = vocab.get(query.target).ok_or_else(|| {
        EvalError::Unsupported(format!(
            "target {:?} is not in the vocabulary",
            query.target
        ))
    })?;
    let words: Vec<usize> = query.prefix.iter().map(|w| vocab.id(w)).collect();
    let utt = Utterance {
        tokens: query.prefix.to_vec(),
        context: query.reference.clone(),
    };
    let base_input = encode(&model.config, vocab, context_vocab, &utt)?.context;
    let kind = model.config.set_kind();
    let mut points = Vec::with_capacity(query.values.len());
    for &v in query.values {
        let ctx = match &base_input {
            Some(input) => Some(override_context(
                input,
                kind,
                query.field,
                v,
                context_vocab,
            )?),
            None => {
                if let Some(card) = query.field.cardinality() {
                    if v >= card {
                        return Err(EvalError::Unsupported(format!(
                            "value {v} out of range for {:?}",
                            query.field
                        )));
                    }
                }
                None
            }
        };
        points.push((v, next_word_prob(model, &words, ctx, target)?));
    }
    let baseline = match baseline {
        Some(b) if b.config.uses_context() => {
            return Err(EvalError::Unsupported(
                "the sweep baseline must be context-free".into(),
            ));
        }
        Some(b) => Some(next_word_prob(b, &words, None, target)?),
        None => None,
    };
    Ok(SweepCurve {
        field: query.field,
        target: query.target.to_string(),
        points,
        baseline,
    })
}

/// Labelled attention trace of one utterance, with the consumed tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceExport {
    pub tokens: Vec<String>,
    pub trace: AttentionTrace,
}

impl TraceExport {
    /// `token,member,weight` rows, one group per consumed token.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,token,member,weight\n");
        for (t, (tok, alpha)) in self.tokens.iter().zip(&self.trace.steps).enumerate() {
            for (label, w) in self.trace.labels.iter().zip(alpha) {
                let _ = writeln!(s, "{t},{tok},{label},{w}");
            }
        }
        s
    }
}

pub fn attention_trace<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    context_vocab: &ContextVocab,
    utterance: &Utterance,
) -> Result<TraceExport, EvalError> {
    if model.config.architecture == Architecture::Prepend
        || model.config.attention == crate::models::Attention::None
    {
        return Err(ModelError::NoAttention.into());
    }
    let item = encode(&model.config, vocab, context_vocab, utterance)?;
    let trace = model.attention_trace(&item)?;
    let tokens = std::iter::once(crate::corpus::BOS.to_string())
        .chain(utterance.tokens.iter().cloned())
        .collect();
    Ok(TraceExport { tokens, trace })
}
