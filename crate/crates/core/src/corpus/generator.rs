//! Templated corpus generator with context-conditioned slot tables.
//!
//! A config lists templates (`"play {media_adj} {holiday} {media}"`) with
//! prior weights and optional per-field multipliers, and slots whose value
//! distribution is either fixed or a table with one row per value of a
//! context field. Context is drawn first (uniform date in range, hour from
//! `hour_weights`, uniform minute and geo-hash, follow-up with
//! `follow_up_rate`), then a template, then each slot left to right.
//!
//! With `planted = false` every multiplier is ignored and every conditioned
//! slot uses the mean of its table rows, so text is independent of context.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::context::{ContextExtras, ContextField, ContextRecord, DialoguePrompt};
use crate::rng;

/// Source of the built-in corpus configuration.
pub const DEFAULT_GENERATOR_TOML: &str = include_str!("default_generator.toml");

const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> GeneratorError {
    GeneratorError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_utterances: usize,
    /// Inclusive `YYYY-MM-DD` date range.
    pub start_date: String,
    pub end_date: String,
    /// Relative frequency of each hour; uniform when absent.
    #[serde(default)]
    pub hour_weights: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub planted: bool,
    /// Attach a uniformly drawn geo-hash to every utterance when non-empty.
    #[serde(default)]
    pub geo_hashes: Vec<String>,
    /// Attach a dialogue prompt to every utterance when set.
    #[serde(default)]
    pub follow_up_rate: Option<f64>,
    pub templates: Vec<TemplateSpec>,
    pub slots: BTreeMap<String, SlotSpec>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub name: String,
    pub weight: f64,
    pub text: String,
    #[serde(default)]
    pub condition: Option<ConditionSpec>,
}

/// Multiplies a template's weight by `multipliers[value of field]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub field: ContextField,
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotSpec {
    pub values: Vec<String>,
    /// Fixed distribution over `values`; uniform when absent.
    #[serde(default)]
    pub probs: Option<Vec<f64>>,
    /// Field selecting a row of `table`.
    #[serde(default)]
    pub by: Option<ContextField>,
    #[serde(default)]
    pub table: Option<Vec<Vec<f64>>>,
}

/// One piece of a parsed template.
#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Slot(String),
}

fn parse_template(text: &str) -> Result<Vec<Piece>, GeneratorError> {
    let mut pieces = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| invalid(format!("unclosed slot in template {text:?}")))?;
        pieces.push(Piece::Slot(rest[open + 1..open + close].to_string()));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    Ok(pieces)
}

fn check_row(what: &str, row: &[f64], len: usize) -> Result<(), GeneratorError> {
    if row.len() != len {
        return Err(invalid(format!(
            "{what}: expected {len} entries, got {}",
            row.len()
        )));
    }
    if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(invalid(format!("{what}: probabilities must lie in [0, 1]")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(invalid(format!("{what}: row sums to {total}, not 1")));
    }
    Ok(())
}

fn parse_date(s: &str) -> Result<NaiveDate, GeneratorError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| invalid(format!("bad date {s:?}")))
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self, GeneratorError> {
        let config: GeneratorConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn default_planted() -> Self {
        Self::from_toml(DEFAULT_GENERATOR_TOML).expect("built-in generator config is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Same vocabulary and marginals with every context effect switched off.
    pub fn without_context_effects(mut self) -> Self {
        self.planted = false;
        self
    }

    fn field_size(&self, field: ContextField) -> usize {
        field.cardinality().unwrap_or(self.geo_hashes.len())
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let start = parse_date(&self.start_date)?;
        let end = parse_date(&self.end_date)?;
        if end < start {
            return Err(invalid("end_date precedes start_date"));
        }
        if let Some(w) = &self.hour_weights {
            if w.len() != 24
                || w.iter().any(|&x| x < 0.0 || !x.is_finite())
                || w.iter().sum::<f64>() <= 0.0
            {
                return Err(invalid(
                    "hour_weights needs 24 non-negative entries with a positive sum",
                ));
            }
        }
        if let Some(r) = self.follow_up_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(invalid("follow_up_rate must lie in [0, 1]"));
            }
        }
        for g in &self.geo_hashes {
            if g.chars().count() != 2 {
                return Err(invalid(format!("geo-hash {g:?} must be two characters")));
            }
        }
        if self.templates.is_empty() {
            return Err(invalid("no templates"));
        }
        for t in &self.templates {
            if !(t.weight > 0.0 && t.weight.is_finite()) {
                return Err(invalid(format!(
                    "template {}: weight must be positive",
                    t.name
                )));
            }
            for piece in parse_template(&t.text)? {
                if let Piece::Slot(s) = piece {
                    if !self.slots.contains_key(&s) {
                        return Err(invalid(format!("template {}: unknown slot {s:?}", t.name)));
                    }
                }
            }
            if let Some(c) = &t.condition {
                let n = self.field_size(c.field);
                if c.multipliers.len() != n
                    || c.multipliers.iter().any(|&m| m < 0.0 || !m.is_finite())
                {
                    return Err(invalid(format!(
                        "template {}: condition needs {n} non-negative multipliers",
                        t.name
                    )));
                }
            }
        }
        for (name, s) in &self.slots {
            if s.values.is_empty() {
                return Err(invalid(format!("slot {name}: no values")));
            }
            if let Some(p) = &s.probs {
                check_row(&format!("slot {name} probs"), p, s.values.len())?;
            }
            match (&s.by, &s.table) {
                (Some(field), Some(table)) => {
                    let n = self.field_size(*field);
                    if table.len() != n {
                        return Err(invalid(format!(
                            "slot {name}: table needs {n} rows, got {}",
                            table.len()
                        )));
                    }
                    for (i, row) in table.iter().enumerate() {
                        check_row(&format!("slot {name} table row {i}"), row, s.values.len())?;
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(invalid(format!(
                        "slot {name}: `by` and `table` go together"
                    )))
                }
            }
        }
        Ok(())
    }

    fn field_value(&self, rec: &ContextRecord, field: ContextField) -> Option<usize> {
        match field {
            ContextField::Geo => rec
                .geo_hash()
                .and_then(|g| self.geo_hashes.iter().position(|x| x == g)),
            f => rec.field_index(f),
        }
    }

    /// Normalized template distribution for a context.
    pub fn template_probabilities(&self, rec: &ContextRecord) -> Vec<f64> {
        let weights: Vec<f64> = self
            .templates
            .iter()
            .map(|t| {
                let m = match (&t.condition, self.planted) {
                    (Some(c), true) => self
                        .field_value(rec, c.field)
                        .map_or(1.0, |i| c.multipliers[i]),
                    _ => 1.0,
                };
                t.weight * m
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / total).collect()
    }

    /// Value distribution of a slot for a context.
    pub fn slot_probabilities(&self, slot: &str, rec: &ContextRecord) -> Option<Vec<f64>> {
        let s = self.slots.get(slot)?;
        let n = s.values.len();
        Some(match (&s.by, &s.table) {
            (Some(field), Some(table)) => {
                match self.field_value(rec, *field).filter(|_| self.planted) {
                    Some(i) => table[i].clone(),
                    None => (0..n)
                        .map(|j| table.iter().map(|r| r[j]).sum::<f64>() / table.len() as f64)
                        .collect(),
                }
            }
            _ => s.probs.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]),
        })
    }
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if r < p {
            return i;
        }
        r -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn sample_context(
    config: &GeneratorConfig,
    start: NaiveDate,
    days: i64,
    rng: &mut ChaCha8Rng,
) -> ContextRecord {
    use chrono::Datelike;
    let date = start + chrono::Duration::days(rng.random_range(0..days));
    let hour = match &config.hour_weights {
        Some(w) => sample_index(rng, w) as u32,
        None => rng.random_range(0..24),
    };
    let minute = rng.random_range(0..60);
    let geo_hash = (!config.geo_hashes.is_empty())
        .then(|| config.geo_hashes[rng.random_range(0..config.geo_hashes.len())].clone());
    let prompt = config.follow_up_rate.map(|rate| {
        if rng.random::<f64>() < rate {
            DialoguePrompt::FollowUp
        } else {
            DialoguePrompt::Initial
        }
    });
    ContextRecord::new(
        date.year(),
        date.month(),
        date.day(),
        hour,
        minute,
        ContextExtras { geo_hash, prompt },
    )
    .expect("sampled date is valid")
}

/// Draws `config.num_utterances` utterances; identical for identical `(config, seed)`.
pub fn generate_synthetic(
    config: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<Utterance>, GeneratorError> {
    config.validate()?;
    let start = parse_date(&config.start_date)?;
    let days = (parse_date(&config.end_date)? - start).num_days() + 1;
    let templates: Vec<Vec<Piece>> = config
        .templates
        .iter()
        .map(|t| parse_template(&t.text))
        .collect::<Result<_, _>>()?;
    let mut rng = rng::sub_rng(seed, rng::stream::GENERATOR);
    let mut out = Vec::with_capacity(config.num_utterances);
    while out.len() < config.num_utterances {
        let context = sample_context(config, start, days, &mut rng);
        let t = sample_index(&mut rng, &config.template_probabilities(&context));
        let mut text = String::new();
        for piece in &templates[t] {
            match piece {
                Piece::Text(s) => text.push_str(s),
                Piece::Slot(name) => {
                    let probs = config
                        .slot_probabilities(name, &context)
                        .expect("validated slot");
                    text.push_str(&config.slots[name].values[sample_index(&mut rng, &probs)]);
                }
            }
        }
        let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        if !tokens.is_empty() {
            out.push(Utterance { tokens, context });
        }
    }
    Ok(out)
}
