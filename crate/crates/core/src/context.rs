//! Utterance-level context: parsing, token vocabularies, cyclic datetime
//! features, context sets and the shuffled-context transform.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContextError {
    #[error("malformed timestamp {0:?}: expected YYYY-MM-DD HH:MM")]
    MalformedTimestamp(String),
    #[error("invalid calendar date in {0:?}")]
    InvalidDate(String),
    #[error("invalid time of day in {0:?}")]
    InvalidTime(String),
    #[error("unknown dialogue prompt {0:?}")]
    UnknownPrompt(String),
    #[error("geo-hash {0:?} must be exactly two characters")]
    InvalidGeoHash(String),
    #[error("record has no {0} context")]
    MissingContext(&'static str),
    #[error("context table has {rows} rows but the vocabulary has {expected}")]
    TableSize { rows: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialoguePrompt {
    Initial,
    FollowUp,
}

impl DialoguePrompt {
    pub fn as_str(self) -> &'static str {
        match self {
            DialoguePrompt::Initial => "initial",
            DialoguePrompt::FollowUp => "follow_up",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for DialoguePrompt {
    type Err = ContextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "initial" => Ok(DialoguePrompt::Initial),
            "follow_up" => Ok(DialoguePrompt::FollowUp),
            other => Err(ContextError::UnknownPrompt(other.to_string())),
        }
    }
}

/// Optional non-datetime fields attached to a record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextExtras {
    pub geo_hash: Option<String>,
    pub prompt: Option<DialoguePrompt>,
}

/// Local-time context of one utterance. Week and weekday are derived from
/// the calendar date (ISO-8601 week numbering, Monday = 0).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ContextRecord {
    year: i32,
    month: u32,
    day: u32,
    hour: u32,
    minute: u32,
    iso_week: u32,
    weekday: u32,
    geo_hash: Option<String>,
    prompt: Option<DialoguePrompt>,
}

fn digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Parses `YYYY-MM-DD HH:MM` plus extras into a calendar-valid record.
pub fn parse_context(
    timestamp: &str,
    extras: ContextExtras,
) -> Result<ContextRecord, ContextError> {
    let malformed = || ContextError::MalformedTimestamp(timestamp.to_string());
    let b = timestamp.as_bytes();
    if b.len() != 16 || b[4] != b'-' || b[7] != b'-' || b[10] != b' ' || b[13] != b':' {
        return Err(malformed());
    }
    let fields = [
        &timestamp[0..4],
        &timestamp[5..7],
        &timestamp[8..10],
        &timestamp[11..13],
        &timestamp[14..16],
    ];
    if !fields.iter().all(|f| digits(f)) {
        return Err(malformed());
    }
    let year: i32 = fields[0].parse().map_err(|_| malformed())?;
    let num = |s: &str| s.parse::<u32>().map_err(|_| malformed());
    let (month, day, hour, minute) = (
        num(fields[1])?,
        num(fields[2])?,
        num(fields[3])?,
        num(fields[4])?,
    );
    ContextRecord::new(year, month, day, hour, minute, extras).map_err(|e| match e {
        ContextError::InvalidDate(_) => ContextError::InvalidDate(timestamp.to_string()),
        ContextError::InvalidTime(_) => ContextError::InvalidTime(timestamp.to_string()),
        other => other,
    })
}

impl ContextRecord {
    pub fn new(
        year: i32,
        month: u32,
        day: u32,
        hour: u32,
        minute: u32,
        extras: ContextExtras,
    ) -> Result<Self, ContextError> {
        let date = NaiveDate::from_ymd_opt(year, month, day)
            .ok_or_else(|| ContextError::InvalidDate(format!("{year:04}-{month:02}-{day:02}")))?;
        if hour > 23 || minute > 59 {
            return Err(ContextError::InvalidTime(format!("{hour:02}:{minute:02}")));
        }
        if let Some(g) = &extras.geo_hash {
            if g.chars().count() != 2 || g.contains(char::is_whitespace) {
                return Err(ContextError::InvalidGeoHash(g.clone()));
            }
        }
        Ok(ContextRecord {
            year,
            month,
            day,
            hour,
            minute,
            iso_week: date.iso_week().week(),
            weekday: date.weekday().num_days_from_monday(),
            geo_hash: extras.geo_hash,
            prompt: extras.prompt,
        })
    }

    pub fn year(&self) -> i32 {
        self.year
    }
    pub fn month(&self) -> u32 {
        self.month
    }
    pub fn day(&self) -> u32 {
        self.day
    }
    pub fn hour(&self) -> u32 {
        self.hour
    }
    pub fn minute(&self) -> u32 {
        self.minute
    }
    /// ISO-8601 week, 1–53.
    pub fn iso_week(&self) -> u32 {
        self.iso_week
    }
    /// 0 = Monday … 6 = Sunday.
    pub fn weekday(&self) -> u32 {
        self.weekday
    }
    pub fn geo_hash(&self) -> Option<&str> {
        self.geo_hash.as_deref()
    }
    pub fn prompt(&self) -> Option<DialoguePrompt> {
        self.prompt
    }

    pub fn timestamp(&self) -> String {
        format!(
            "{:04}-{:02}-{:02} {:02}:{:02}",
            self.year, self.month, self.day, self.hour, self.minute
        )
    }

    pub fn extras(&self) -> ContextExtras {
        ContextExtras {
            geo_hash: self.geo_hash.clone(),
            prompt: self.prompt,
        }
    }

    /// Same date and extras at a different hour.
    pub fn with_hour(&self, hour: u32) -> Result<Self, ContextError> {
        Self::new(
            self.year,
            self.month,
            self.day,
            hour,
            self.minute,
            self.extras(),
        )
    }

    /// Value of a closed-domain field as a 0-based index.
    pub fn field_index(&self, field: ContextField) -> Option<usize> {
        Some(match field {
            ContextField::Hour => self.hour as usize,
            ContextField::Weekday => self.weekday as usize,
            ContextField::Week => self.iso_week as usize - 1,
            ContextField::Month => self.month as usize - 1,
            ContextField::Prompt => self.prompt?.index(),
            ContextField::Geo => return None,
        })
    }
}

impl fmt::Display for ContextRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.timestamp())
    }
}

/// Context fields a sweep or a generator table can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextField {
    Hour,
    Weekday,
    Week,
    Month,
    Geo,
    Prompt,
}

impl ContextField {
    /// Domain size for closed fields.
    pub fn cardinality(self) -> Option<usize> {
        match self {
            ContextField::Hour => Some(24),
            ContextField::Weekday => Some(7),
            ContextField::Week => Some(53),
            ContextField::Month => Some(12),
            ContextField::Prompt => Some(2),
            ContextField::Geo => None,
        }
    }
}

impl std::str::FromStr for ContextField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hour" => Ok(ContextField::Hour),
            "weekday" => Ok(ContextField::Weekday),
            "week" => Ok(ContextField::Week),
            "month" => Ok(ContextField::Month),
            "geo" => Ok(ContextField::Geo),
            "prompt" => Ok(ContextField::Prompt),
            other => Err(format!("unknown context field {other:?}")),
        }
    }
}

const WEEKDAY_NAMES: [&str; 7] = [
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
];

pub const MONTH_BASE: usize = 0;
pub const WEEK_BASE: usize = MONTH_BASE + 12;
pub const WEEKDAY_BASE: usize = WEEK_BASE + 53;
pub const HOUR_BASE: usize = WEEKDAY_BASE + 7;
pub const PROMPT_BASE: usize = HOUR_BASE + 24;
pub const GEO_BASE: usize = PROMPT_BASE + 2;
/// Number of datetime tokens (month, week, weekday, hour), which occupy ids `0..DATETIME_TOKENS`.
pub const DATETIME_TOKENS: usize = PROMPT_BASE;
pub const UNKNOWN_GEO: &str = "<unk>";

fn hour_name(hour: usize) -> String {
    let h12 = if hour.is_multiple_of(12) { 12 } else { hour % 12 };
    format!("{h12}{}", if hour < 12 { "am" } else { "pm" })
}

/// Dense id space over every context token.
///
/// Datetime and prompt ids are fixed; geo-hash ids follow, starting with a
/// reserved unknown-geo id, in the order the geo-hashes were first seen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextVocab {
    geo_hashes: Vec<String>,
    #[serde(skip)]
    geo_index: HashMap<String, usize>,
}

impl Default for ContextVocab {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl ContextVocab {
    pub fn new(geo_hashes: Vec<String>) -> Self {
        let mut vocab = ContextVocab {
            geo_hashes: Vec::new(),
            geo_index: HashMap::new(),
        };
        for g in geo_hashes {
            vocab.insert_geo(g);
        }
        vocab
    }

    fn insert_geo(&mut self, g: String) {
        if !self.geo_index.contains_key(&g) {
            self.geo_index.insert(g.clone(), self.geo_hashes.len());
            self.geo_hashes.push(g);
        }
    }

    /// Collects geo-hashes seen in `records`.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ContextRecord>) -> Self {
        let mut vocab = Self::default();
        for r in records {
            if let Some(g) = r.geo_hash() {
                vocab.insert_geo(g.to_string());
            }
        }
        vocab
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindexed(self) -> Self {
        Self::new(self.geo_hashes)
    }

    pub fn geo_hashes(&self) -> &[String] {
        &self.geo_hashes
    }

    pub fn len(&self) -> usize {
        GEO_BASE + 1 + self.geo_hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn month_id(month: u32) -> usize {
        MONTH_BASE + month as usize - 1
    }

    pub fn week_id(iso_week: u32) -> usize {
        WEEK_BASE + iso_week as usize - 1
    }

    pub fn weekday_id(weekday: u32) -> usize {
        WEEKDAY_BASE + weekday as usize
    }

    pub fn hour_id(hour: u32) -> usize {
        HOUR_BASE + hour as usize
    }

    pub fn prompt_id(prompt: DialoguePrompt) -> usize {
        PROMPT_BASE + prompt.index()
    }

    /// Geo-hash id; hashes not seen at build time map to the reserved unknown id.
    pub fn geo_id(&self, geo: &str) -> usize {
        GEO_BASE + self.geo_index.get(geo).map_or(0, |i| i + 1)
    }

    pub fn unknown_geo_id(&self) -> usize {
        GEO_BASE
    }

    /// Ids of (month, week, weekday, hour) tokens.
    pub fn datetime_tokens(&self, rec: &ContextRecord) -> [usize; 4] {
        [
            Self::month_id(rec.month),
            Self::week_id(rec.iso_week),
            Self::weekday_id(rec.weekday),
            Self::hour_id(rec.hour),
        ]
    }

    pub fn token_name(&self, id: usize) -> Option<String> {
        Some(match id {
            i if i < WEEK_BASE => format!("month-{}", i - MONTH_BASE + 1),
            i if i < WEEKDAY_BASE => format!("week-{}", i - WEEK_BASE + 1),
            i if i < HOUR_BASE => WEEKDAY_NAMES[i - WEEKDAY_BASE].to_string(),
            i if i < PROMPT_BASE => hour_name(i - HOUR_BASE),
            i if i < GEO_BASE => format!(
                "prompt-{}",
                [DialoguePrompt::Initial, DialoguePrompt::FollowUp][i - PROMPT_BASE].as_str()
            ),
            GEO_BASE => format!("geo-{UNKNOWN_GEO}"),
            i => format!("geo-{}", self.geo_hashes.get(i - GEO_BASE - 1)?),
        })
    }

    pub fn token_id(&self, name: &str) -> Option<usize> {
        (0..self.len()).find(|&id| self.token_name(id).as_deref() == Some(name))
    }
}

/// `[sin, cos]` pairs for hour/24, weekday/7, week/53 and month/12, using
/// 0-based indices so that each period wraps exactly.
pub fn datetime_features<T: Scalar>(rec: &ContextRecord) -> [T; 8] {
    cyclic_features(rec.hour, rec.weekday, rec.iso_week, rec.month)
}

/// The feature vector from raw field values: hour 0–23, weekday 0–6 (Monday
/// first), ISO week 1–53 and month 1–12.
pub fn cyclic_features<T: Scalar>(hour: u32, weekday: u32, iso_week: u32, month: u32) -> [T; 8] {
    let pairs = [
        (hour as f64, 24.0),
        (weekday as f64, 7.0),
        ((iso_week - 1) as f64, 53.0),
        ((month - 1) as f64, 12.0),
    ];
    let mut out = [T::zero(); 8];
    for (i, (value, period)) in pairs.into_iter().enumerate() {
        let angle = 2.0 * PI * value / period;
        out[2 * i] = T::lit(angle.sin());
        out[2 * i + 1] = T::lit(angle.cos());
    }
    out
}

/// Which non-linguistic signal a model conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    Datetime,
    Geo,
    Prompt,
}

/// How datetime context is turned into vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextRepr {
    Learned,
    Feature,
}

impl std::str::FromStr for ContextSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "datetime" => Ok(ContextSource::Datetime),
            "geo" => Ok(ContextSource::Geo),
            "prompt" => Ok(ContextSource::Prompt),
            other => Err(format!(
                "unknown context source {other:?} (expected datetime, geo or prompt)"
            )),
        }
    }
}

impl std::str::FromStr for ContextRepr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learned" => Ok(ContextRepr::Learned),
            "feature" => Ok(ContextRepr::Feature),
            other => Err(format!(
                "unknown context representation {other:?} (expected learned or feature)"
            )),
        }
    }
}

/// Shape of the set `M` of context vectors fed to a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSetKind {
    /// Month, week, weekday and hour embeddings.
    LearnedTokens,
    /// The 8-dim cyclic feature vector.
    FeatureVector,
    /// The feature vector plus an all-zero member the attention can select.
    FeatureVectorGated,
    Geo,
    Prompt,
}

impl ContextSetKind {
    pub fn select(source: ContextSource, repr: ContextRepr, gated: bool) -> Self {
        match (source, repr) {
            (ContextSource::Datetime, ContextRepr::Learned) => ContextSetKind::LearnedTokens,
            (ContextSource::Datetime, ContextRepr::Feature) if gated => {
                ContextSetKind::FeatureVectorGated
            }
            (ContextSource::Datetime, ContextRepr::Feature) => ContextSetKind::FeatureVector,
            (ContextSource::Geo, _) => ContextSetKind::Geo,
            (ContextSource::Prompt, _) => ContextSetKind::Prompt,
        }
    }

    pub fn member_count(self) -> usize {
        match self {
            ContextSetKind::LearnedTokens => 4,
            ContextSetKind::FeatureVectorGated => 2,
            _ => 1,
        }
    }

    pub fn is_learned(self) -> bool {
        !matches!(
            self,
            ContextSetKind::FeatureVector | ContextSetKind::FeatureVectorGated
        )
    }

    pub fn member_labels(self) -> &'static [&'static str] {
        match self {
            ContextSetKind::LearnedTokens => &["month", "week", "weekday", "hour"],
            ContextSetKind::FeatureVector => &["datetime"],
            ContextSetKind::FeatureVectorGated => &["datetime", "zero"],
            ContextSetKind::Geo => &["geo"],
            ContextSetKind::Prompt => &["prompt"],
        }
    }
}

/// Raw per-utterance context input: token ids for learned sets, or the
/// stacked member vectors for feature sets.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextInput {
    Tokens(Vec<usize>),
    Features(Vec<f64>),
}

pub fn context_input(
    kind: ContextSetKind,
    rec: &ContextRecord,
    vocab: &ContextVocab,
) -> Result<ContextInput, ContextError> {
    Ok(match kind {
        ContextSetKind::LearnedTokens => ContextInput::Tokens(vocab.datetime_tokens(rec).to_vec()),
        ContextSetKind::FeatureVector => {
            ContextInput::Features(datetime_features::<f64>(rec).to_vec())
        }
        ContextSetKind::FeatureVectorGated => {
            let mut v = datetime_features::<f64>(rec).to_vec();
            v.extend([0.0; 8]);
            ContextInput::Features(v)
        }
        ContextSetKind::Geo => {
            let g = rec
                .geo_hash()
                .ok_or(ContextError::MissingContext("geo-hash"))?;
            ContextInput::Tokens(vec![vocab.geo_id(g)])
        }
        ContextSetKind::Prompt => {
            let p = rec
                .prompt()
                .ok_or(ContextError::MissingContext("dialogue prompt"))?;
            ContextInput::Tokens(vec![ContextVocab::prompt_id(p)])
        }
    })
}

/// The set `M` of context vectors for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet<T> {
    pub kind: ContextSetKind,
    pub members: Vec<Vec<T>>,
}

impl<T: Scalar> ContextSet<T> {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `m = [m_1; …; m_k]`.
    pub fn concatenated(&self) -> Vec<T> {
        self.members.concat()
    }
}

/// Builds `M` for `rec`. Learned kinds read rows of `table`
/// (`vocab.len()` rows, one member-width column block per row).
pub fn embed_context<T: Scalar>(
    kind: ContextSetKind,
    rec: &ContextRecord,
    vocab: &ContextVocab,
    table: Option<&Tensor<T>>,
) -> Result<ContextSet<T>, ContextError> {
    let members = match context_input(kind, rec, vocab)? {
        ContextInput::Tokens(ids) => {
            let table = table.ok_or(ContextError::TableSize {
                rows: 0,
                expected: vocab.len(),
            })?;
            let (rows, _) = table.dims2();
            if rows != vocab.len() {
                return Err(ContextError::TableSize {
                    rows,
                    expected: vocab.len(),
                });
            }
            ids.iter().map(|&id| table.row(id).to_vec()).collect()
        }
        ContextInput::Features(v) => v
            .chunks(8)
            .map(|c| c.iter().map(|&x| T::lit(x)).collect())
            .collect(),
    };
    Ok(ContextSet { kind, members })
}

/// Reassigns context records to utterances by a seeded uniform permutation.
/// Texts and the multiset of records are untouched.
pub fn shuffle_contexts(corpus: &[Utterance], seed: u64) -> Vec<Utterance> {
    let mut records: Vec<ContextRecord> = corpus.iter().map(|u| u.context.clone()).collect();
    records.shuffle(&mut rng::sub_rng(seed, rng::stream::SHUFFLE_ABLATION));
    corpus
        .iter()
        .zip(records)
        .map(|(u, context)| Utterance {
            tokens: u.tokens.clone(),
            context,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ts: &str) -> ContextRecord {
        parse_context(ts, ContextExtras::default()).unwrap()
    }

    #[test]
    fn parses_reference_example() {
        let r = rec("2020-12-23 07:00");
        assert_eq!(
            (r.month(), r.iso_week(), r.weekday(), r.hour()),
            (12, 52, 2, 7)
        );
        let v = ContextVocab::default();
        let names: Vec<String> = v
            .datetime_tokens(&r)
            .iter()
            .map(|&id| v.token_name(id).unwrap())
            .collect();
        assert_eq!(names, ["month-12", "week-52", "wednesday", "7am"]);
    }

    #[test]
    fn iso_week_matches_known_calendar_table() {
        // (date, iso week, weekday with Monday = 0), from published ISO week tables
        let table = [
            ("2021-01-01 00:00", 53, 4),
            ("2021-01-04 00:00", 1, 0),
            ("2020-01-01 12:00", 1, 2),
            ("2018-12-31 08:00", 1, 0),
            ("2016-01-03 23:59", 53, 6),
            ("2015-12-31 00:00", 53, 3),
            ("2024-12-30 06:30", 1, 0),
            ("2020-02-29 10:00", 9, 5),
        ];
        for (ts, week, weekday) in table {
            let r = rec(ts);
            assert_eq!((r.iso_week(), r.weekday()), (week, weekday), "{ts}");
        }
        assert_eq!(rec("2021-01-01 00:00").hour(), 0);
    }

    #[test]
    fn rejects_bad_timestamps() {
        let none = ContextExtras::default;
        assert!(matches!(
            parse_context("2020-02-30 10:00", none()),
            Err(ContextError::InvalidDate(_))
        ));
        assert!(matches!(
            parse_context("2021-02-29 10:00", none()),
            Err(ContextError::InvalidDate(_))
        ));
        assert!(matches!(
            parse_context("2020-12-23 24:00", none()),
            Err(ContextError::InvalidTime(_))
        ));
        assert!(matches!(
            parse_context("2020-12-23 07:60", none()),
            Err(ContextError::InvalidTime(_))
        ));
        for bad in [
            "2020-12-23T07:00",
            "2020-12-23 7:00",
            "20-12-23 07:00",
            "2020-1a-23 07:00",
            "",
        ] {
            assert!(
                matches!(
                    parse_context(bad, none()),
                    Err(ContextError::MalformedTimestamp(_))
                ),
                "{bad}"
            );
        }
        let geo = ContextExtras {
            geo_hash: Some("9q5".into()),
            prompt: None,
        };
        assert!(matches!(
            parse_context("2020-12-23 07:00", geo),
            Err(ContextError::InvalidGeoHash(_))
        ));
    }

    #[test]
    fn timestamp_reserialization_is_stable() {
        for ts in ["2020-12-23 07:00", "1999-01-09 23:05", "2024-02-29 00:59"] {
            let r = rec(ts);
            assert_eq!(r.timestamp(), ts);
            assert_eq!(rec(&r.timestamp()), r);
        }
    }

    #[test]
    fn datetime_tokens_are_injective_per_field() {
        let v = ContextVocab::default();
        let months: std::collections::HashSet<usize> = (1..=12)
            .map(|m| v.datetime_tokens(&rec(&format!("2021-{m:02}-10 10:00")))[0])
            .collect();
        assert_eq!(months.len(), 12);
        let hours: std::collections::HashSet<String> = (0..24)
            .map(|h| v.token_name(ContextVocab::hour_id(h)).unwrap())
            .collect();
        assert_eq!(hours.len(), 24);
        assert_eq!(v.token_name(ContextVocab::hour_id(0)).unwrap(), "12am");
        assert_eq!(v.token_name(ContextVocab::hour_id(12)).unwrap(), "12pm");
        assert_eq!(v.token_name(ContextVocab::hour_id(23)).unwrap(), "11pm");
        let a = rec("2020-12-23 07:00");
        let b = rec("2020-12-23 07:45");
        assert_eq!(v.datetime_tokens(&a), v.datetime_tokens(&b));
        for id in 0..v.len() {
            assert_eq!(v.token_id(&v.token_name(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn geo_ids_are_dense_and_unknowns_are_reserved() {
        let r = |g: &str| {
            parse_context(
                "2020-01-01 00:00",
                ContextExtras {
                    geo_hash: Some(g.into()),
                    prompt: None,
                },
            )
            .unwrap()
        };
        let recs = [r("9q"), r("dr"), r("9q")];
        let v = ContextVocab::from_records(&recs);
        assert_eq!(v.len(), GEO_BASE + 3);
        assert_eq!(v.geo_id("9q"), GEO_BASE + 1);
        assert_eq!(v.geo_id("dr"), GEO_BASE + 2);
        assert_eq!(v.geo_id("zz"), v.unknown_geo_id());
        let back: ContextVocab =
            serde_json::from_str::<ContextVocab>(&serde_json::to_string(&v).unwrap())
                .unwrap()
                .reindexed();
        assert_eq!(back, v);
        assert_eq!(back.geo_id("dr"), GEO_BASE + 2);
    }

    #[test]
    fn feature_reference_values() {
        let f = datetime_features::<f64>(&rec("2021-03-01 00:00"));
        assert_eq!((f[0], f[1]), (0.0, 1.0));
        let f = datetime_features::<f64>(&rec("2021-03-01 06:00"));
        assert!((f[0] - 1.0).abs() < 1e-15 && f[1].abs() < 1e-15);
        let f = datetime_features::<f64>(&rec("2021-03-01 07:00"));
        assert!((f[0] - 0.9659258262890683).abs() < 1e-12);
        assert!((f[1] + 0.25881904510252074).abs() < 1e-12);
    }

    #[test]
    fn feature_pairs_are_cyclic() {
        let pair = |h: u32| {
            let f = datetime_features::<f64>(&rec(&format!("2021-03-01 {h:02}:00")));
            (f[0], f[1])
        };
        let dist =
            |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let d_wrap = dist(pair(23), pair(0));
        let d_step = dist(pair(0), pair(1));
        assert!((d_wrap - d_step).abs() < 1e-12);
        assert!(d_wrap < dist(pair(0), pair(12)));
    }

    #[test]
    fn context_sets_have_documented_shapes() {
        let r = rec("2020-12-23 07:00");
        let v = ContextVocab::default();
        let table = Tensor::<f64>::from_vec(
            vec![v.len(), 3],
            (0..v.len() * 3).map(|i| i as f64).collect(),
        )
        .unwrap();
        let learned = embed_context(ContextSetKind::LearnedTokens, &r, &v, Some(&table)).unwrap();
        assert_eq!(learned.len(), 4);
        assert_eq!(learned.concatenated().len(), 12);
        assert_eq!(
            learned.members[0],
            table.row(ContextVocab::month_id(12)).to_vec()
        );

        let gated = embed_context::<f64>(ContextSetKind::FeatureVectorGated, &r, &v, None).unwrap();
        assert_eq!(gated.len(), 2);
        assert_eq!(gated.members[1], vec![0.0; 8]);

        let plain = embed_context::<f64>(ContextSetKind::FeatureVector, &r, &v, None).unwrap();
        assert_eq!(plain.len(), 1);
        assert_eq!(plain.members[0], datetime_features::<f64>(&r).to_vec());

        assert!(matches!(
            embed_context::<f64>(ContextSetKind::Geo, &r, &v, Some(&table)),
            Err(ContextError::MissingContext(_))
        ));
        let short = Tensor::<f64>::zeros(&[3, 3]);
        assert!(matches!(
            embed_context(ContextSetKind::LearnedTokens, &r, &v, Some(&short)),
            Err(ContextError::TableSize { .. })
        ));
    }

    fn corpus(n: usize) -> Vec<Utterance> {
        (0..n)
            .map(|i| Utterance {
                tokens: vec![format!("w{i}")],
                context: rec(&format!("2021-01-{:02} {:02}:00", 1 + i % 28, i % 24)),
            })
            .collect()
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let one = corpus(1);
        assert_eq!(shuffle_contexts(&one, 3), one);

        let c = corpus(50);
        let a = shuffle_contexts(&c, 11);
        assert_eq!(a, shuffle_contexts(&c, 11));
        assert_ne!(a, shuffle_contexts(&c, 12));
        assert_ne!(a, c);
        let mut before: Vec<String> = c.iter().map(|u| u.context.timestamp()).collect();
        let mut after: Vec<String> = a.iter().map(|u| u.context.timestamp()).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
        assert!(a.iter().zip(&c).all(|(x, y)| x.tokens == y.tokens));
    }
}
