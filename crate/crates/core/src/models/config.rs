use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::context::{ContextRepr, ContextSetKind, ContextSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Default,
    Prepend,
    Concat,
    Factor,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Default,
        Architecture::Prepend,
        Architecture::Concat,
        Architecture::Factor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Default => "default",
            Architecture::Prepend => "prepend",
            Architecture::Concat => "concat",
            Architecture::Factor => "factor",
        }
    }

    /// Concat and factor models read context vectors; prepend reads context tokens.
    pub fn is_adapted(self) -> bool {
        matches!(self, Architecture::Concat | Architecture::Factor)
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                format!("unknown architecture {s:?} (expected default, prepend, concat or factor)")
            })
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    None,
    /// Query is the embedding of the token consumed at step t.
    WordQuery,
    /// Query is the previous hidden state.
    HiddenQuery,
}

impl Attention {
    pub const ALL: [Attention; 3] = [
        Attention::None,
        Attention::WordQuery,
        Attention::HiddenQuery,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attention::None => "none",
            Attention::WordQuery => "word_query",
            Attention::HiddenQuery => "hidden_query",
        }
    }
}

impl FromStr for Attention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Attention::None),
            "word" | "word_query" => Ok(Attention::WordQuery),
            "hidden" | "hidden_query" => Ok(Attention::HiddenQuery),
            _ => Err(format!(
                "unknown attention {s:?} (expected none, word or hidden)"
            )),
        }
    }
}

impl fmt::Display for Attention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_source() -> ContextSource {
    ContextSource::Datetime
}

fn default_true() -> bool {
    true
}

/// Architecture selector and dimensions.
///
/// `context_dim` is the length of the concatenated context vector `m`
/// (four `context_dim / 4` embeddings for learned datetime tokens, the
/// 8-dim feature vector otherwise). Under attention the model consumes a
/// single member-sized vector `m′_t`, so `W_m`, the factor bases and `W_a`
/// are sized by the member width instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_dim: usize,
    pub factor_rank: usize,
    pub architecture: Architecture,
    pub attention: Attention,
    pub context_repr: ContextRepr,
    #[serde(default = "default_source")]
    pub context_source: ContextSource,
    /// Add the all-zero member to feature sets under attention.
    #[serde(default = "default_true")]
    pub zero_gate: bool,
    /// Rows of the context-token table (see `ContextVocab::len`).
    pub context_vocab_size: usize,
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        context_vocab_size: usize,
        architecture: Architecture,
        attention: Attention,
        context_repr: ContextRepr,
    ) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            context_dim: if context_repr == ContextRepr::Feature {
                8
            } else {
                32
            },
            factor_rank: 5,
            architecture,
            attention,
            context_repr,
            context_source: ContextSource::Datetime,
            zero_gate: true,
            context_vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("context_dim", self.context_dim),
            ("factor_rank", self.factor_rank),
            ("context_vocab_size", self.context_vocab_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.vocab_size <= crate::corpus::UNK_ID {
            return bad("vocab_size must cover the reserved tokens".into());
        }
        if self.attention != Attention::None && !self.architecture.is_adapted() {
            return bad(format!(
                "attention requires the concat or factor architecture, not {}",
                self.architecture
            ));
        }
        if self.architecture.is_adapted() {
            match (self.context_source, self.context_repr) {
                (ContextSource::Datetime, ContextRepr::Learned) if !self.context_dim.is_multiple_of(4) => {
                    return bad(format!(
                        "learned datetime context needs context_dim divisible by 4, got {}",
                        self.context_dim
                    ));
                }
                (ContextSource::Datetime, ContextRepr::Feature) if self.context_dim != 8 => {
                    return bad(format!(
                        "feature datetime context is 8-dimensional, got context_dim {}",
                        self.context_dim
                    ));
                }
                (ContextSource::Geo | ContextSource::Prompt, ContextRepr::Feature) => {
                    return bad("feature vectors exist only for datetime context".into());
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Shape of `M` this model builds per utterance; prepend models read
    /// the same ids a learned set would.
    pub fn set_kind(&self) -> ContextSetKind {
        match self.architecture {
            Architecture::Prepend => {
                ContextSetKind::select(self.context_source, ContextRepr::Learned, false)
            }
            _ => ContextSetKind::select(
                self.context_source,
                self.context_repr,
                self.zero_gate && self.attention != Attention::None,
            ),
        }
    }

    pub fn uses_context(&self) -> bool {
        self.architecture != Architecture::Default
    }

    pub fn members(&self) -> usize {
        self.set_kind().member_count()
    }

    /// Width `f_i` of one member of `M`.
    pub fn member_dim(&self) -> usize {
        match self.set_kind() {
            ContextSetKind::LearnedTokens => self.context_dim / 4,
            ContextSetKind::FeatureVector | ContextSetKind::FeatureVectorGated => 8,
            ContextSetKind::Geo | ContextSetKind::Prompt => self.context_dim,
        }
    }

    /// Length of the vector the cell is adapted with: `m` or `m′_t`.
    pub fn adapt_dim(&self) -> usize {
        if self.attention == Attention::None {
            self.members() * self.member_dim()
        } else {
            self.member_dim()
        }
    }

    pub fn query_dim(&self) -> usize {
        match self.attention {
            Attention::HiddenQuery => self.hidden_dim,
            _ => self.embed_dim,
        }
    }

    /// Rows of the input embedding table (words, then context tokens for prepend).
    pub fn input_vocab(&self) -> usize {
        match self.architecture {
            Architecture::Prepend => self.vocab_size + self.context_vocab_size,
            _ => self.vocab_size,
        }
    }

    /// Context tokens placed between BOS and the words by the prepend model.
    pub fn prefix_len(&self) -> usize {
        match self.architecture {
            Architecture::Prepend => self.members(),
            _ => 0,
        }
    }

    pub fn label(&self) -> String {
        let mut s = self.architecture.to_string();
        if self.attention != Attention::None {
            s.push('+');
            s.push_str(self.attention.as_str());
        }
        if self.architecture.is_adapted() {
            s.push_str(match self.context_repr {
                ContextRepr::Learned => "/learned",
                ContextRepr::Feature => "/feature",
            });
        }
        s
    }
}
