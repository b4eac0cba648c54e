//! LSTM language models: the context-free baseline, the prepend baseline,
//! and the concatenation- and factorization-adapted models with optional
//! attention over the context set.
//!
//! Everything runs batched on a [`Tape`]: a batch holds `B` padded
//! sequences, and every per-step quantity is a `B×·` matrix.

mod config;
mod params;

#[cfg(test)]
mod tests;

pub use config::{Architecture, Attention, ModelConfig};
pub use params::{
    param_shapes, AttentionParams, ConcatParams, FactorParams, LstmParams, OutputLayer, Parameters,
};

use crate::context::{context_input, ContextError, ContextInput, ContextVocab};
use crate::corpus::{Utterance, Vocab, BOS_ID, EOS_ID};
use crate::dd::Dd;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("{what} id {id} out of range (< {bound})")]
    TokenOutOfRange {
        what: &'static str,
        id: usize,
        bound: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("utterance has no context input but the model needs one")]
    MissingContext,
    #[error("model has no attention")]
    NoAttention,
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// An utterance mapped to ids: the words (no BOS/EOS) and the raw context input.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub words: Vec<usize>,
    pub context: Option<ContextInput>,
}

/// Maps words through `vocab` (UNK for unseen words) and builds the context
/// input the model's set kind calls for.
pub fn encode(
    config: &ModelConfig,
    vocab: &Vocab,
    context_vocab: &ContextVocab,
    utterance: &Utterance,
) -> Result<Encoded, ModelError> {
    let words = utterance.tokens.iter().map(|w| vocab.id(w)).collect();
    let context = if config.uses_context() {
        Some(context_input(
            config.set_kind(),
            &utterance.context,
            context_vocab,
        )?)
    } else {
        None
    };
    Ok(Encoded { words, context })
}

#[derive(Debug, Clone, PartialEq)]
enum BatchContext {
    Tokens(Vec<usize>),
    Features(Vec<f64>),
}

/// Padded, time-major batch. Entry `t·B + b` of `inputs`, `targets` and
/// `weights` belongs to sequence `b` at step `t`; padding and prepended
/// context positions carry weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub steps: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
    context: Option<BatchContext>,
}

impl Batch {
    pub fn new(config: &ModelConfig, items: &[&Encoded]) -> Result<Self, ModelError> {
        if items.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let size = items.len();
        let prefix = config.prefix_len();
        let steps = items
            .iter()
            .map(|it| 1 + prefix + it.words.len())
            .max()
            .unwrap_or(1);
        let mut inputs = vec![EOS_ID; steps * size];
        let mut targets = vec![0; steps * size];
        let mut weights = vec![0.0; steps * size];
        let mut ctx_tokens = Vec::new();
        let mut ctx_features = Vec::new();
        let k = config.members();

        for (b, it) in items.iter().enumerate() {
            for &w in &it.words {
                if w >= config.vocab_size {
                    return Err(ModelError::TokenOutOfRange {
                        what: "word",
                        id: w,
                        bound: config.vocab_size,
                    });
                }
            }
            let mut seq_in = vec![BOS_ID];
            let mut seq_out = Vec::new();
            if config.uses_context() {
                match it.context.as_ref().ok_or(ModelError::MissingContext)? {
                    ContextInput::Tokens(ids) => {
                        if ids.len() != k {
                            return Err(ModelError::Config(format!(
                                "expected {k} context tokens, got {}",
                                ids.len()
                            )));
                        }
                        for &id in ids {
                            if id >= config.context_vocab_size {
                                return Err(ModelError::TokenOutOfRange {
                                    what: "context token",
                                    id,
                                    bound: config.context_vocab_size,
                                });
                            }
                        }
                        if prefix > 0 {
                            seq_in.extend(ids.iter().map(|&id| config.vocab_size + id));
                            seq_out.extend(std::iter::repeat_n(None, prefix));
                        } else {
                            ctx_tokens.extend_from_slice(ids);
                        }
                    }
                    ContextInput::Features(v) => {
                        if v.len() != k * 8 || prefix > 0 {
                            return Err(ModelError::Config(format!(
                                "feature context of length {} does not fit this model",
                                v.len()
                            )));
                        }
                        ctx_features.extend_from_slice(v);
                    }
                }
            }
            seq_in.extend_from_slice(&it.words);
            seq_out.extend(it.words.iter().copied().chain([EOS_ID]).map(Some));
            for (t, (&i, o)) in seq_in.iter().zip(&seq_out).enumerate() {
                inputs[t * size + b] = i;
                if let Some(o) = o {
                    targets[t * size + b] = *o;
                    weights[t * size + b] = 1.0;
                }
            }
        }
        let context = if !config.architecture.is_adapted() {
            None
        } else if !ctx_features.is_empty() {
            Some(BatchContext::Features(ctx_features))
        } else {
            Some(BatchContext::Tokens(ctx_tokens))
        };
        Ok(Batch {
            size,
            steps,
            inputs,
            targets,
            weights,
            context,
        })
    }

    /// Predicted (weight > 0) positions.
    pub fn num_tokens(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    fn step_range(&self, t: usize) -> std::ops::Range<usize> {
        t * self.size..(t + 1) * self.size
    }
}

/// Evaluation knobs that do not change results.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Compute word-query attention for all steps before the recurrence.
    pub parallel_word_query: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            parallel_word_query: true,
        }
    }
}

/// Per-step `B×|V|` logits and, with attention, `B×|M|` alignments.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<Var>,
    pub alphas: Vec<Var>,
}

fn lstm_cell<T: Scalar>(
    tape: &mut Tape<T>,
    pre: Var,
    c_prev: Var,
    d: usize,
) -> Result<(Var, Var), TensorError> {
    let i = tape.slice_cols(pre, 0, d)?;
    let f = tape.slice_cols(pre, d, d)?;
    let g = tape.slice_cols(pre, 2 * d, d)?;
    let o = tape.slice_cols(pre, 3 * d, d)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// One batched LSTM step. With `context = Some((m, W_m))` the term `m·W_m`
/// is added to all four gate pre-activations.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: &LstmParams<Var>,
    x: Var,
    state: (Var, Var),
    context: Option<(Var, Var)>,
) -> Result<(Var, Var), TensorError> {
    let extra = match context {
        Some((m, w_m)) => Some(tape.matmul(m, w_m)?),
        None => None,
    };
    lstm_step_with(tape, p, x, state, extra, None)
}

/// Low-rank factor deltas added to `x·W_x` and `h·W_h`.
struct FactorDelta {
    a_x: Var,
    b_x: Var,
    a_h: Var,
    b_h: Var,
}

fn factor_delta<T: Scalar>(
    tape: &mut Tape<T>,
    fp: &FactorParams<Var>,
    m: Var,
) -> Result<FactorDelta, TensorError> {
    Ok(FactorDelta {
        a_x: tape.matmul(m, fp.w_l_x)?,
        b_x: tape.matmul_t(m, fp.w_r_x)?,
        a_h: tape.matmul(m, fp.w_l_h)?,
        b_h: tape.matmul_t(m, fp.w_r_h)?,
    })
}

fn low_rank<T: Scalar>(tape: &mut Tape<T>, v: Var, a: Var, b: Var) -> Result<Var, TensorError> {
    let va = tape.batched_vecmat(v, a)?;
    tape.batched_vecmat(va, b)
}

fn lstm_step_with<T: Scalar>(
    tape: &mut Tape<T>,
    p: &LstmParams<Var>,
    x: Var,
    (h, c): (Var, Var),
    extra: Option<Var>,
    factor: Option<&FactorDelta>,
) -> Result<(Var, Var), TensorError> {
    let mut px = tape.matmul(x, p.w_x)?;
    let mut ph = tape.matmul(h, p.w_h)?;
    if let Some(fd) = factor {
        let dx = low_rank(tape, x, fd.a_x, fd.b_x)?;
        px = tape.add(px, dx)?;
        let dh = low_rank(tape, h, fd.a_h, fd.b_h)?;
        ph = tape.add(ph, dh)?;
    }
    let mut pre = tape.add(px, ph)?;
    if let Some(e) = extra {
        pre = tape.add(pre, e)?;
    }
    let pre = tape.add_row(pre, p.b)?;
    let d = tape.value(h).dims2().1;
    lstm_cell(tape, pre, c, d)
}

/// `(m′, α)` for one batch step: `α = softmax_i(m_iᵀ W_a q)`, `m′ = Σ α_i m_i`.
fn attend_vars<T: Scalar>(
    tape: &mut Tape<T>,
    members: Var,
    projected: Var,
    k: usize,
) -> Result<(Var, Var), TensorError> {
    let scores = tape.attn_scores(members, projected, k)?;
    let alpha = tape.softmax(scores)?;
    let mixed = tape.attn_mix(alpha, members, k)?;
    Ok((mixed, alpha))
}

/// Attention of a single query over explicit members.
pub fn attend<T: Scalar>(
    w_a: &Tensor<T>,
    members: &[Vec<T>],
    query: &[T],
) -> Result<(Vec<T>, Vec<T>), ModelError> {
    let k = members.len();
    if k == 0 {
        return Err(TensorError::Empty { op: "attend" }.into());
    }
    let mut tape = Tape::new();
    let flat = Tensor::from_vec(
        vec![1, members.iter().map(Vec::len).sum()],
        members.concat(),
    )?;
    let m = tape.constant(flat);
    let q = tape.constant(Tensor::from_vec(vec![1, query.len()], query.to_vec())?);
    let w = tape.constant(w_a.clone());
    let projected = tape.matmul_t(q, w)?;
    let (mixed, alpha) = attend_vars(&mut tape, m, projected, k)?;
    Ok((
        tape.value(mixed).data().to_vec(),
        tape.value(alpha).data().to_vec(),
    ))
}

/// Adapted weights `W′_x = W_x + A_x(m)·B_x(m)` and `W′_h` likewise, where
/// `A(m) = Σ_k m_k W_L[k]` and `B(m) = Σ_k m_k W_R[·,·,k]`.
pub fn factor_adapt<T: Scalar>(
    fp: &FactorParams<Tensor<T>>,
    base: &LstmParams<Tensor<T>>,
    m: &[T],
) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
    let adapt =
        |w: &Tensor<T>, left: &Tensor<T>, right: &Tensor<T>| -> Result<Tensor<T>, ModelError> {
            let (&[f, rows, r], &[r2, cols, f2]) = (left.shape(), right.shape()) else {
                return Err(ModelError::Config(
                    "factor bases must be 3-way tensors".into(),
                ));
            };
            if f != m.len() || f2 != f || r2 != r || w.shape() != [rows, cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "factor_adapt",
                    left: left.shape().to_vec(),
                    right: right.shape().to_vec(),
                }
                .into());
            }
            let mut a = vec![T::zero(); rows * r];
            for (k, &mk) in m.iter().enumerate() {
                for (dst, &l) in a
                    .iter_mut()
                    .zip(&left.data()[k * rows * r..(k + 1) * rows * r])
                {
                    *dst += mk * l;
                }
            }
            let mut b = vec![T::zero(); r * cols];
            for (j, dst) in b.iter_mut().enumerate() {
                *dst = m
                    .iter()
                    .enumerate()
                    .map(|(k, &mk)| mk * right.data()[j * f + k])
                    .sum();
            }
            let mut out = w.data().to_vec();
            T::gemm(
                rows,
                r,
                cols,
                &a,
                (r as isize, 1),
                &b,
                (cols as isize, 1),
                T::one(),
                &mut out,
                (cols as isize, 1),
            );
            Ok(Tensor::from_vec(vec![rows, cols], out)?)
        };
    Ok((
        adapt(&base.w_x, &fp.w_l_x, &fp.w_r_x)?,
        adapt(&base.w_h, &fp.w_l_h, &fp.w_r_h)?,
    ))
}

/// Log-probability of each predicted token of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceScore {
    pub total: f64,
    pub per_token: Vec<f64>,
    /// `−total` in double-double precision, for perplexity.
    pub nll: Dd,
}

/// Per-step alignments over the labelled members of `M`, one row per
/// consumed input (BOS first).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub labels: Vec<String>,
    pub steps: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Parameters<Tensor<T>>,
}

/// `log softmax(row)[target]`, evaluated in `f64` and kept in double-double.
fn row_log_softmax_at<T: Scalar>(row: &[T], target: usize) -> Dd {
    let max = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
    Dd::from(row[target].as_f64() - max) - Dd::ln(sum)
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: Parameters<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = param_shapes(&config);
        let expected = shapes.entries();
        let found = params.entries();
        if expected.len() != found.len() {
            return Err(ModelError::Config(
                "parameter set does not match the architecture".into(),
            ));
        }
        for ((name, want), (_, have)) in expected.into_iter().zip(found) {
            if want.as_slice() != have.shape() {
                return Err(ModelError::ParamShape {
                    name: name.to_string(),
                    expected: want.clone(),
                    found: have.shape().to_vec(),
                });
            }
        }
        Ok(Model { config, params })
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Parameters<Var> {
        let vars: Vec<Var> = self
            .params
            .tape_tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        self.params.with_items(vars).expect("one var per parameter")
    }

    pub fn batch(&self, items: &[&Encoded]) -> Result<Batch, ModelError> {
        Batch::new(&self.config, items)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        pv: &Parameters<Var>,
        batch: &Batch,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        let (bsz, d, k) = (batch.size, cfg.hidden_dim, cfg.members());
        let embedded = tape.gather(pv.output.embedding, &batch.inputs, 1)?;

        let members = match &batch.context {
            None => None,
            Some(BatchContext::Tokens(ids)) => {
                let table = pv.context_table.ok_or(ModelError::MissingContext)?;
                Some(tape.gather(table, ids, k)?)
            }
            Some(BatchContext::Features(v)) => {
                let t = Tensor::from_vec(
                    vec![bsz, v.len() / bsz],
                    v.iter().map(|&x| T::lit(x)).collect(),
                )?;
                Some(tape.constant(t))
            }
        };

        // Context terms that stay fixed over the utterance.
        let mut fixed_extra = None;
        let mut fixed_factor = None;
        if let (Some(m), Attention::None) = (members, cfg.attention) {
            if let Some(c) = &pv.concat {
                fixed_extra = Some(tape.matmul(m, c.w_m)?);
            }
            if let Some(fp) = &pv.factor {
                fixed_factor = Some(factor_delta(tape, fp, m)?);
            }
        }

        let w_a = pv.attention.as_ref().map(|a| a.w_a);
        let mut pre_attended = Vec::new();
        if let (Some(w_a), Some(m), Attention::WordQuery, true) =
            (w_a, members, cfg.attention, opts.parallel_word_query)
        {
            // The word query does not depend on the recurrence, so every step is
            // scored from one stacked projection.
            let projected = tape.matmul_t(embedded, w_a)?;
            for t in 0..batch.steps {
                let p_t = tape.slice_rows(projected, t * bsz, bsz)?;
                pre_attended.push(attend_vars(tape, m, p_t, k)?);
            }
        }

        let zeros = tape.constant(Tensor::zeros(&[bsz, d]));
        let (mut h, mut c) = (zeros, zeros);
        let mut out = ForwardOutput {
            logits: Vec::with_capacity(batch.steps),
            alphas: Vec::new(),
        };
        for t in 0..batch.steps {
            let x = tape.slice_rows(embedded, t * bsz, bsz)?;
            let attended = match (w_a, members, cfg.attention) {
                (Some(_), Some(_), Attention::WordQuery) if !pre_attended.is_empty() => {
                    Some(pre_attended[t])
                }
                (Some(w_a), Some(m), att) if att != Attention::None => {
                    let q = if att == Attention::WordQuery { x } else { h };
                    let p_t = tape.matmul_t(q, w_a)?;
                    Some(attend_vars(tape, m, p_t, k)?)
                }
                _ => None,
            };
            let (extra, step_factor) = match attended {
                Some((m_t, alpha)) => {
                    out.alphas.push(alpha);
                    let extra = match &pv.concat {
                        Some(cp) => Some(tape.matmul(m_t, cp.w_m)?),
                        None => None,
                    };
                    let fd = match &pv.factor {
                        Some(fp) => Some(factor_delta(tape, fp, m_t)?),
                        None => None,
                    };
                    (extra, fd)
                }
                None => (fixed_extra, None),
            };
            let factor = step_factor.as_ref().or(fixed_factor.as_ref());
            (h, c) = lstm_step_with(tape, &pv.lstm, x, (h, c), extra, factor)?;
            out.logits.push(tape.matmul(h, pv.output.w_v)?);
        }
        Ok(out)
    }

    /// Mean cross-entropy over the batch's predicted tokens, and their count.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        pv: &Parameters<Var>,
        batch: &Batch,
    ) -> Result<(Var, usize), ModelError> {
        let out = self.forward(tape, pv, batch, ForwardOptions::default())?;
        let n = batch.num_tokens();
        let mut total: Option<Var> = None;
        for (t, &logits) in out.logits.iter().enumerate() {
            let r = batch.step_range(t);
            let w: Vec<T> = batch.weights[r.clone()]
                .iter()
                .map(|&x| T::lit(x))
                .collect();
            let l = tape.softmax_cross_entropy(logits, &batch.targets[r], &w)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let total = total.ok_or(ModelError::EmptyBatch)?;
        let mean = tape.scale(total, T::one() / T::lit(n.max(1) as f64))?;
        Ok((mean, n))
    }

    fn run(
        &self,
        batch: &Batch,
        opts: ForwardOptions,
    ) -> Result<(Tape<T>, ForwardOutput), ModelError> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &pv, batch, opts)?;
        Ok((tape, out))
    }

    /// Log-probabilities of the predicted tokens of every item, in order.
    pub fn score_batch(&self, items: &[&Encoded]) -> Result<Vec<UtteranceScore>, ModelError> {
        let batch = self.batch(items)?;
        let (tape, out) = self.run(&batch, ForwardOptions::default())?;
        let mut per_item = vec![Vec::new(); batch.size];
        for (t, &logits) in out.logits.iter().enumerate() {
            let value = tape.value(logits);
            for (b, scores) in per_item.iter_mut().enumerate() {
                let i = t * batch.size + b;
                if batch.weights[i] > 0.0 {
                    scores.push(row_log_softmax_at(value.row(b), batch.targets[i]));
                }
            }
        }
        Ok(per_item
            .into_iter()
            .map(|lps: Vec<Dd>| {
                let per_token: Vec<f64> = lps.iter().map(|lp| lp.to_f64()).collect();
                UtteranceScore {
                    total: per_token.iter().sum(),
                    nll: -lps.into_iter().fold(Dd::default(), |acc, lp| acc + lp),
                    per_token,
                }
            })
            .collect())
    }

    /// Total and per-token log-probabilities of `item` (words then EOS).
    pub fn score_utterance(&self, item: &Encoded) -> Result<UtteranceScore, ModelError> {
        Ok(self.score_batch(&[item])?.remove(0))
    }

    /// Next-token distribution after every consumed input of `item`.
    pub fn distributions(&self, item: &Encoded) -> Result<Vec<Vec<f64>>, ModelError> {
        let batch = self.batch(&[item])?;
        let (mut tape, out) = self.run(&batch, ForwardOptions::default())?;
        out.logits
            .iter()
            .map(|&l| {
                let p = tape.softmax(l)?;
                Ok(tape.value(p).to_f64_vec())
            })
            .collect()
    }

    /// Distribution over the first word, after BOS (and any context prefix).
    pub fn first_word_distribution(
        &self,
        context: Option<ContextInput>,
    ) -> Result<Vec<f64>, ModelError> {
        let item = Encoded {
            words: Vec::new(),
            context,
        };
        let mut dists = self.distributions(&item)?;
        Ok(dists.swap_remove(self.config.prefix_len()))
    }

    /// Raw logits per step, for exact comparisons between model variants.
    pub fn logits(
        &self,
        items: &[&Encoded],
        opts: ForwardOptions,
    ) -> Result<Vec<Vec<T>>, ModelError> {
        let batch = self.batch(items)?;
        let (tape, out) = self.run(&batch, opts)?;
        Ok(out
            .logits
            .iter()
            .map(|&l| tape.value(l).data().to_vec())
            .collect())
    }

    /// Alignment vectors per step and batch row: `[t][b][i]`.
    pub fn alignments(
        &self,
        items: &[&Encoded],
        opts: ForwardOptions,
    ) -> Result<Vec<Vec<Vec<T>>>, ModelError> {
        if self.config.attention == Attention::None {
            return Err(ModelError::NoAttention);
        }
        let batch = self.batch(items)?;
        let (tape, out) = self.run(&batch, opts)?;
        Ok(out
            .alphas
            .iter()
            .map(|&a| {
                let v = tape.value(a);
                (0..batch.size).map(|b| v.row(b).to_vec()).collect()
            })
            .collect())
    }

    pub fn attention_trace(&self, item: &Encoded) -> Result<AttentionTrace, ModelError> {
        let steps = self
            .alignments(&[item], ForwardOptions::default())?
            .into_iter()
            .map(|mut rows| rows.remove(0).into_iter().map(Scalar::as_f64).collect())
            .collect();
        Ok(AttentionTrace {
            labels: self
                .config
                .set_kind()
                .member_labels()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            steps,
        })
    }
}
