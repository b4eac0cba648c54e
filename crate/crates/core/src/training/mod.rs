//! Initialization, Adam, and the mini-batch training loop.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointError, CHECKPOINT_VERSION,
};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::evaluation;
use crate::models::{Encoded, Model, ModelConfig, ModelError, Parameters};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("gradient of {param} is not finite")]
    NonFiniteGradient { param: String },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("no training data")]
    NoData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm gradient clipping; `None` disables it.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batch_size: usize,
    /// Scan every tape value for NaN/Inf.
    pub debug_checks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            max_steps: 5000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip_norm: Some(5.0),
            seed: 0,
            eval_every: 250,
            eval_batch_size: 64,
            debug_checks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if self.batch_size == 0
            || self.max_steps == 0
            || self.eval_every == 0
            || self.eval_batch_size == 0
        {
            return bad("batch_size, max_steps, eval_every and eval_batch_size must be positive");
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return bad("adam betas must lie in (0, 1)");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if matches!(self.grad_clip_norm, Some(c) if c <= 0.0 || !c.is_finite()) {
            return bad("grad_clip_norm must be positive");
        }
        Ok(())
    }
}

/// How a slot is drawn at initialization.
fn init_std(name: &str, shape: &[usize]) -> Option<f64> {
    let fan_in = shape[0] as f64;
    match name {
        // rows are looked up, not multiplied: unit expected row norm
        "embedding" | "context_table" => Some((1.0 / shape[1] as f64).sqrt()),
        "lstm.w_x" | "lstm.w_h" | "concat.w_m" => Some((2.0 / fan_in).sqrt()),
        "factor.w_l_x" | "factor.w_l_h" => Some((2.0 / fan_in).sqrt()),
        // Xavier for the output projection
        "output.w_v" => Some((2.0 / (shape[0] + shape[1]) as f64).sqrt()),
        // right bases start at zero so the adapted cell starts as the base
        // cell; W_a at zero so attention starts uniform
        _ => None,
    }
}

/// He-scaled recurrent blocks, Xavier-scaled projections, zero right factor
/// bases, zero biases except the forget-gate block at 1.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>, ModelError> {
    config.validate()?;
    let mut rng = rng::sub_rng(seed, rng::stream::INIT);
    let d = config.hidden_dim;
    let params: Parameters<Tensor<T>> = crate::models::param_shapes(config).map(|name, shape| {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match (name, init_std(name, shape)) {
            ("lstm.b", _) => (0..n)
                .map(|i| {
                    if (d..2 * d).contains(&i) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect(),
            (_, Some(std)) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            }
            (_, None) => vec![T::zero(); n],
        };
        Tensor::from_vec(shape.clone(), data).expect("shape matches data")
    });
    Model::new(config.clone(), params)
}

/// Adam moments, one buffer per parameter in entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Parameters<Tensor<T>>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .entries()
            .iter()
            .map(|(_, t)| vec![T::zero(); t.len()])
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are first rescaled so their
/// global norm is at most `grad_clip_norm`. Returns the pre-clip norm.
pub fn adam_step<T: Scalar>(
    params: &mut Parameters<Tensor<T>>,
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut entries = params.entries_mut();
    if grads.len() != entries.len() || state.m.len() != entries.len() {
        return Err(TrainError::Config(
            "gradient list does not match the parameters".into(),
        ));
    }
    let mut sq = 0.0;
    for ((name, p), g) in entries.iter().zip(grads) {
        if g.len() != p.len() {
            return Err(TrainError::Config(format!(
                "gradient of {name} has the wrong length"
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: name.to_string(),
            });
        }
        sq += g.iter().map(|x| x.as_f64().powi(2)).sum::<f64>();
    }
    let norm = sq.sqrt();
    let clip = match config.grad_clip_norm {
        Some(c) if norm > c => T::lit(c / norm),
        _ => T::one(),
    };

    state.step += 1;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let t = state.step as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(config.learning_rate), T::lit(config.epsilon));
    for (i, (_, p)) in entries.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] * clip;
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}

/// Mean loss on `batch` and the gradient of every parameter, in entry order.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    items: &[&Encoded],
    debug_checks: bool,
) -> Result<(f64, Vec<Vec<T>>), ModelError> {
    let batch = model.batch(items)?;
    let mut tape = Tape::new().with_debug_checks(debug_checks);
    let pv = model.bind(&mut tape, true);
    let (loss, _) = model.loss(&mut tape, &pv, &batch)?;
    let grads = tape.backward(loss)?;
    let g = pv
        .entries()
        .into_iter()
        .map(|(_, &v)| grads.wrt_or_zeros(&tape, v))
        .collect();
    Ok((tape.scalar_value(loss).as_f64(), g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean batch loss since the previous point.
    pub train_loss: f64,
    pub dev_ppl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters at the best dev perplexity.
    pub best: Model<T>,
    pub best_step: usize,
    pub best_dev_ppl: f64,
    pub curve: Vec<CurvePoint>,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,train_loss,dev_ppl\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.step, p.train_loss, p.dev_ppl));
    }
    s
}

/// Epoch-shuffled fixed-size batches (the remainder of each epoch is
/// dropped unless the data is smaller than one batch).
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: 0,
            batch: batch.min(n),
            rng: rng::sub_rng(seed, rng::stream::BATCHING),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += self.batch;
        &self.order[self.pos - self.batch..self.pos]
    }
}

/// Runs `max_steps` Adam updates from `model`, evaluating dev perplexity
/// every `eval_every` steps (and at the last step) and keeping the best.
pub fn train<T: Scalar>(
    model: Model<T>,
    train: &[Encoded],
    dev: &[Encoded],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut model = model;
    let mut state = OptimizerState::new(&model.params);
    let mut batcher = Batcher::new(train.len(), config.batch_size, config.seed);
    let mut curve = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut best: Option<(Model<T>, usize, f64)> = None;

    for step in 1..=config.max_steps {
        let items: Vec<&Encoded> = batcher.next().iter().map(|&i| &train[i]).collect();
        let (loss, grads) = loss_and_grads(&model, &items, config.debug_checks)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        adam_step(&mut model.params, &grads, &mut state, config)?;
        loss_sum += loss;
        loss_n += 1;

        if step % config.eval_every == 0 || step == config.max_steps {
            let dev_ppl = evaluation::corpus_perplexity(&model, dev, config.eval_batch_size)?;
            if !dev_ppl.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    loss: dev_ppl.ln(),
                });
            }
            curve.push(CurvePoint {
                step,
                train_loss: loss_sum / loss_n as f64,
                dev_ppl,
            });
            (loss_sum, loss_n) = (0.0, 0);
            if best.as_ref().is_none_or(|(_, _, b)| dev_ppl < *b) {
                best = Some((model.clone(), step, dev_ppl));
            }
        }
    }
    let (best, best_step, best_dev_ppl) = best.expect("the last step always evaluates");
    Ok(TrainOutcome {
        best,
        best_step,
        best_dev_ppl,
        curve,
    })
}
