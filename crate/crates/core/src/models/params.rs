//! Parameter containers, generic over what a slot holds: a [`Tensor`], a
//! tape [`Var`](crate::tensor::Var), a shape, a gradient buffer.

use super::{Architecture, Attention, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<P> {
    /// `e×4d`, gate blocks ordered input, forget, cell, output.
    pub w_x: P,
    /// `d×4d`.
    pub w_h: P,
    /// `4d`.
    pub b: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcatParams<P> {
    /// `f×4d`.
    pub w_m: P,
}

/// Left and right basis tensors for the input and recurrent matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorParams<P> {
    /// `f×e×r`.
    pub w_l_x: P,
    /// `r×4d×f`.
    pub w_r_x: P,
    /// `f×d×r`.
    pub w_l_h: P,
    /// `r×4d×f`.
    pub w_r_h: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<P> {
    /// `f_i×e` (word query) or `f_i×d` (hidden query).
    pub w_a: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer<P> {
    /// Input embedding table, one row per input id.
    pub embedding: P,
    /// `d×|V|` projection.
    pub w_v: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<P> {
    pub output: OutputLayer<P>,
    pub lstm: LstmParams<P>,
    /// Learned context embeddings, one `f_i` row per context token.
    pub context_table: Option<P>,
    pub concat: Option<ConcatParams<P>>,
    pub factor: Option<FactorParams<P>>,
    pub attention: Option<AttentionParams<P>>,
}

impl<P> Parameters<P> {
    /// Every slot with its name, in a fixed order shared by the optimizer
    /// state and the checkpoint format.
    pub fn entries(&self) -> Vec<(&'static str, &P)> {
        let mut out = vec![
            ("embedding", &self.output.embedding),
            ("lstm.w_x", &self.lstm.w_x),
            ("lstm.w_h", &self.lstm.w_h),
            ("lstm.b", &self.lstm.b),
        ];
        if let Some(t) = &self.context_table {
            out.push(("context_table", t));
        }
        if let Some(c) = &self.concat {
            out.push(("concat.w_m", &c.w_m));
        }
        if let Some(f) = &self.factor {
            out.extend([
                ("factor.w_l_x", &f.w_l_x),
                ("factor.w_r_x", &f.w_r_x),
                ("factor.w_l_h", &f.w_l_h),
                ("factor.w_r_h", &f.w_r_h),
            ]);
        }
        if let Some(a) = &self.attention {
            out.push(("attention.w_a", &a.w_a));
        }
        out.push(("output.w_v", &self.output.w_v));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut P)> {
        let mut out = vec![
            ("embedding", &mut self.output.embedding),
            ("lstm.w_x", &mut self.lstm.w_x),
            ("lstm.w_h", &mut self.lstm.w_h),
            ("lstm.b", &mut self.lstm.b),
        ];
        if let Some(t) = &mut self.context_table {
            out.push(("context_table", t));
        }
        if let Some(c) = &mut self.concat {
            out.push(("concat.w_m", &mut c.w_m));
        }
        if let Some(f) = &mut self.factor {
            out.extend([
                ("factor.w_l_x", &mut f.w_l_x),
                ("factor.w_r_x", &mut f.w_r_x),
                ("factor.w_l_h", &mut f.w_l_h),
                ("factor.w_r_h", &mut f.w_r_h),
            ]);
        }
        if let Some(a) = &mut self.attention {
            out.push(("attention.w_a", &mut a.w_a));
        }
        out.push(("output.w_v", &mut self.output.w_v));
        out
    }

    /// Same layout with every slot transformed, visiting slots in [`entries`](Self::entries) order.
    pub fn try_map<Q, E>(
        &self,
        mut f: impl FnMut(&'static str, &P) -> Result<Q, E>,
    ) -> Result<Parameters<Q>, E> {
        let output_embedding = f("embedding", &self.output.embedding)?;
        let lstm = LstmParams {
            w_x: f("lstm.w_x", &self.lstm.w_x)?,
            w_h: f("lstm.w_h", &self.lstm.w_h)?,
            b: f("lstm.b", &self.lstm.b)?,
        };
        let context_table = self
            .context_table
            .as_ref()
            .map(|t| f("context_table", t))
            .transpose()?;
        let concat = match &self.concat {
            Some(c) => Some(ConcatParams {
                w_m: f("concat.w_m", &c.w_m)?,
            }),
            None => None,
        };
        let factor = match &self.factor {
            Some(p) => Some(FactorParams {
                w_l_x: f("factor.w_l_x", &p.w_l_x)?,
                w_r_x: f("factor.w_r_x", &p.w_r_x)?,
                w_l_h: f("factor.w_l_h", &p.w_l_h)?,
                w_r_h: f("factor.w_r_h", &p.w_r_h)?,
            }),
            None => None,
        };
        let attention = match &self.attention {
            Some(a) => Some(AttentionParams {
                w_a: f("attention.w_a", &a.w_a)?,
            }),
            None => None,
        };
        let w_v = f("output.w_v", &self.output.w_v)?;
        Ok(Parameters {
            output: OutputLayer {
                embedding: output_embedding,
                w_v,
            },
            lstm,
            context_table,
            concat,
            factor,
            attention,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Q) -> Parameters<Q> {
        self.try_map(|n, p| Ok::<_, std::convert::Infallible>(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }

    /// Same layout filled from `items` in [`entries`](Self::entries) order.
    pub fn with_items<Q>(&self, items: impl IntoIterator<Item = Q>) -> Option<Parameters<Q>> {
        let mut it = items.into_iter();
        let out = self.try_map(|_, _| it.next().ok_or(())).ok()?;
        it.next().is_none().then_some(out)
    }

    pub fn len(&self) -> usize {
        self.entries().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Parameter shapes implied by `config`.
pub fn param_shapes(config: &ModelConfig) -> Parameters<Vec<usize>> {
    let (e, d, r) = (config.embed_dim, config.hidden_dim, config.factor_rank);
    let g = 4 * d;
    let f = config.adapt_dim();
    Parameters {
        output: OutputLayer {
            embedding: vec![config.input_vocab(), e],
            w_v: vec![d, config.vocab_size],
        },
        lstm: LstmParams {
            w_x: vec![e, g],
            w_h: vec![d, g],
            b: vec![g],
        },
        context_table: (config.architecture.is_adapted() && config.set_kind().is_learned())
            .then(|| vec![config.context_vocab_size, config.member_dim()]),
        concat: (config.architecture == Architecture::Concat)
            .then(|| ConcatParams { w_m: vec![f, g] }),
        factor: (config.architecture == Architecture::Factor).then(|| FactorParams {
            w_l_x: vec![f, e, r],
            w_r_x: vec![r, g, f],
            w_l_h: vec![f, d, r],
            w_r_h: vec![r, g, f],
        }),
        attention: (config.attention != Attention::None).then(|| AttentionParams {
            w_a: vec![config.member_dim(), config.query_dim()],
        }),
    }
}

/// Matrix view a slot takes on the tape. The factor bases are stored as
/// 3-way tensors but enter the computation as `f×(e·r)` (left) and
/// `(r·4d)×f` (right) matrices; the row-major payload is unchanged.
pub(crate) fn tape_shape(name: &str, shape: &[usize]) -> Vec<usize> {
    match (name, shape) {
        (n, [a, b, c]) if n.starts_with("factor.w_l") => vec![*a, b * c],
        (n, [a, b, c]) if n.starts_with("factor.w_r") => vec![a * b, *c],
        _ => shape.to_vec(),
    }
}

impl<T: crate::Scalar> Parameters<Tensor<T>> {
    pub fn zeros(config: &ModelConfig) -> Self {
        param_shapes(config).map(|_, s| Tensor::zeros(s))
    }

    pub fn num_values(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies reshaped to their tape matrix views, in entry order.
    pub fn tape_tensors(&self) -> Vec<Tensor<T>> {
        self.entries()
            .into_iter()
            .map(|(n, t)| {
                t.clone()
                    .reshape(tape_shape(n, t.shape()))
                    .expect("same element count")
            })
            .collect()
    }
}
