use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::context::{datetime_features, parse_context, ContextExtras, ContextRepr};
use crate::tensor::check_gradients;
use crate::training::init_params;

const V: usize = 20;

fn tiny(arch: Architecture, attention: Attention, repr: ContextRepr) -> ModelConfig {
    ModelConfig {
        vocab_size: V,
        embed_dim: 8,
        hidden_dim: 8,
        context_dim: 8,
        factor_rank: 2,
        architecture: arch,
        attention,
        context_repr: repr,
        context_source: crate::context::ContextSource::Datetime,
        zero_gate: true,
        context_vocab_size: ContextVocab::default().len(),
    }
}

/// Every slot drawn at random, including the zero-initialised ones.
fn random_model(config: &ModelConfig, seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = param_shapes(config).map(|_, s| {
        let n = s.iter().product();
        Tensor::from_vec(
            s.clone(),
            (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap()
    });
    Model::new(config.clone(), params).unwrap()
}

fn random_item(config: &ModelConfig, rng: &mut ChaCha8Rng, len: usize) -> Encoded {
    let words = (0..len).map(|_| rng.random_range(3..V)).collect();
    let rec = parse_context(
        &format!(
            "2020-{:02}-{:02} {:02}:00",
            rng.random_range(1..13),
            rng.random_range(1..29),
            rng.random_range(0..24)
        ),
        ContextExtras::default(),
    )
    .unwrap();
    let context = config
        .uses_context()
        .then(|| context_input(config.set_kind(), &rec, &ContextVocab::default()).unwrap());
    Encoded { words, context }
}

fn items(config: &ModelConfig, n: usize, seed: u64) -> Vec<Encoded> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| random_item(config, &mut rng, 1 + i % 5))
        .collect()
}

fn same_logits(a: &Model<f64>, b: &Model<f64>, batch: &[Encoded]) -> bool {
    let refs: Vec<&Encoded> = batch.iter().collect();
    a.logits(&refs, ForwardOptions::default()).unwrap()
        == b.logits(&refs, ForwardOptions::default()).unwrap()
}

#[test]
fn config_rejects_attention_without_adaptation() {
    for arch in [Architecture::Default, Architecture::Prepend] {
        let c = tiny(arch, Attention::WordQuery, ContextRepr::Learned);
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    }
    let mut c = tiny(Architecture::Concat, Attention::None, ContextRepr::Learned);
    c.context_dim = 10;
    assert!(c.validate().is_err());
    let mut c = tiny(Architecture::Concat, Attention::None, ContextRepr::Feature);
    c.context_dim = 16;
    assert!(c.validate().is_err());
}

#[test]
fn parameter_shapes_follow_the_config() {
    let c = tiny(
        Architecture::Factor,
        Attention::HiddenQuery,
        ContextRepr::Learned,
    );
    let s = param_shapes(&c);
    assert_eq!(s.lstm.w_x, vec![8, 32]);
    assert_eq!(s.lstm.w_h, vec![8, 32]);
    assert_eq!(s.lstm.b, vec![32]);
    let f = s.factor.unwrap();
    // attention adapts with one member (f/4 wide)
    assert_eq!(f.w_l_x, vec![2, 8, 2]);
    assert_eq!(f.w_r_h, vec![2, 32, 2]);
    assert_eq!(s.attention.unwrap().w_a, vec![2, 8]);
    assert_eq!(s.output.w_v, vec![8, V]);
    assert!(s.concat.is_none());

    let c = tiny(Architecture::Concat, Attention::None, ContextRepr::Learned);
    assert_eq!(param_shapes(&c).concat.unwrap().w_m, vec![8, 32]);
    let p = tiny(Architecture::Prepend, Attention::None, ContextRepr::Learned);
    assert_eq!(
        param_shapes(&p).output.embedding,
        vec![V + p.context_vocab_size, 8]
    );
}

#[test]
fn lstm_step_with_zero_everything_is_zero() {
    let mut tape = Tape::<f64>::new();
    let p = LstmParams {
        w_x: tape.constant(Tensor::zeros(&[3, 8])),
        w_h: tape.constant(Tensor::zeros(&[2, 8])),
        b: tape.constant(Tensor::zeros(&[8])),
    };
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let z = tape.constant(Tensor::zeros(&[1, 2]));
    let (h, c) = lstm_step(&mut tape, &p, x, (z, z), None).unwrap();
    assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
    assert_eq!(tape.value(c).data(), &[0.0, 0.0]);
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn zero_context_matrix_leaves_the_step_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let p = LstmParams {
        w_x: tape.constant(random_tensor(&mut rng, &[3, 8])),
        w_h: tape.constant(random_tensor(&mut rng, &[2, 8])),
        b: tape.constant(random_tensor(&mut rng, &[8])),
    };
    let x = tape.constant(random_tensor(&mut rng, &[2, 3]));
    let h = tape.constant(random_tensor(&mut rng, &[2, 2]));
    let c = tape.constant(random_tensor(&mut rng, &[2, 2]));
    let m = tape.constant(random_tensor(&mut rng, &[2, 5]));
    let w_m = tape.constant(Tensor::zeros(&[5, 8]));
    let plain = lstm_step(&mut tape, &p, x, (h, c), None).unwrap();
    let ctx = lstm_step(&mut tape, &p, x, (h, c), Some((m, w_m))).unwrap();
    assert_eq!(tape.value(plain.0).data(), tape.value(ctx.0).data());
    assert_eq!(tape.value(plain.1).data(), tape.value(ctx.1).data());
}

#[test]
fn one_step_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![
        random_tensor(&mut rng, &[3, 8]),
        random_tensor(&mut rng, &[2, 8]),
        random_tensor(&mut rng, &[8]),
        random_tensor(&mut rng, &[4, 8]),
        random_tensor(&mut rng, &[2, 3]),
        random_tensor(&mut rng, &[2, 4]),
    ];
    let report = check_gradients(
        |tape, v| {
            let p = LstmParams {
                w_x: v[0],
                w_h: v[1],
                b: v[2],
            };
            let z = tape.constant(Tensor::zeros(&[2, 2]));
            let (h, c) = lstm_step(tape, &p, v[4], (z, z), Some((v[5], v[3])))?;
            let s = tape.mul(h, c)?;
            tape.sum(s)
        },
        &params,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn concat_with_zero_context_matrix_equals_default() {
    let d = tiny(Architecture::Default, Attention::None, ContextRepr::Learned);
    let base = random_model(&d, 1);
    let c = tiny(Architecture::Concat, Attention::None, ContextRepr::Learned);
    let mut concat = random_model(&c, 2);
    concat.params.output = base.params.output.clone();
    concat.params.lstm = base.params.lstm.clone();
    concat.params.concat = Some(ConcatParams {
        w_m: Tensor::zeros(&[8, 32]),
    });
    assert!(same_logits(&base, &concat, &items(&c, 12, 9)));
}

#[test]
fn factor_with_zero_bases_equals_default() {
    let d = tiny(Architecture::Default, Attention::None, ContextRepr::Feature);
    let base = random_model(&d, 1);
    for att in Attention::ALL {
        let f = tiny(Architecture::Factor, att, ContextRepr::Feature);
        let mut factor = random_model(&f, 2);
        factor.params.output = base.params.output.clone();
        factor.params.lstm = base.params.lstm.clone();
        factor.params.factor = factor.params.factor.as_ref().map(|fp| fp.map_zero());
        assert!(same_logits(&base, &factor, &items(&f, 12, 4)), "{att}");
    }
}

impl FactorParams<Tensor<f64>> {
    fn map_zero(&self) -> Self {
        FactorParams {
            w_l_x: Tensor::zeros(self.w_l_x.shape()),
            w_r_x: Tensor::zeros(self.w_r_x.shape()),
            w_l_h: Tensor::zeros(self.w_l_h.shape()),
            w_r_h: Tensor::zeros(self.w_r_h.shape()),
        }
    }
}

#[test]
fn single_member_attention_equals_no_attention() {
    for arch in [Architecture::Concat, Architecture::Factor] {
        let mut plain_cfg = tiny(arch, Attention::None, ContextRepr::Feature);
        plain_cfg.zero_gate = false;
        let plain = random_model(&plain_cfg, 11);
        for att in [Attention::WordQuery, Attention::HiddenQuery] {
            let mut cfg = plain_cfg.clone();
            cfg.attention = att;
            let mut attended = random_model(&cfg, 12);
            let w_a = attended.params.attention.clone();
            attended.params = plain.params.clone();
            attended.params.attention = w_a;
            assert_eq!(cfg.members(), 1);
            assert!(
                same_logits(&plain, &attended, &items(&cfg, 12, 5)),
                "{arch} {att}"
            );
        }
    }
}

#[test]
fn word_query_prepass_matches_stepwise_attention() {
    for repr in [ContextRepr::Learned, ContextRepr::Feature] {
        for arch in [Architecture::Concat, Architecture::Factor] {
            let cfg = tiny(arch, Attention::WordQuery, repr);
            let model = random_model(&cfg, 21);
            let batch = items(&cfg, 9, 22);
            let refs: Vec<&Encoded> = batch.iter().collect();
            let seq = ForwardOptions {
                parallel_word_query: false,
            };
            let par = ForwardOptions {
                parallel_word_query: true,
            };
            assert_eq!(
                model.alignments(&refs, seq).unwrap(),
                model.alignments(&refs, par).unwrap()
            );
            assert_eq!(
                model.logits(&refs, seq).unwrap(),
                model.logits(&refs, par).unwrap()
            );
        }
    }
}

#[test]
fn alignments_are_distributions_and_cover_every_step() {
    let cfg = tiny(
        Architecture::Concat,
        Attention::HiddenQuery,
        ContextRepr::Learned,
    );
    let model = random_model(&cfg, 3);
    let item = &items(&cfg, 1, 8)[0];
    let trace = model.attention_trace(item).unwrap();
    assert_eq!(trace.steps.len(), item.words.len() + 1);
    assert_eq!(trace.labels, ["month", "week", "weekday", "hour"]);
    for a in &trace.steps {
        assert!(a.iter().all(|&x| x >= 0.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    // the zero initial state gives every member the same score
    assert!(trace.steps[0].iter().all(|&x| (x - 0.25).abs() < 1e-15));
}

#[test]
fn attend_closed_forms() {
    let members = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
    let (m, a) = attend(&Tensor::<f64>::zeros(&[2, 3]), &members, &[0.3, 0.1, 0.2]).unwrap();
    assert!(a.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    assert!((m[0] - 1.5).abs() < 1e-12 && (m[1] - 0.5).abs() < 1e-12);

    let (m, a) = attend(
        &Tensor::from_vec(vec![2, 1], vec![0.7, -0.2]).unwrap(),
        &[vec![4.0, 5.0]],
        &[2.0],
    )
    .unwrap();
    assert_eq!(a, vec![1.0]);
    assert_eq!(m, vec![4.0, 5.0]);

    // scores (ln 1, ln 3) with W_a = [1], q = [1]
    let ln3 = 3f64.ln();
    let (m, a) = attend(
        &Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap(),
        &[vec![0.0], vec![ln3]],
        &[1.0],
    )
    .unwrap();
    assert!((a[0] - 0.25).abs() < 1e-15 && (a[1] - 0.75).abs() < 1e-15);
    assert!((m[0] - 0.75 * ln3).abs() < 1e-15);

    assert!(attend::<f64>(&Tensor::zeros(&[1, 1]), &[], &[1.0]).is_err());
}

#[test]
fn factor_adapt_zero_context_is_identity() {
    let cfg = tiny(Architecture::Factor, Attention::None, ContextRepr::Feature);
    let model = random_model(&cfg, 4);
    let fp = model.params.factor.as_ref().unwrap();
    let (wx, wh) = factor_adapt(fp, &model.params.lstm, &[0.0; 8]).unwrap();
    assert_eq!(wx, model.params.lstm.w_x);
    assert_eq!(wh, model.params.lstm.w_h);
}

#[test]
fn factor_adapt_hand_computed_rank_one() {
    // f = r = 1: delta = (m·l)(m·r)ᵀ = m²·l·rᵀ
    let l = Tensor::from_vec(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
    let r = Tensor::from_vec(vec![1, 2, 1], vec![3.0, -1.0]).unwrap();
    let base = LstmParams {
        w_x: Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        w_h: Tensor::zeros(&[2, 2]),
        b: Tensor::zeros(&[2]),
    };
    let fp = FactorParams {
        w_l_x: l.clone(),
        w_r_x: r.clone(),
        w_l_h: l,
        w_r_h: r,
    };
    let (wx, wh) = factor_adapt(&fp, &base, &[2.0]).unwrap();
    // 4·[[3, −1], [6, −2]]
    assert_eq!(wh.data(), &[12.0, -4.0, 24.0, -8.0]);
    assert_eq!(wx.data(), &[13.0, -4.0, 24.0, -7.0]);
}

#[test]
fn batched_factor_path_uses_the_adapted_matrices() {
    // x·W′_x computed through the model's low-rank path equals the explicit product.
    let cfg = tiny(Architecture::Factor, Attention::None, ContextRepr::Feature);
    let model = random_model(&cfg, 6);
    let fp = model.params.factor.as_ref().unwrap();
    let rec = parse_context("2021-06-03 18:00", ContextExtras::default()).unwrap();
    let m: [f64; 8] = datetime_features(&rec);
    let (wx, _) = factor_adapt(fp, &model.params.lstm, &m).unwrap();
    let x: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();

    let mut tape = Tape::new();
    let pv = model.bind(&mut tape, false);
    let xv = tape.constant(Tensor::from_vec(vec![1, 8], x.clone()).unwrap());
    let mv = tape.constant(Tensor::from_vec(vec![1, 8], m.to_vec()).unwrap());
    let fd = factor_delta(&mut tape, pv.factor.as_ref().unwrap(), mv).unwrap();
    let base = tape.matmul(xv, pv.lstm.w_x).unwrap();
    let delta = low_rank(&mut tape, xv, fd.a_x, fd.b_x).unwrap();
    let got = tape.add(base, delta).unwrap();
    for (j, g) in tape.value(got).data().iter().enumerate() {
        let want: f64 = (0..8).map(|i| x[i] * wx.get2(i, j)).sum();
        assert!((g - want).abs() < 1e-12);
    }
}

#[test]
fn scores_are_consistent() {
    let cfg = tiny(
        Architecture::Concat,
        Attention::WordQuery,
        ContextRepr::Learned,
    );
    let model = random_model(&cfg, 8);
    for item in items(&cfg, 6, 2) {
        let s = model.score_utterance(&item).unwrap();
        assert_eq!(s.per_token.len(), item.words.len() + 1);
        assert!((s.per_token.iter().sum::<f64>() - s.total).abs() <= 1e-10);
        assert!(s.per_token.iter().all(|&lp| lp <= 0.0));
    }
    let empty = Encoded {
        words: vec![],
        context: items(&cfg, 1, 3)[0].context.clone(),
    };
    assert_eq!(model.score_utterance(&empty).unwrap().per_token.len(), 1);
}

#[test]
fn zero_projection_scores_uniformly() {
    for arch in Architecture::ALL {
        let cfg = tiny(arch, Attention::None, ContextRepr::Learned);
        let mut model = random_model(&cfg, 1);
        model.params.output.w_v = Tensor::zeros(&[8, V]);
        for item in items(&cfg, 4, 6) {
            for lp in model.score_utterance(&item).unwrap().per_token {
                assert!((lp + (V as f64).ln()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn prepend_predicts_the_same_tokens_as_default() {
    let p = tiny(Architecture::Prepend, Attention::None, ContextRepr::Learned);
    let d = tiny(Architecture::Default, Attention::None, ContextRepr::Learned);
    let pm = random_model(&p, 1);
    let dm = random_model(&d, 1);
    for item in items(&p, 5, 7) {
        let plain = Encoded {
            words: item.words.clone(),
            context: None,
        };
        assert_eq!(
            pm.score_utterance(&item).unwrap().per_token.len(),
            dm.score_utterance(&plain).unwrap().per_token.len()
        );
        let batch = pm.batch(&[&item]).unwrap();
        assert_eq!(batch.steps, 1 + 4 + item.words.len());
        assert!(batch.weights[..4].iter().all(|&w| w == 0.0));
    }
}

#[test]
fn prepend_distribution_depends_on_the_prefix() {
    let p = tiny(Architecture::Prepend, Attention::None, ContextRepr::Learned);
    let model = random_model(&p, 2);
    let a = model
        .first_word_distribution(Some(ContextInput::Tokens(vec![0, 12, 65, 72])))
        .unwrap();
    let b = model
        .first_word_distribution(Some(ContextInput::Tokens(vec![11, 60, 70, 90])))
        .unwrap();
    assert_ne!(a, b);
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn batch_rejects_bad_ids() {
    let cfg = tiny(Architecture::Default, Attention::None, ContextRepr::Learned);
    let model = random_model(&cfg, 1);
    let bad = Encoded {
        words: vec![V],
        context: None,
    };
    assert!(matches!(
        model.score_utterance(&bad),
        Err(ModelError::TokenOutOfRange { .. })
    ));
    let c = tiny(Architecture::Concat, Attention::None, ContextRepr::Learned);
    let cm = random_model(&c, 1);
    let missing = Encoded {
        words: vec![3],
        context: None,
    };
    assert!(matches!(
        cm.score_utterance(&missing),
        Err(ModelError::MissingContext)
    ));
    assert!(matches!(model.batch(&[]), Err(ModelError::EmptyBatch)));
}

#[test]
fn padding_contributes_nothing() {
    // Loss and gradients on a padded batch equal the token-weighted sum of
    // the single-sequence runs.
    let cfg = tiny(
        Architecture::Concat,
        Attention::HiddenQuery,
        ContextRepr::Learned,
    );
    let model = random_model(&cfg, 13);
    let batch = items(&cfg, 3, 14);
    let refs: Vec<&Encoded> = batch.iter().collect();
    let (loss, grads) = crate::training::loss_and_grads(&model, &refs, false).unwrap();
    let total: usize = batch.iter().map(|b| b.words.len() + 1).sum();
    let mut want_loss = 0.0;
    let mut want_grads: Vec<Vec<f64>> = grads.iter().map(|g| vec![0.0; g.len()]).collect();
    for item in &batch {
        let n = (item.words.len() + 1) as f64;
        let (l, g) = crate::training::loss_and_grads(&model, &[item], false).unwrap();
        want_loss += l * n / total as f64;
        for (acc, gi) in want_grads.iter_mut().zip(g) {
            for (a, x) in acc.iter_mut().zip(gi) {
                *a += x * n / total as f64;
            }
        }
    }
    assert!((loss - want_loss).abs() < 1e-12);
    for (g, w) in grads.iter().zip(&want_grads) {
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn initialised_models_are_valid_for_every_variant() {
    for arch in Architecture::ALL {
        for att in Attention::ALL {
            for repr in [ContextRepr::Learned, ContextRepr::Feature] {
                let cfg = tiny(arch, att, repr);
                if cfg.validate().is_err() {
                    continue;
                }
                let m = init_params::<f64>(&cfg, 0).unwrap();
                let s = m
                    .score_batch(&items(&cfg, 3, 1).iter().collect::<Vec<_>>())
                    .unwrap();
                assert!(s.iter().all(|u| u.total.is_finite()));
            }
        }
    }
}
