mod common;

use common::{pair, random_point_model, random_sentence, tiny_config};
use nmt_simplify::corpus::{TokenSequence, BOS};
use nmt_simplify::nmt::{lstm_cell, Model};
use nmt_simplify::tensor::{softmax_rows, Gradients, Graph, Rng, Tensor};
use nmt_simplify::Error;

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity() {
    let x = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
    assert_eq!(x.matmul(&Tensor::identity(2)).unwrap(), x);
    assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::<f64>::detached();
    let a = g.variable(Tensor::zeros(&[2, 3]));
    let b = g.variable(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    let c = g.variable(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let s = softmax_rows(&t(&[&[0.0, 0.0]]));
    assert_eq!(s.data(), &[0.5, 0.5]);
    let mut rng = Rng::new(4);
    for _ in 0..200 {
        let x = Tensor::<f64>::uniform(&[3, 7], -30.0, 30.0, &mut rng);
        let s = softmax_rows(&x);
        for r in 0..3 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn dropout_behaviour() {
    let x = Tensor::<f64>::full(&[1, 100_000], 2.0);
    let mut g = Graph::detached();
    let a = g.variable(x.clone());
    let mut rng = Rng::new(1);
    assert_eq!(g.dropout(a, 0.0, &mut rng, true), a);
    assert_eq!(g.dropout(a, 0.3, &mut rng, false), a);
    let d = g.dropout(a, 0.3, &mut rng, true);
    let v = g.value(d);
    let mean = v.sum() / v.len() as f64;
    assert!((mean - 2.0).abs() < 0.02 * 2.0, "mean {mean}");
    let zeros = v.data().iter().filter(|&&x| x == 0.0).count() as f64 / v.len() as f64;
    assert!((zeros - 0.3).abs() < 0.01);
    assert!(v
        .data()
        .iter()
        .all(|&x| x == 0.0 || (x - 2.0 / 0.7).abs() < 1e-12));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::detached();
    let uniform = g.variable(Tensor::zeros(&[1, 7]));
    let l = g.cross_entropy(uniform, &[Some(3)]).unwrap();
    assert!((g.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
    let peaked = g.variable(t(&[&[10.0, -10.0]]));
    let l = g.cross_entropy(peaked, &[Some(0)]).unwrap();
    // log(1 + e^-20)
    let expected = (-20f64).exp().ln_1p();
    assert!((g.value(l).data()[0] - expected).abs() < 1e-20);
    assert!((g.value(l).data()[0] - 2.06e-9).abs() < 1e-11);
    assert!(matches!(
        g.cross_entropy(peaked, &[Some(2)]),
        Err(Error::TokenOutOfRange { .. })
    ));
}

#[test]
fn backward_accumulates_and_rejects_non_scalar() {
    let model = Model::<f64>::new(tiny_config(1, 4, 10, 0.0), 1).unwrap();
    let p = pair(&[4, 5], &[6]);
    let mut g = model.graph();
    let (loss, _) = model
        .batch_loss(&mut g, &[&p], &mut Rng::new(0), false)
        .unwrap();
    let mut once = Gradients::zeros_like(model.params.store());
    g.backward(loss, &mut once).unwrap();
    let mut twice = Gradients::zeros_like(model.params.store());
    g.backward(loss, &mut twice).unwrap();
    g.backward(loss, &mut twice).unwrap();
    for i in 0..model.params.store().len() {
        let doubled: Vec<f64> = once.get(i).data().iter().map(|x| 2.0 * x).collect();
        assert_eq!(twice.get(i).data(), &doubled[..]);
    }
    let mut g = Graph::<f64>::detached();
    let v = g.variable(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward_nodes(v), Err(Error::NonScalarLoss(_))));
}

#[test]
fn lstm_cell_examples() {
    let mut g = Graph::<f64>::detached();
    let x = g.variable(Tensor::full(&[1, 3], 0.7));
    let zero = g.constant(Tensor::zeros(&[1, 2]));
    let w = g.constant(Tensor::zeros(&[5, 8]));
    let b = g.constant(Tensor::zeros(&[1, 8]));
    let (h, _) = lstm_cell(&mut g, x, (zero, zero), w, b).unwrap();
    assert_eq!(g.value(h).data(), &[0.0, 0.0]);

    // input gate closed, forget gate open: the cell carries over
    let c = g.constant(t(&[&[0.4, -1.3]]));
    let mut bias = vec![-20.0, -20.0, 20.0, 20.0, 0.0, 0.0, 0.0, 0.0];
    bias.iter_mut().skip(4).for_each(|v| *v = 0.3);
    let b = g.constant(Tensor::new(vec![1, 8], bias).unwrap());
    let w = g.constant(Tensor::full(&[5, 8], 0.01));
    let (_, c2) = lstm_cell(&mut g, x, (zero, c), w, b).unwrap();
    for (a, e) in g.value(c2).data().iter().zip([0.4, -1.3]) {
        assert!((a - e).abs() < 1e-7, "{a} vs {e}");
    }
    let bad = g.constant(Tensor::zeros(&[4, 8]));
    assert!(lstm_cell(&mut g, x, (zero, zero), bad, b).is_err());
}

#[test]
fn encoder_shapes_and_single_token() {
    let model = Model::<f64>::new(tiny_config(2, 6, 15, 0.0), 2).unwrap();
    let mut g = model.graph();
    let src = TokenSequence(vec![5, 6, 7, 8]);
    let enc = model.encode(&mut g, &src, &mut Rng::new(0), false).unwrap();
    assert_eq!(enc.forward.len(), 4);
    assert_eq!(enc.backward.len(), 4);
    assert_eq!(g.value(enc.combined).shape(), &[4, 12]);

    let one = model
        .encode(&mut g, &TokenSequence(vec![9]), &mut Rng::new(0), false)
        .unwrap();
    assert_eq!(g.value(one.combined).shape(), &[1, 12]);
    let (f, b) = (
        g.value(one.forward[0]).clone(),
        g.value(one.backward[0]).clone(),
    );
    assert_eq!(
        g.value(one.combined).data(),
        [f.data(), b.data()].concat().as_slice()
    );

    assert!(matches!(
        model.encode(&mut g, &TokenSequence(vec![]), &mut Rng::new(0), false),
        Err(Error::EmptySource)
    ));
    assert!(matches!(
        model.encode(&mut g, &TokenSequence(vec![15]), &mut Rng::new(0), false),
        Err(Error::TokenOutOfRange { .. })
    ));
}

#[test]
fn reversed_input_swaps_directions_with_tied_weights() {
    let mut model = Model::<f64>::new(tiny_config(1, 5, 12, 0.0), 8).unwrap();
    let store = model.params.store_mut();
    for part in ["w", "b"] {
        let fwd = store.get(&format!("enc.l0.fwd.{part}")).unwrap().clone();
        let idx = store.index_of(&format!("enc.l0.bwd.{part}")).unwrap();
        *store.tensor_mut(idx) = fwd;
    }
    let src = TokenSequence(vec![4, 9, 6, 11]);
    let rev = TokenSequence(src.0.iter().rev().copied().collect());
    let mut g = model.graph();
    let a = model.encode(&mut g, &src, &mut Rng::new(0), false).unwrap();
    let b = model.encode(&mut g, &rev, &mut Rng::new(0), false).unwrap();
    for j in 0..4 {
        assert_eq!(g.value(a.forward[j]), g.value(b.backward[3 - j]));
        assert_eq!(g.value(a.backward[j]), g.value(b.forward[3 - j]));
    }
}

#[test]
fn attention_weights() {
    let model = random_point_model(1, 6, 15, 0.0, 5);
    let mut g = model.graph();
    let mut rng = Rng::new(3);
    for len in 1..6 {
        let src = random_sentence(&mut rng, len, 15);
        let enc = model.encode(&mut g, &src, &mut Rng::new(0), false).unwrap();
        let q = g.variable(Tensor::uniform(&[1, 6], -2.0, 2.0, &mut rng));
        let (ctx, w) = model.attention(&mut g, q, &enc).unwrap();
        let w = g.value(w);
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!(w.data().iter().all(|&x| x >= 0.0));
        if len == 1 {
            assert_eq!(w.data(), &[1.0]);
            assert_eq!(g.value(ctx), g.value(enc.combined));
        }
    }
    // identical states at every position
    let enc = model
        .encode(&mut g, &TokenSequence(vec![7; 1]), &mut Rng::new(0), false)
        .unwrap();
    let tiled = model.tile_encoder(&mut g, &enc, 1).unwrap();
    let mut same = tiled.clone();
    same.len = 3;
    same.combined = g.concat_rows(&[enc.combined; 3]).unwrap();
    same.keys = g.concat_rows(&[enc.keys; 3]).unwrap();
    let q = g.variable(Tensor::full(&[1, 6], 0.9));
    let (_, w) = model.attention(&mut g, q, &same).unwrap();
    for &x in g.value(w).data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn attention_closed_form_two_positions() {
    // hidden 1: keys are combined * attn.w, so scores are q * (combined . w)
    let mut model = Model::<f64>::new(tiny_config(1, 1, 6, 0.0), 0).unwrap();
    let idx = model.params.store().index_of("attn.w").unwrap();
    *model.params.store_mut().tensor_mut(idx) = t(&[&[2.0], &[-1.0]]);
    let mut g = model.graph();
    let enc = model
        .encode(&mut g, &TokenSequence(vec![4, 5]), &mut Rng::new(0), false)
        .unwrap();
    let mut enc = enc;
    enc.combined = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let attn = g.param_named("attn.w").unwrap();
    enc.keys = g.matmul(enc.combined, attn).unwrap();
    let q = g.constant(t(&[&[0.5]]));
    let (ctx, w) = model.attention(&mut g, q, &enc).unwrap();
    // scores 1.0 and -0.5
    let e = (1.5f64).exp();
    let expected = [e / (1.0 + e), 1.0 / (1.0 + e)];
    for (a, b) in g.value(w).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(g.value(ctx).data(), g.value(w).data());
}

#[test]
fn decode_step_shape_and_determinism() {
    let model = Model::<f64>::new(tiny_config(2, 4, 13, 0.3), 6).unwrap();
    let src = TokenSequence(vec![4, 5, 6]);
    let run = || {
        let mut g = model.graph();
        let mut rng = Rng::new(17);
        let enc = model.encode(&mut g, &src, &mut rng, true).unwrap();
        let st = model.initial_state(&mut g, &enc).unwrap();
        let out = model
            .decode_step(&mut g, &[BOS], &st, &enc, &mut rng, true)
            .unwrap();
        (
            g.value(out.logits).clone(),
            g.value(out.state.input_feed).clone(),
        )
    };
    let (logits, feed) = run();
    assert_eq!(logits.shape(), &[1, 13]);
    assert_eq!(feed.shape(), &[1, 4]);
    assert_eq!(run(), (logits, feed));
    let mut g = model.graph();
    let enc = model.encode(&mut g, &src, &mut Rng::new(0), false).unwrap();
    let st = model.initial_state(&mut g, &enc).unwrap();
    assert!(model
        .decode_step(&mut g, &[13], &st, &enc, &mut Rng::new(0), false)
        .is_err());
}

#[test]
fn uniform_model_loss_is_log_vocab() {
    let mut model = Model::<f64>::new(tiny_config(1, 4, 11, 0.0), 0).unwrap();
    for i in 0..model.params.store().len() {
        model.params.store_mut().tensor_mut(i).fill(0.0);
    }
    let loss = model
        .sequence_nll(&pair(&[4, 5], &[6]), &mut Rng::new(0), false)
        .unwrap();
    assert_eq!(loss.tokens, 2);
    assert!((loss.mean() - 11f64.ln()).abs() < 1e-12);
    assert!((loss.sum / loss.tokens as f64 - loss.mean()).abs() < 1e-15);
}

#[test]
fn eval_mode_is_bit_identical() {
    let model = Model::<f64>::new(tiny_config(2, 6, 20, 0.3), 1).unwrap();
    let p = pair(&[4, 7, 9], &[5, 5, 8, 10]);
    let a = model.sequence_nll(&p, &mut Rng::new(1), false).unwrap();
    let b = model.sequence_nll(&p, &mut Rng::new(2), false).unwrap();
    assert_eq!(a.sum.to_bits(), b.sum.to_bits());
    assert_eq!(a.tokens, 5);
    let c = model.sequence_nll(&p, &mut Rng::new(1), true).unwrap();
    assert_ne!(a.sum, c.sum);
}

#[test]
fn padded_batch_loss_equals_sum_of_singles() {
    let model = Model::<f64>::new(tiny_config(2, 5, 16, 0.0), 4).unwrap();
    let pairs = [
        pair(&[4, 5, 6, 7], &[8]),
        pair(&[9], &[10, 11, 12]),
        pair(&[13, 14], &[15, 4]),
    ];
    let refs: Vec<_> = pairs.iter().collect();
    let mut g = model.graph();
    let (loss, tokens) = model
        .batch_loss(&mut g, &refs, &mut Rng::new(0), false)
        .unwrap();
    let singles: f64 = pairs
        .iter()
        .map(|p| model.sequence_nll(p, &mut Rng::new(0), false).unwrap().sum)
        .sum();
    assert_eq!(tokens, 2 + 4 + 3);
    assert!((g.value(loss).data()[0] - singles).abs() < 1e-10);
}

#[test]
fn loss_decreases_under_small_sgd_steps() {
    let mut model = Model::<f64>::new(tiny_config(1, 8, 20, 0.0), 9).unwrap();
    let p = pair(&[4, 8, 12], &[5, 9]);
    let mut prev = f64::INFINITY;
    for _ in 0..50 {
        let mut grads = Gradients::zeros_like(model.params.store());
        let value = {
            let mut g = model.graph();
            let (loss, _) = model
                .batch_loss(&mut g, &[&p], &mut Rng::new(0), false)
                .unwrap();
            g.backward(loss, &mut grads).unwrap();
            g.value(loss).data()[0]
        };
        assert!(value < prev, "{value} >= {prev}");
        prev = value;
        model.params.store_mut().sgd_step(&grads, 0.05);
    }
}

#[test]
fn model_file_round_trip() {
    let model = Model::<f64>::new(tiny_config(2, 3, 9, 0.25), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.model");
    model.save(&path).unwrap();
    let back = Model::<f64>::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.to_bytes(), model.to_bytes());
    assert_eq!(back.fingerprint(), model.fingerprint());
    let mut bytes = model.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(Model::<f64>::from_bytes(&bytes).is_err());
}

#[test]
fn f32_model_runs() {
    let model = Model::<f32>::new(tiny_config(1, 4, 10, 0.0), 1).unwrap();
    let loss = model
        .sequence_nll(&pair(&[4, 5], &[6, 7]), &mut Rng::new(0), false)
        .unwrap();
    assert!(loss.sum.is_finite() && loss.sum > 0.0);
}
