#![allow(dead_code)]

pub mod oracle;

use nmt_simplify::corpus::{SentencePair, TokenSequence};
use nmt_simplify::nmt::{Model, ModelConfig};
use nmt_simplify::tensor::{Gradients, Graph, NodeId, Rng, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)` over whole blocks, 0 when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Builds `sum(weights * f(inputs))` for random fixed weights and compares
/// the gradient w.r.t. every input against central differences. Returns the
/// worst relative error.
pub fn check_op(
    inputs: &[Tensor<f64>],
    seed: u64,
    f: impl Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let loss = |ins: &[Tensor<f64>]| -> (f64, Vec<Option<Tensor<f64>>>, Vec<NodeId>) {
        let mut g = Graph::detached();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &ids);
        let mut wrng = Rng::new(seed ^ 0x5eed);
        let w = Tensor::uniform(g.value(out).shape(), -1.0, 1.0, &mut wrng);
        let w = g.constant(w);
        let prod = g.mul(out, w).unwrap();
        let l = g.sum(prod);
        let grads = g.backward_nodes(l).unwrap();
        (g.value(l).data()[0], grads, ids)
    };
    let (_, grads, ids) = loss(inputs);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads[ids[k].index()]
            .clone()
            .map_or(vec![0.0; input.len()], |t| t.to_f64());
        let mut numeric = Vec::with_capacity(input.len());
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            numeric.push((loss(&plus).0 - loss(&minus).0) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

pub fn tiny_config(layers: usize, hidden: usize, vocab: usize, dropout_p: f64) -> ModelConfig {
    ModelConfig {
        layers,
        hidden_size: hidden,
        embed_size: hidden,
        src_vocab: vocab,
        tgt_vocab: vocab,
        dropout_p,
    }
}

pub fn random_sentence(rng: &mut Rng, len: usize, vocab: usize) -> TokenSequence {
    TokenSequence((0..len).map(|_| 4 + rng.below(vocab - 4)).collect())
}

pub fn pair(source: &[usize], target: &[usize]) -> SentencePair {
    SentencePair {
        source: TokenSequence(source.to_vec()),
        target: TokenSequence(target.to_vec()),
    }
}

/// Worst per-block relative error of the mean batch loss gradient, with
/// dropout (if any) driven by the same seed on every evaluation.
pub fn check_model(
    model: &Model<f64>,
    pairs: &[SentencePair],
    training: bool,
) -> Vec<(String, f64)> {
    let refs: Vec<&SentencePair> = pairs.iter().collect();
    let eval = |m: &Model<f64>, grads: Option<&mut Gradients<f64>>| -> f64 {
        let mut g = m.graph();
        let mut rng = Rng::new(99);
        let (loss, _) = m.batch_loss(&mut g, &refs, &mut rng, training).unwrap();
        if let Some(gr) = grads {
            g.backward(loss, gr).unwrap();
        }
        g.value(loss).data()[0]
    };
    let store = model.params.store();
    let mut grads = Gradients::zeros_like(store);
    eval(model, Some(&mut grads));
    let mut report = Vec::new();
    for idx in 0..store.len() {
        let mut numeric = Vec::with_capacity(store.tensor(idx).len());
        for e in 0..store.tensor(idx).len() {
            let mut m = model.clone();
            m.params.store_mut().tensor_mut(idx).data_mut()[e] += FD_STEP;
            let up = eval(&m, None);
            m.params.store_mut().tensor_mut(idx).data_mut()[e] -= 2.0 * FD_STEP;
            let down = eval(&m, None);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        report.push((
            store.name(idx).to_string(),
            rel_error(&grads.get(idx).to_f64(), &numeric),
        ));
    }
    report
}

/// Evaluated at a generic random parameter point: at the ±0.1 init the
/// attention matrix gradient is ~1e-7, below what central differences on an
/// O(10) loss can resolve in f64.
pub fn random_point_model(
    layers: usize,
    hidden: usize,
    vocab: usize,
    dropout_p: f64,
    seed: u64,
) -> Model<f64> {
    let mut model = Model::<f64>::new(tiny_config(layers, hidden, vocab, dropout_p), seed).unwrap();
    for idx in 0..model.params.store().len() {
        model.params.store_mut().tensor_mut(idx).scale(5.0);
    }
    model
}

/// Random tiny models sharp enough that EOS competes early.
pub fn random_case(i: u64) -> (Model<f64>, TokenSequence) {
    let vocab = 8 + (i as usize % 5);
    let model = random_point_model(1 + (i as usize % 2), 4 + (i as usize % 3), vocab, 0.0, i);
    let mut rng = Rng::new(500 + i);
    let len = 1 + rng.below(5);
    (model, random_sentence(&mut rng, len, vocab))
}
