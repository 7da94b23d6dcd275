//! Attentional encoder-decoder: a stacked bidirectional LSTM encoder, a
//! stacked LSTM decoder with input feeding, bilinear ("general") attention,
//! and a softmax output layer.
//!
//! Batches are laid out step-major: per-position tensors are `B x width`, and
//! whole-sequence encoder tensors are `(J*B) x width` with row `j*B + b`.

use std::path::Path;

use crate::config::KvConfig;
use crate::corpus::{SentencePair, TokenSequence, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::scalar::Scalar;
use crate::tensor::{decode_records, encode_records, hex_digest};
use crate::tensor::{Graph, NodeId, ParamStore, Rng, Tensor};

const INIT_SCALE: f64 = 0.1;
const MASK_NEG: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_size: usize,
    pub embed_size: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_size: 64,
            embed_size: 64,
            src_vocab: 0,
            tgt_vocab: 0,
            dropout_p: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.layers,
            self.hidden_size,
            self.embed_size,
            self.src_vocab,
            self.tgt_vocab,
        ];
        if counts.contains(&0) || !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        Ok(())
    }

    /// Reads `layers`, `hidden_size`, `embed_size`, `src_vocab`, `tgt_vocab`,
    /// `dropout_p`, falling back to `base` for absent keys.
    pub fn from_kv(cfg: &KvConfig, base: &ModelConfig) -> Result<Self> {
        Ok(Self {
            layers: cfg.get_or("layers", base.layers)?,
            hidden_size: cfg.get_or("hidden_size", base.hidden_size)?,
            embed_size: cfg.get_or("embed_size", base.embed_size)?,
            src_vocab: cfg.get_or("src_vocab", base.src_vocab)?,
            tgt_vocab: cfg.get_or("tgt_vocab", base.tgt_vocab)?,
            dropout_p: cfg.get_or("dropout_p", base.dropout_p)?,
        })
    }

    pub fn to_kv(&self, prefix: &str, out: &mut KvConfig) {
        out.set(format!("{prefix}layers"), self.layers);
        out.set(format!("{prefix}hidden_size"), self.hidden_size);
        out.set(format!("{prefix}embed_size"), self.embed_size);
        out.set(format!("{prefix}src_vocab"), self.src_vocab);
        out.set(format!("{prefix}tgt_vocab"), self.tgt_vocab);
        out.set(format!("{prefix}dropout_p"), self.dropout_p);
    }

    fn records(&self) -> Vec<(String, f64)> {
        vec![
            ("config.layers".into(), self.layers as f64),
            ("config.hidden_size".into(), self.hidden_size as f64),
            ("config.embed_size".into(), self.embed_size as f64),
            ("config.src_vocab".into(), self.src_vocab as f64),
            ("config.tgt_vocab".into(), self.tgt_vocab as f64),
            ("config.dropout_p".into(), self.dropout_p),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Lstm {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    src_embed: usize,
    tgt_embed: usize,
    enc: Vec<[Lstm; 2]>,
    dec: Vec<Lstm>,
    attn: usize,
    attn_out: usize,
    out_w: usize,
    out_b: usize,
}

/// Learnable weights plus the index layout the forward pass uses.
///
/// LSTM weights are `(input + hidden) x 4*hidden` with gate blocks ordered
/// input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    store: ParamStore<T>,
    layout: Layout,
}

fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, e) = (cfg.hidden_size, cfg.embed_size);
    let mut shapes = vec![
        ("src_embed".to_string(), vec![cfg.src_vocab, e]),
        ("tgt_embed".to_string(), vec![cfg.tgt_vocab, e]),
    ];
    for l in 0..cfg.layers {
        let input = if l == 0 { e } else { 2 * h };
        for dir in ["fwd", "bwd"] {
            shapes.push((format!("enc.l{l}.{dir}.w"), vec![input + h, 4 * h]));
            shapes.push((format!("enc.l{l}.{dir}.b"), vec![1, 4 * h]));
        }
    }
    for l in 0..cfg.layers {
        let input = if l == 0 { e + h } else { h };
        shapes.push((format!("dec.l{l}.w"), vec![input + h, 4 * h]));
        shapes.push((format!("dec.l{l}.b"), vec![1, 4 * h]));
    }
    shapes.push(("attn.w".into(), vec![2 * h, h]));
    shapes.push(("attn.out.w".into(), vec![3 * h, h]));
    shapes.push(("out.w".into(), vec![h, cfg.tgt_vocab]));
    shapes.push(("out.b".into(), vec![1, cfg.tgt_vocab]));
    shapes
}

impl<T: Scalar> ModelParams<T> {
    /// Every weight uniform in `[-0.1, 0.1)`.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        for (name, shape) in param_shapes(cfg) {
            store.insert(name, Tensor::uniform(&shape, -INIT_SCALE, INIT_SCALE, rng));
        }
        Self::from_store(cfg, store)
    }

    /// Wraps an existing store after checking every block against `cfg`.
    pub fn from_store(cfg: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        for (name, shape) in param_shapes(cfg) {
            let t = store
                .get(&name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load parameter",
                    left: t.shape().to_vec(),
                    right: shape,
                });
            }
        }
        let id = |n: &str| store.index_of(n).expect("checked above");
        let layout = Layout {
            src_embed: id("src_embed"),
            tgt_embed: id("tgt_embed"),
            enc: (0..cfg.layers)
                .map(|l| {
                    ["fwd", "bwd"].map(|d| Lstm {
                        w: id(&format!("enc.l{l}.{d}.w")),
                        b: id(&format!("enc.l{l}.{d}.b")),
                    })
                })
                .collect(),
            dec: (0..cfg.layers)
                .map(|l| Lstm {
                    w: id(&format!("dec.l{l}.w")),
                    b: id(&format!("dec.l{l}.b")),
                })
                .collect(),
            attn: id("attn.w"),
            attn_out: id("attn.out.w"),
            out_w: id("out.w"),
            out_b: id("out.b"),
        };
        Ok(Self { store, layout })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}

/// Encoder output for a batch, as handles into the graph that produced it.
#[derive(Clone, Debug)]
pub struct EncoderStates<T> {
    /// Top-layer forward states per position, each `B x H`.
    pub forward: Vec<NodeId>,
    /// Top-layer backward states per position, each `B x H`.
    pub backward: Vec<NodeId>,
    /// Concatenated top-layer states, `(J*B) x 2H`.
    pub combined: NodeId,
    /// `combined` projected by the attention matrix, `(J*B) x H`.
    pub keys: NodeId,
    /// Final `(h, c)` of each layer: forward after the last token, backward
    /// after the first.
    pub finals: Vec<[(NodeId, NodeId); 2]>,
    /// Additive attention mask `B x J` (0 or a large negative), if padded.
    pub mask: Option<Tensor<T>>,
    pub batch: usize,
    pub len: usize,
}

/// Decoder recurrent state for a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    /// `(h, c)` per layer, each `B x H`.
    pub layers: Vec<(NodeId, NodeId)>,
    /// Previous attentional vector, `B x H`.
    pub input_feed: NodeId,
}

impl DecoderState {
    /// Selects rows (beam reordering).
    pub fn gather<T: Scalar>(&self, g: &mut Graph<'_, T>, rows: &[usize]) -> Result<DecoderState> {
        let layers = self
            .layers
            .iter()
            .map(|&(h, c)| Ok((g.gather_rows(h, rows)?, g.gather_rows(c, rows)?)))
            .collect::<Result<_>>()?;
        Ok(DecoderState {
            layers,
            input_feed: g.gather_rows(self.input_feed, rows)?,
        })
    }
}

pub struct StepOutput {
    pub logits: NodeId,
    pub attention: NodeId,
    pub state: DecoderState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceLoss {
    pub sum: f64,
    pub tokens: usize,
}

impl SequenceLoss {
    pub fn mean(&self) -> f64 {
        self.sum / self.tokens as f64
    }
}

/// One LSTM step. `w` is `(in + H) x 4H`, `b` is `1 x 4H`.
pub fn lstm_cell<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    state: (NodeId, NodeId),
    w: NodeId,
    b: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (h, c) = (state.0, state.1);
    let hidden = g.value(h).cols();
    if g.value(w).cols() != 4 * hidden || g.value(w).rows() != g.value(x).cols() + hidden {
        return Err(Error::Shape {
            op: "lstm_cell",
            left: g.value(w).shape().to_vec(),
            right: vec![g.value(x).cols() + hidden, 4 * hidden],
        });
    }
    let xh = g.concat_cols(&[x, h])?;
    let z = g.matmul(xh, w)?;
    let z = g.add_row(z, b)?;
    let i = g.slice_cols(z, 0, hidden)?;
    let f = g.slice_cols(z, hidden, 2 * hidden)?;
    let cand = g.slice_cols(z, 2 * hidden, 3 * hidden)?;
    let o = g.slice_cols(z, 3 * hidden, 4 * hidden)?;
    let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
    let cand = g.tanh(cand);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c2 = g.add(keep, write)?;
    let tc = g.tanh(c2);
    let h2 = g.mul(o, tc)?;
    Ok((h2, c2))
}

/// The translation model: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let params = ModelParams::init(&config, &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.params.store)
    }

    fn check_ids(ids: &[usize], size: usize) -> Result<()> {
        match ids.iter().find(|&&id| id >= size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size }),
            None => Ok(()),
        }
    }

    /// Encodes a batch of source sentences (any lengths >= 1).
    pub fn encode_batch(
        &self,
        g: &mut Graph<'_, T>,
        sources: &[&[usize]],
        rng: &mut Rng,
        training: bool,
    ) -> Result<EncoderStates<T>> {
        if sources.is_empty() || sources.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptySource);
        }
        for s in sources {
            Self::check_ids(s, self.config.src_vocab)?;
        }
        let cfg = &self.config;
        let lay = &self.params.layout;
        let (batch, hidden) = (sources.len(), cfg.hidden_size);
        let len = sources.iter().map(|s| s.len()).max().unwrap();
        let padded = sources.iter().any(|s| s.len() != len);
        let masks: Vec<Vec<T>> = (0..len)
            .map(|t| {
                sources
                    .iter()
                    .map(|s| if t < s.len() { T::one() } else { T::zero() })
                    .collect()
            })
            .collect();

        let embed = g.param(lay.src_embed);
        let mut inputs = Vec::with_capacity(len);
        for t in 0..len {
            let ids: Vec<usize> = sources
                .iter()
                .map(|s| s.get(t).copied().unwrap_or(PAD))
                .collect();
            inputs.push(g.gather_rows(embed, &ids)?);
        }

        let zeros = g.constant(Tensor::zeros(&[batch, hidden]));
        let mut finals = Vec::with_capacity(cfg.layers);
        let mut fwd_states = Vec::new();
        let mut bwd_states = Vec::new();
        for (l, cells) in lay.enc.iter().enumerate() {
            if l > 0 {
                for x in inputs.iter_mut() {
                    *x = g.dropout(*x, cfg.dropout_p, rng, training);
                }
            }
            let run = |g: &mut Graph<'_, T>,
                       cell: Lstm,
                       order: &mut dyn Iterator<Item = usize>|
             -> Result<(Vec<NodeId>, (NodeId, NodeId))> {
                let (w, b) = (g.param(cell.w), g.param(cell.b));
                let mut out = vec![zeros; len];
                let mut state = (zeros, zeros);
                for t in order {
                    let (h, c) = lstm_cell(g, inputs[t], state, w, b)?;
                    state = if padded {
                        (
                            g.blend(h, state.0, &masks[t])?,
                            g.blend(c, state.1, &masks[t])?,
                        )
                    } else {
                        (h, c)
                    };
                    out[t] = state.0;
                }
                Ok((out, state))
            };
            let (fwd, fwd_final) = run(g, cells[0], &mut (0..len))?;
            let (bwd, bwd_final) = run(g, cells[1], &mut (0..len).rev())?;
            finals.push([fwd_final, bwd_final]);
            inputs = fwd
                .iter()
                .zip(&bwd)
                .map(|(&f, &b)| g.concat_cols(&[f, b]))
                .collect::<Result<_>>()?;
            fwd_states = fwd;
            bwd_states = bwd;
        }
        let combined = g.concat_rows(&inputs)?;
        let attn = g.param(lay.attn);
        let keys = g.matmul(combined, attn)?;
        let mask = padded.then(|| {
            let data = (0..batch)
                .flat_map(|b| {
                    let n = sources[b].len();
                    (0..len).map(move |t| if t < n { T::zero() } else { T::lit(MASK_NEG) })
                })
                .collect();
            Tensor::from_parts(vec![batch, len], data)
        });
        Ok(EncoderStates {
            forward: fwd_states,
            backward: bwd_states,
            combined,
            keys,
            finals,
            mask,
            batch,
            len,
        })
    }

    pub fn encode(
        &self,
        g: &mut Graph<'_, T>,
        src: &TokenSequence,
        rng: &mut Rng,
        training: bool,
    ) -> Result<EncoderStates<T>> {
        self.encode_batch(g, &[src.ids()], rng, training)
    }

    /// Repeats a single-sentence encoding `rows` times (for beam rows).
    pub fn tile_encoder(
        &self,
        g: &mut Graph<'_, T>,
        enc: &EncoderStates<T>,
        rows: usize,
    ) -> Result<EncoderStates<T>> {
        if enc.batch != 1 {
            return Err(Error::Config(
                "only single-sentence encodings can be tiled".into(),
            ));
        }
        let idx: Vec<usize> = (0..enc.len)
            .flat_map(|j| std::iter::repeat(j).take(rows))
            .collect();
        Ok(EncoderStates {
            forward: enc.forward.clone(),
            backward: enc.backward.clone(),
            combined: g.gather_rows(enc.combined, &idx)?,
            keys: g.gather_rows(enc.keys, &idx)?,
            finals: enc.finals.clone(),
            mask: None,
            batch: rows,
            len: enc.len,
        })
    }

    /// Decoder start state: per layer, `tanh(forward_final + backward_final)`
    /// for both `h` and `c`; zero input feed.
    pub fn initial_state(
        &self,
        g: &mut Graph<'_, T>,
        enc: &EncoderStates<T>,
    ) -> Result<DecoderState> {
        let layers = enc
            .finals
            .iter()
            .map(|[(fh, fc), (bh, bc)]| {
                let h = g.add(*fh, *bh)?;
                let c = g.add(*fc, *bc)?;
                Ok((g.tanh(h), g.tanh(c)))
            })
            .collect::<Result<_>>()?;
        let input_feed = g.constant(Tensor::zeros(&[enc.batch, self.config.hidden_size]));
        Ok(DecoderState { layers, input_feed })
    }

    /// Bilinear attention: `score_j = h . W_a^T combined_j` (via the
    /// precomputed keys), softmax over positions, context = weighted sum of
    /// combined states. Returns `(context B x 2H, weights B x J)`.
    pub fn attention(
        &self,
        g: &mut Graph<'_, T>,
        query: NodeId,
        enc: &EncoderStates<T>,
    ) -> Result<(NodeId, NodeId)> {
        let mut scores = g.step_scores(query, enc.keys)?;
        if let Some(mask) = &enc.mask {
            scores = g.add_const(scores, mask)?;
        }
        let weights = g.softmax(scores);
        let context = g.step_weighted(weights, enc.combined)?;
        Ok((context, weights))
    }

    /// Runs the decoder stack for one step and returns the attentional vector
    /// `tanh([c_i; h_i] W_c)` together with the attention weights and new state.
    fn decode_hidden(
        &self,
        g: &mut Graph<'_, T>,
        prev_ids: &[usize],
        state: &DecoderState,
        enc: &EncoderStates<T>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(NodeId, NodeId, DecoderState)> {
        Self::check_ids(prev_ids, self.config.tgt_vocab)?;
        if prev_ids.len() != enc.batch || state.layers.len() != self.config.layers {
            return Err(Error::Shape {
                op: "decode_step",
                left: vec![prev_ids.len(), state.layers.len()],
                right: vec![enc.batch, self.config.layers],
            });
        }
        let lay = &self.params.layout;
        let embed = g.param(lay.tgt_embed);
        let emb = g.gather_rows(embed, prev_ids)?;
        let mut x = g.concat_cols(&[emb, state.input_feed])?;
        let mut layers = Vec::with_capacity(self.config.layers);
        for (l, cell) in lay.dec.iter().enumerate() {
            if l > 0 {
                x = g.dropout(x, self.config.dropout_p, rng, training);
            }
            let (w, b) = (g.param(cell.w), g.param(cell.b));
            let (h, c) = lstm_cell(g, x, state.layers[l], w, b)?;
            layers.push((h, c));
            x = h;
        }
        let (context, weights) = self.attention(g, x, enc)?;
        let joined = g.concat_cols(&[context, x])?;
        let wc = g.param(lay.attn_out);
        let proj = g.matmul(joined, wc)?;
        let attn_vec = g.tanh(proj);
        Ok((
            attn_vec,
            weights,
            DecoderState {
                layers,
                input_feed: attn_vec,
            },
        ))
    }

    fn project(
        &self,
        g: &mut Graph<'_, T>,
        attn_vec: NodeId,
        rng: &mut Rng,
        training: bool,
    ) -> Result<NodeId> {
        let lay = &self.params.layout;
        let x = g.dropout(attn_vec, self.config.dropout_p, rng, training);
        let (w, b) = (g.param(lay.out_w), g.param(lay.out_b));
        let logits = g.matmul(x, w)?;
        g.add_row(logits, b)
    }

    /// One decoder step for a batch of rows: embeds `prev_ids`, feeds the
    /// previous attentional vector, runs the LSTM stack, attends, and projects
    /// to target-vocabulary logits.
    pub fn decode_step(
        &self,
        g: &mut Graph<'_, T>,
        prev_ids: &[usize],
        state: &DecoderState,
        enc: &EncoderStates<T>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<StepOutput> {
        let (attn_vec, attention, state) =
            self.decode_hidden(g, prev_ids, state, enc, rng, training)?;
        let logits = self.project(g, attn_vec, rng, training)?;
        Ok(StepOutput {
            logits,
            attention,
            state,
        })
    }

    /// Teacher-forced summed NLL of a batch (targets end with EOS, PAD
    /// positions masked). Returns the loss node and the token count.
    pub fn batch_loss(
        &self,
        g: &mut Graph<'_, T>,
        pairs: &[&SentencePair],
        rng: &mut Rng,
        training: bool,
    ) -> Result<(NodeId, usize)> {
        if pairs.iter().any(|p| p.target.is_empty()) {
            return Err(Error::EmptyCorpus("target sentence"));
        }
        let sources: Vec<&[usize]> = pairs.iter().map(|p| p.source.ids()).collect();
        let enc = self.encode_batch(g, &sources, rng, training)?;
        let mut state = self.initial_state(g, &enc)?;
        let steps = pairs.iter().map(|p| p.target.len()).max().unwrap() + 1;
        let mut outputs = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * pairs.len());
        for s in 0..steps {
            let prev: Vec<usize> = pairs
                .iter()
                .map(|p| match s {
                    0 => BOS,
                    s if s <= p.target.len() => p.target.ids()[s - 1],
                    _ => PAD,
                })
                .collect();
            targets.extend(pairs.iter().map(|p| {
                let t = p.target.ids();
                match s.cmp(&t.len()) {
                    std::cmp::Ordering::Less => Some(t[s]),
                    std::cmp::Ordering::Equal => Some(EOS),
                    std::cmp::Ordering::Greater => None,
                }
            }));
            let (attn_vec, _, next) = self.decode_hidden(g, &prev, &state, &enc, rng, training)?;
            outputs.push(attn_vec);
            state = next;
        }
        let all = g.concat_rows(&outputs)?;
        let logits = self.project(g, all, rng, training)?;
        let tokens = targets.iter().flatten().count();
        Ok((g.cross_entropy(logits, &targets)?, tokens))
    }

    /// Teacher-forced loss of one pair (sum over `I + 1` predictions).
    pub fn sequence_nll(
        &self,
        pair: &SentencePair,
        rng: &mut Rng,
        training: bool,
    ) -> Result<SequenceLoss> {
        let mut g = self.graph();
        let (loss, tokens) = self.batch_loss(&mut g, &[pair], rng, training)?;
        Ok(SequenceLoss {
            sum: g.value(loss).data()[0].to_f64_lossy(),
            tokens,
        })
    }

    /// Log probability of `target` (plus EOS) given `source`, in eval mode.
    pub fn score(&self, source: &TokenSequence, target: &TokenSequence) -> Result<f64> {
        let pair = SentencePair {
            source: source.clone(),
            target: target.clone(),
        };
        if target.is_empty() {
            // only the EOS prediction
            let mut g = self.graph();
            let mut rng = Rng::new(0);
            let enc = self.encode(&mut g, source, &mut rng, false)?;
            let state = self.initial_state(&mut g, &enc)?;
            let step = self.decode_step(&mut g, &[BOS], &state, &enc, &mut rng, false)?;
            let loss = g.cross_entropy(step.logits, &[Some(EOS)])?;
            return Ok(-g.value(loss).data()[0].to_f64_lossy());
        }
        Ok(-self.sequence_nll(&pair, &mut Rng::new(0), false)?.sum)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config: Vec<(String, Tensor<T>)> = self
            .config
            .records()
            .into_iter()
            .map(|(n, v)| (n, Tensor::from_parts(vec![1], vec![T::lit(v)])))
            .collect();
        encode_records(
            config
                .iter()
                .map(|(n, t)| (n.as_str(), t))
                .chain(self.params.store.iter()),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let records = decode_records::<T>(bytes)?;
        let mut store = ParamStore::new();
        let mut cfg = KvConfig::new();
        for (name, t) in records {
            match name.strip_prefix("config.") {
                Some(key) => cfg.set(key, t.data()[0].to_f64_lossy()),
                None => {
                    store.insert(name, t);
                }
            }
        }
        let int = |key: &str| -> Result<usize> {
            let v: f64 = cfg
                .get(key)?
                .ok_or_else(|| Error::format("model file", format!("missing config.{key}")))?;
            Ok(v as usize)
        };
        let config = ModelConfig {
            layers: int("layers")?,
            hidden_size: int("hidden_size")?,
            embed_size: int("embed_size")?,
            src_vocab: int("src_vocab")?,
            tgt_vocab: int("tgt_vocab")?,
            dropout_p: cfg.get("dropout_p")?.unwrap_or(0.0),
        };
        let params = ModelParams::from_store(&config, store)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Content hash of the serialized model.
    pub fn fingerprint(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}
