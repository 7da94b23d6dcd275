//! Beam-search decoding over a frozen model.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::config::KvConfig;
use crate::corpus::{TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::nmt::{EncoderStates, Model};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_rows, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnkPolicy {
    Allow,
    /// Never emit UNK; the next-best token takes its place.
    Suppress,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len_factor: f64,
    pub max_len_offset: usize,
    pub unk_policy: UnkPolicy,
    /// Rank by per-token log probability instead of the raw sum.
    pub normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len_factor: 2.0,
            max_len_offset: 5,
            unk_policy: UnkPolicy::Allow,
            normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self {
            beam_size: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || !(self.max_len_factor >= 0.0) {
            return Err(Error::Config(format!("invalid decode config {self:?}")));
        }
        Ok(())
    }

    /// Longest hypothesis (in tokens, EOS excluded) for a source of length `j`.
    pub fn max_len(&self, j: usize) -> usize {
        (self.max_len_factor * j as f64).ceil() as usize + self.max_len_offset
    }

    pub fn from_kv(cfg: &KvConfig, base: &DecodeConfig) -> Result<Self> {
        let unk_policy = match cfg.raw("unk_policy") {
            None => base.unk_policy,
            Some("allow") => UnkPolicy::Allow,
            Some("suppress") => UnkPolicy::Suppress,
            Some(other) => return Err(Error::Config(format!("unknown unk_policy {other}"))),
        };
        let out = Self {
            beam_size: cfg.get_or("beam_size", base.beam_size)?,
            max_len_factor: cfg.get_or("max_len_factor", base.max_len_factor)?,
            max_len_offset: cfg.get_or("max_len_offset", base.max_len_offset)?,
            unk_policy,
            normalize: cfg.get_or("normalize", base.normalize)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_kv(&self, prefix: &str, out: &mut KvConfig) {
        out.set(format!("{prefix}beam_size"), self.beam_size);
        out.set(format!("{prefix}max_len_factor"), self.max_len_factor);
        out.set(format!("{prefix}max_len_offset"), self.max_len_offset);
        let unk = match self.unk_policy {
            UnkPolicy::Allow => "allow",
            UnkPolicy::Suppress => "suppress",
        };
        out.set(format!("{prefix}unk_policy"), unk);
        out.set(format!("{prefix}normalize"), self.normalize);
    }

    /// Whether `token` may be emitted. PAD and BOS never are.
    pub fn emits(&self, token: usize) -> bool {
        token != PAD && token != BOS && !(token == UNK && self.unk_policy == UnkPolicy::Suppress)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Emitted ids, EOS excluded.
    pub tokens: TokenSequence,
    /// Sum of step log probabilities, including EOS when finished.
    pub score: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn rank(&self, normalize: bool) -> f64 {
        if normalize {
            self.score / (self.tokens.len() + usize::from(self.finished)).max(1) as f64
        } else {
            self.score
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: BeamHypothesis,
    /// Final beam contents, best first.
    pub nbest: Vec<BeamHypothesis>,
}

struct Entry {
    hyp: BeamHypothesis,
    /// Row in the decoder state batch (live entries only).
    row: usize,
}

pub fn beam_search<T: Scalar>(
    model: &Model<T>,
    src: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<BeamResult> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::EmptySource);
    }
    let mut g = model.graph();
    let mut rng = Rng::new(0);
    let enc = model.encode(&mut g, src, &mut rng, false)?;
    let mut state = model.initial_state(&mut g, &enc)?;
    let mut tiled: HashMap<usize, EncoderStates<T>> = HashMap::new();
    tiled.insert(1, enc.clone());

    let max_len = cfg.max_len(src.len());
    let mut beam = vec![Entry {
        hyp: BeamHypothesis {
            tokens: TokenSequence(Vec::new()),
            score: 0.0,
            finished: false,
        },
        row: 0,
    }];
    for _ in 0..max_len {
        let live: Vec<&Entry> = beam.iter().filter(|e| !e.hyp.finished).collect();
        if live.is_empty() {
            break;
        }
        let rows: Vec<usize> = live.iter().map(|e| e.row).collect();
        let prev: Vec<usize> = live
            .iter()
            .map(|e| e.hyp.tokens.0.last().copied().unwrap_or(BOS))
            .collect();
        let n = live.len();
        if !tiled.contains_key(&n) {
            let t = model.tile_encoder(&mut g, &enc, n)?;
            tiled.insert(n, t);
        }
        let step_state = if rows.iter().copied().eq(0..n) && n == g.value(state.input_feed).rows() {
            state.clone()
        } else {
            state.gather(&mut g, &rows)?
        };
        let out = model.decode_step(&mut g, &prev, &step_state, &tiled[&n], &mut rng, false)?;
        let logp = log_softmax_rows(g.value(out.logits));

        // Finished entries stay in the pool ahead of expansions so that ties
        // keep the frozen hypothesis.
        let mut pool: Vec<(BeamHypothesis, Option<(usize, usize)>)> = beam
            .iter()
            .filter(|e| e.hyp.finished)
            .map(|e| (e.hyp.clone(), None))
            .collect();
        for (r, e) in live.iter().enumerate() {
            for (v, &lp) in logp.row(r).iter().enumerate() {
                if !cfg.emits(v) {
                    continue;
                }
                let finished = v == EOS;
                let mut tokens = e.hyp.tokens.0.clone();
                if !finished {
                    tokens.push(v);
                }
                let hyp = BeamHypothesis {
                    tokens: TokenSequence(tokens),
                    score: e.hyp.score + lp.to_f64_lossy(),
                    finished,
                };
                pool.push((hyp, (!finished).then_some((r, v))));
            }
        }
        // stable: earlier rows and smaller ids win ties
        pool.sort_by(|a, b| b.0.rank(cfg.normalize).total_cmp(&a.0.rank(cfg.normalize)));
        pool.truncate(cfg.beam_size);

        beam = pool
            .into_iter()
            .map(|(hyp, src_row)| Entry {
                hyp,
                row: src_row.map_or(0, |(r, _)| r),
            })
            .collect();
        state = out.state;
        if !cfg.normalize && beam[0].hyp.finished {
            // scores only decrease, so no live entry can overtake the leader
            break;
        }
    }
    let nbest: Vec<BeamHypothesis> = beam.into_iter().map(|e| e.hyp).collect();
    let best = nbest
        .iter()
        .find(|h| h.finished)
        .unwrap_or(&nbest[0])
        .clone();
    Ok(BeamResult { best, nbest })
}

/// Step-wise argmax decoding (smallest id on ties), independent of the beam
/// bookkeeping.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    src: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<BeamHypothesis> {
    if src.is_empty() {
        return Err(Error::EmptySource);
    }
    let mut g = model.graph();
    let mut rng = Rng::new(0);
    let enc = model.encode(&mut g, src, &mut rng, false)?;
    let mut state = model.initial_state(&mut g, &enc)?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut prev = BOS;
    for _ in 0..cfg.max_len(src.len()) {
        let out = model.decode_step(&mut g, &[prev], &state, &enc, &mut rng, false)?;
        let logp = log_softmax_rows(g.value(out.logits));
        let mut best: Option<(usize, f64)> = None;
        for (v, &lp) in logp.row(0).iter().enumerate() {
            let lp = lp.to_f64_lossy();
            if cfg.emits(v) && best.map_or(true, |(_, b)| lp > b) {
                best = Some((v, lp));
            }
        }
        let (v, lp) = best.expect("at least EOS is emittable");
        score += lp;
        if v == EOS {
            return Ok(BeamHypothesis {
                tokens: TokenSequence(tokens),
                score,
                finished: true,
            });
        }
        tokens.push(v);
        prev = v;
        state = out.state;
    }
    Ok(BeamHypothesis {
        tokens: TokenSequence(tokens),
        score,
        finished: false,
    })
}

/// Outcome for one input sentence of [`translate_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub result: Option<BeamResult>,
    pub diagnostic: Option<String>,
}

impl Decoded {
    /// Best tokens, or an empty sequence when decoding failed.
    pub fn tokens(&self) -> TokenSequence {
        self.result
            .as_ref()
            .map_or_else(|| TokenSequence(Vec::new()), |r| r.best.tokens.clone())
    }
}

/// Decodes every source in parallel on the current rayon pool; output order
/// follows input order and failures are recorded per slot.
pub fn translate_corpus<T: Scalar>(
    model: &Model<T>,
    sources: &[TokenSequence],
    cfg: &DecodeConfig,
) -> Vec<Decoded> {
    sources
        .par_iter()
        .map(|src| match beam_search(model, src, cfg) {
            Ok(r) => Decoded {
                result: Some(r),
                diagnostic: None,
            },
            Err(e) => Decoded {
                result: None,
                diagnostic: Some(e.to_string()),
            },
        })
        .collect()
}

/// `index ||| hypothesis ||| score` lines for one sentence's n-best list.
pub fn format_nbest(
    index: usize,
    nbest: &[BeamHypothesis],
    vocab: &Vocabulary,
) -> Result<Vec<String>> {
    nbest
        .iter()
        .map(|h| {
            Ok(format!(
                "{index} ||| {} ||| {:.6}",
                vocab.decode(&h.tokens)?.join(" "),
                h.score
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_bound() {
        let cfg = DecodeConfig::default();
        assert_eq!(cfg.max_len(3), 11);
        assert_eq!(
            DecodeConfig {
                max_len_factor: 1.5,
                ..cfg
            }
            .max_len(3),
            10
        );
    }

    #[test]
    fn emission_policy() {
        let allow = DecodeConfig::default();
        assert!(!allow.emits(PAD) && !allow.emits(BOS));
        assert!(allow.emits(UNK) && allow.emits(EOS));
        let suppress = DecodeConfig {
            unk_policy: UnkPolicy::Suppress,
            ..allow
        };
        assert!(!suppress.emits(UNK));
    }

    #[test]
    fn rejects_zero_beam() {
        assert!(DecodeConfig {
            beam_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
