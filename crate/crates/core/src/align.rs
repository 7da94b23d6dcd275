//! EM word alignment (IBM Model 1, then a diagonal-prior Model 2) and the
//! crossed-link statistics computed from its Viterbi alignments.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::KvConfig;
use crate::corpus::{ParallelCorpus, SentencePair};
use crate::error::{Error, Result};
use crate::metrics::{Curve, Histogram};

/// Source key of the empty word.
pub const NULL: usize = usize::MAX;

const CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignerConfig {
    pub iters_m1: usize,
    pub iters_m2: usize,
    /// Diagonal tension; 0 makes the Model 2 prior uniform.
    pub lambda: f64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            iters_m1: 5,
            iters_m2: 5,
            lambda: 4.0,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters_m1 == 0 || !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("invalid aligner config {self:?}")));
        }
        Ok(())
    }

    pub fn from_kv(cfg: &KvConfig, base: &AlignerConfig) -> Result<Self> {
        let out = Self {
            iters_m1: cfg.get_or("iters_m1", base.iters_m1)?,
            iters_m2: cfg.get_or("iters_m2", base.iters_m2)?,
            lambda: cfg.get_or("lambda", base.lambda)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_kv(&self, prefix: &str, out: &mut KvConfig) {
        out.set(format!("{prefix}iters_m1"), self.iters_m1);
        out.set(format!("{prefix}iters_m2"), self.iters_m2);
        out.set(format!("{prefix}lambda"), self.lambda);
    }
}

/// Unnormalized diagonal prior `exp(-lambda |(i+1)/J - (j+1)/I|)` for source
/// position `i` and target position `j` (0-based); the empty word weighs 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distortion {
    pub lambda: f64,
}

impl Distortion {
    pub const UNIFORM: Distortion = Distortion { lambda: 0.0 };

    pub fn weight(&self, i: usize, j: usize, src_len: usize, tgt_len: usize) -> f64 {
        if self.lambda == 0.0 {
            return 1.0;
        }
        let d = (i + 1) as f64 / src_len as f64 - (j + 1) as f64 / tgt_len as f64;
        (-self.lambda * d.abs()).exp()
    }
}

/// Lexical probabilities `t(f | e)` over co-occurring token pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationTable {
    index: HashMap<(usize, usize), usize>,
    /// `(e, f)` per slot, sorted, so each source token's row is contiguous.
    keys: Vec<(usize, usize)>,
    probs: Vec<f64>,
}

impl TranslationTable {
    /// Uniform rows over the targets each source token co-occurs with.
    fn uniform(corpus: &ParallelCorpus) -> Self {
        let mut set = BTreeSet::new();
        for p in &corpus.pairs {
            for &f in p.target.ids() {
                set.insert((NULL, f));
                for &e in p.source.ids() {
                    set.insert((e, f));
                }
            }
        }
        let keys: Vec<(usize, usize)> = set.into_iter().collect();
        let index = keys.iter().enumerate().map(|(s, &k)| (k, s)).collect();
        let mut table = Self {
            index,
            probs: vec![1.0; keys.len()],
            keys,
        };
        table.normalize(None);
        table
    }

    /// `t(f | e)`, 0 for pairs never seen together.
    pub fn prob(&self, e: usize, f: usize) -> f64 {
        self.index.get(&(e, f)).map_or(0.0, |&s| self.probs[s])
    }

    /// `(f, t(f|e))` for one source token, ascending by `f`.
    pub fn row(&self, e: usize) -> Vec<(usize, f64)> {
        let start = self.keys.partition_point(|&(k, _)| k < e);
        self.keys[start..]
            .iter()
            .take_while(|&&(k, _)| k == e)
            .enumerate()
            .map(|(o, &(_, f))| (f, self.probs[start + o]))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Rescales each source row to sum to one. With `counts`, the counts
    /// replace the probabilities first (rows without mass keep their values).
    fn normalize(&mut self, counts: Option<&[f64]>) {
        let mut start = 0;
        while start < self.keys.len() {
            let e = self.keys[start].0;
            let end = start + self.keys[start..].iter().take_while(|k| k.0 == e).count();
            let source = counts.map_or(&self.probs[start..end], |c| &c[start..end]);
            let z: f64 = source.iter().sum();
            if z > 0.0 {
                let row: Vec<f64> = source.iter().map(|c| c / z).collect();
                self.probs[start..end].copy_from_slice(&row);
            }
            start = end;
        }
    }

    fn slot(&self, e: usize, f: usize) -> usize {
        self.index[&(e, f)]
    }
}

/// A trained aligner and its per-iteration corpus log-likelihood.
#[derive(Clone, Debug)]
pub struct Aligner {
    pub table: TranslationTable,
    pub distortion: Distortion,
    /// Log-likelihood of the corpus under the parameters entering each
    /// iteration (Model 1 iterations first).
    pub log_likelihood: Vec<f64>,
}

/// Per-pair slot indices: `slots[j * (J + 1) + i]`, with `i == J` the empty word.
struct PairSlots {
    src_len: usize,
    tgt_len: usize,
    slots: Vec<usize>,
}

fn pair_slots(table: &TranslationTable, p: &SentencePair) -> PairSlots {
    let (src, tgt) = (p.source.ids(), p.target.ids());
    let mut slots = Vec::with_capacity(tgt.len() * (src.len() + 1));
    for &f in tgt {
        slots.extend(src.iter().map(|&e| table.slot(e, f)));
        slots.push(table.slot(NULL, f));
    }
    PairSlots {
        src_len: src.len(),
        tgt_len: tgt.len(),
        slots,
    }
}

/// Expected counts and log-likelihood contribution of a run of pairs.
fn e_step(
    pairs: &[PairSlots],
    probs: &[f64],
    dist: Distortion,
    counts_len: usize,
) -> (Vec<f64>, f64) {
    let mut counts = vec![0.0; counts_len];
    let mut ll = 0.0;
    let mut post = Vec::new();
    for p in pairs {
        let width = p.src_len + 1;
        let prior_z: Vec<f64> = (0..p.tgt_len)
            .map(|j| {
                1.0 + (0..p.src_len)
                    .map(|i| dist.weight(i, j, p.src_len, p.tgt_len))
                    .sum::<f64>()
            })
            .collect();
        for j in 0..p.tgt_len {
            let row = &p.slots[j * width..(j + 1) * width];
            post.clear();
            post.extend(row.iter().enumerate().map(|(i, &s)| {
                let d = if i == p.src_len {
                    1.0
                } else {
                    dist.weight(i, j, p.src_len, p.tgt_len)
                };
                probs[s] * d
            }));
            let z: f64 = post.iter().sum();
            ll += (z / prior_z[j]).ln();
            if z > 0.0 {
                for (&s, &w) in row.iter().zip(&post) {
                    counts[s] += w / z;
                }
            }
        }
    }
    (counts, ll)
}

/// Runs `iters_m1` Model 1 iterations from a uniform table, then `iters_m2`
/// diagonal-prior iterations.
pub fn train_aligner(corpus: &ParallelCorpus, cfg: &AlignerConfig) -> Result<Aligner> {
    cfg.validate()?;
    let pairs: Vec<&SentencePair> = corpus
        .pairs
        .iter()
        .filter(|p| !p.source.is_empty() && !p.target.is_empty())
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus("aligner training corpus"));
    }
    let mut table = TranslationTable::uniform(corpus);
    let slots: Vec<PairSlots> = pairs.iter().map(|p| pair_slots(&table, p)).collect();
    let mut log_likelihood = Vec::with_capacity(cfg.iters_m1 + cfg.iters_m2);
    let schedule = std::iter::repeat(Distortion::UNIFORM)
        .take(cfg.iters_m1)
        .chain(std::iter::repeat(Distortion { lambda: cfg.lambda }).take(cfg.iters_m2));
    for dist in schedule {
        let n = table.len();
        let partial: Vec<(Vec<f64>, f64)> = slots
            .par_chunks(CHUNK)
            .map(|chunk| e_step(chunk, &table.probs, dist, n))
            .collect();
        // fixed merge order keeps results independent of the thread count
        let mut counts = vec![0.0; n];
        let mut ll = 0.0;
        for (c, l) in partial {
            for (acc, v) in counts.iter_mut().zip(c) {
                *acc += v;
            }
            ll += l;
        }
        log_likelihood.push(ll);
        table.normalize(Some(&counts));
    }
    let distortion = if cfg.iters_m2 > 0 {
        Distortion { lambda: cfg.lambda }
    } else {
        Distortion::UNIFORM
    };
    Ok(Aligner {
        table,
        distortion,
        log_likelihood,
    })
}

/// Source-to-target links of one sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentLinkSet {
    /// `(i, j)` sorted by `j`, then `i`.
    links: Vec<(usize, usize)>,
    pub src_len: usize,
    pub tgt_len: usize,
}

impl AlignmentLinkSet {
    pub fn new(mut links: Vec<(usize, usize)>, src_len: usize, tgt_len: usize) -> Result<Self> {
        links.sort_by_key(|&(i, j)| (j, i));
        if let Some(&(i, j)) = links.iter().find(|&&(i, j)| i >= src_len || j >= tgt_len) {
            return Err(Error::format(
                "alignment",
                format!("link {i}-{j} outside {src_len}x{tgt_len}"),
            ));
        }
        if links.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::format("alignment", "duplicate link"));
        }
        Ok(Self {
            links,
            src_len,
            tgt_len,
        })
    }

    pub fn links(&self) -> &[(usize, usize)] {
        &self.links
    }

    /// Parses space-separated `i-j` tokens.
    pub fn parse(line: &str, src_len: usize, tgt_len: usize) -> Result<Self> {
        let links = line
            .split_whitespace()
            .map(|tok| {
                let (i, j) = tok
                    .split_once('-')
                    .ok_or_else(|| Error::format("alignment", format!("bad link {tok}")))?;
                let num = |s: &str| {
                    usize::from_str(s)
                        .map_err(|_| Error::format("alignment", format!("bad link {tok}")))
                };
                Ok((num(i)?, num(j)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(links, src_len, tgt_len)
    }
}

impl fmt::Display for AlignmentLinkSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (i, j)) in self.links.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{i}-{j}")?;
        }
        Ok(())
    }
}

/// Links each target word to its most probable source word, or to nothing
/// when the empty word wins outright. Ties go to the smaller source index.
pub fn viterbi_align(pair: &SentencePair, aligner: &Aligner) -> AlignmentLinkSet {
    let (src, tgt) = (pair.source.ids(), pair.target.ids());
    let mut links = Vec::new();
    for (j, &f) in tgt.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, &e) in src.iter().enumerate() {
            let s =
                aligner.table.prob(e, f) * aligner.distortion.weight(i, j, src.len(), tgt.len());
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let null = aligner.table.prob(NULL, f);
        match best {
            Some((i, s)) if s >= null => links.push((i, j)),
            _ => {}
        }
    }
    AlignmentLinkSet {
        links,
        src_len: src.len(),
        tgt_len: tgt.len(),
    }
}

pub fn align_corpus(corpus: &ParallelCorpus, aligner: &Aligner) -> Vec<AlignmentLinkSet> {
    corpus
        .pairs
        .par_iter()
        .map(|p| viterbi_align(p, aligner))
        .collect()
}

/// Per source word, the number of link pairs it takes part in that cross,
/// i.e. `(i - i') * (j - j') < 0`.
pub fn crossing_counts(links: &AlignmentLinkSet) -> Vec<u64> {
    let mut counts = vec![0; links.src_len];
    let l = &links.links;
    for a in 0..l.len() {
        for b in a + 1..l.len() {
            let (i, j) = (l[a].0 as i64, l[a].1 as i64);
            let (i2, j2) = (l[b].0 as i64, l[b].1 as i64);
            if (i - i2) * (j - j2) < 0 {
                counts[l[a].0] += 1;
                counts[l[b].0] += 1;
            }
        }
    }
    counts
}

pub const MAX_CROSSINGS: i64 = 9;

/// Crossing counts of every source word, in corpus order.
pub fn crossing_values(alignments: &[AlignmentLinkSet]) -> Vec<u64> {
    alignments.iter().flat_map(crossing_counts).collect()
}

/// Percentage of source words with exactly `k` crossings for `k = 0..=max_k`;
/// bin `max_k + 1` collects everything above.
pub fn crossing_distribution(alignments: &[AlignmentLinkSet], max_k: i64) -> Result<Histogram> {
    let values = crossing_values(alignments);
    if values.is_empty() {
        return Err(Error::EmptyCorpus("crossing distribution"));
    }
    Histogram::from_values(0, max_k + 1, values.into_iter().map(|v| v as i64))
}

/// `dist(hyp) - dist(ref)` in percentage points, both restricted to the
/// first `min(words(hyp), words(ref))` source words.
pub fn crossing_difference(
    hyp: &[AlignmentLinkSet],
    reference: &[AlignmentLinkSet],
    max_k: i64,
) -> Result<Curve> {
    let (h, r) = (crossing_values(hyp), crossing_values(reference));
    let n = h.len().min(r.len());
    if n == 0 {
        return Err(Error::EmptyCorpus("crossing distribution"));
    }
    let hist = |v: &[u64]| Histogram::from_values(0, max_k + 1, v[..n].iter().map(|&x| x as i64));
    Ok(hist(&h)?.difference(&hist(&r)?))
}
