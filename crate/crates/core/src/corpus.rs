//! Bitext ingestion: tokenization, length filtering, frequency-truncated
//! vocabularies, id encoding, and seeded subsampling.

use std::collections::HashMap;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::io::{read_lines, write_lines_atomic};
use crate::tensor::Rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Character classes the tokenizer splits off as single-character tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CharClass {
    /// ASCII punctuation and symbols (`!"#$%&'()*+,-./:;<=>?@[\]^_`{|}~`).
    AsciiPunct,
    /// Non-ASCII punctuation: Latin-1 marks, General Punctuation, CJK and
    /// full-width punctuation.
    UnicodePunct,
    Digit,
}

impl CharClass {
    pub fn matches(self, c: char) -> bool {
        match self {
            CharClass::AsciiPunct => c.is_ascii_punctuation(),
            CharClass::UnicodePunct => matches!(c,
                '\u{00A1}' | '\u{00A7}' | '\u{00AB}' | '\u{00B6}' | '\u{00B7}' | '\u{00BB}' | '\u{00BF}'
                | '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}'
                | '\u{3001}'..='\u{3003}' | '\u{3008}'..='\u{3011}' | '\u{3014}'..='\u{301F}'
                | '\u{FF01}'..='\u{FF0F}' | '\u{FF1A}'..='\u{FF1F}' | '\u{FF3B}'..='\u{FF3D}'
                | '\u{FF5B}'..='\u{FF65}'),
            CharClass::Digit => c.is_numeric(),
        }
    }

    fn parse(name: &str) -> Result<Self> {
        match name {
            "ascii_punct" => Ok(CharClass::AsciiPunct),
            "unicode_punct" => Ok(CharClass::UnicodePunct),
            "digit" => Ok(CharClass::Digit),
            other => Err(Error::Config(format!("unknown character class {other}"))),
        }
    }
}

/// Declarative tokenizer rules: split on Unicode whitespace, then isolate
/// every character belonging to one of `isolate` or listed in `extra_chars`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub isolate: Vec<CharClass>,
    pub extra_chars: Vec<char>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            isolate: vec![CharClass::AsciiPunct, CharClass::UnicodePunct],
            extra_chars: Vec::new(),
        }
    }
}

impl TokenizerConfig {
    /// Reads `isolate=ascii_punct,unicode_punct` and `extra_chars=...`.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let mut out = Self::default();
        if let Some(list) = cfg.raw("isolate") {
            out.isolate = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(CharClass::parse)
                .collect::<Result<_>>()?;
        }
        if let Some(chars) = cfg.raw("extra_chars") {
            out.extra_chars = chars.chars().filter(|c| !c.is_whitespace()).collect();
        }
        Ok(out)
    }

    fn isolates(&self, c: char) -> bool {
        self.isolate.iter().any(|k| k.matches(c)) || self.extra_chars.contains(&c)
    }
}

pub fn tokenize(line: &str, rules: &TokenizerConfig) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in line.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if rules.isolates(c) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Raw parallel text, paired by line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawBitext {
    pub pairs: Vec<(String, String)>,
}

impl RawBitext {
    pub fn from_lines(source: Vec<String>, target: Vec<String>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::format(
                "bitext",
                format!(
                    "{} source lines vs {} target lines",
                    source.len(),
                    target.len()
                ),
            ));
        }
        Ok(Self {
            pairs: source.into_iter().zip(target).collect(),
        })
    }

    pub fn read(source: &Path, target: &Path) -> Result<Self> {
        Self::from_lines(read_lines(source)?, read_lines(target)?)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub max_length: usize,
    pub ratio_bound: f64,
    pub drop_empty: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_length: 50,
            ratio_bound: 3.0,
            drop_empty: true,
        }
    }
}

impl FilterConfig {
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let out = Self {
            max_length: cfg.get_or("max_length", d.max_length)?,
            ratio_bound: cfg.get_or("ratio_bound", d.ratio_bound)?,
            drop_empty: cfg.get_or("drop_empty", d.drop_empty)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_length == 0 || !(self.ratio_bound >= 1.0) {
            return Err(Error::Config(format!(
                "filter needs max_length > 0 and ratio_bound >= 1, got {} / {}",
                self.max_length, self.ratio_bound
            )));
        }
        Ok(())
    }

    /// Whether a pair with these token counts survives.
    pub fn keeps(&self, src_len: usize, tgt_len: usize) -> bool {
        if src_len == 0 || tgt_len == 0 {
            // an empty side has an undefined length ratio
            return !self.drop_empty && src_len == tgt_len;
        }
        if src_len > self.max_length || tgt_len > self.max_length {
            return false;
        }
        let (lo, hi) = (src_len.min(tgt_len) as f64, src_len.max(tgt_len) as f64);
        hi / lo <= self.ratio_bound
    }
}

/// Drops pairs that are empty, too long, or too unbalanced in length.
/// Lengths are whitespace token counts; survivors keep their order.
pub fn filter_parallel(bitext: &RawBitext, cfg: &FilterConfig) -> Result<RawBitext> {
    cfg.validate()?;
    Ok(RawBitext {
        pairs: bitext
            .pairs
            .iter()
            .filter(|(s, t)| cfg.keeps(s.split_whitespace().count(), t.split_whitespace().count()))
            .cloned()
            .collect(),
    })
}

/// Token/id bijection with the four reserved symbols at ids 0..3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(content: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::format(
                    "vocabulary",
                    format!("duplicate token {t:?}"),
                ));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Keeps the `max_size` most frequent tokens; ties go to the token seen
    /// first.
    pub fn build<'a, I, S>(sentences: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for sentence in sentences {
            for tok in sentence {
                let tok = tok.as_ref();
                if RESERVED_TOKENS.contains(&tok) {
                    continue;
                }
                let next = order.len();
                let e = counts.entry(tok).or_insert_with(|| (0, next));
                if e.1 == next {
                    order.push(tok);
                }
                e.0 += 1;
            }
        }
        let mut ranked: Vec<(&str, usize, usize)> = order
            .iter()
            .map(|t| (*t, counts[t].0, counts[t].1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size);
        Self::from_tokens(ranked.into_iter().map(|(t, _, _)| t.to_string()))
            .expect("tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Content tokens in id order (reserved symbols excluded).
    pub fn content(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// Maps tokens to ids, unknown tokens to UNK; also returns the OOV count.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> (TokenSequence, usize) {
        let mut oov = 0;
        let ids = tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref()).unwrap_or_else(|| {
                    oov += 1;
                    UNK
                })
            })
            .collect();
        (TokenSequence(ids), oov)
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<Vec<String>> {
        seq.ids()
            .iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(Error::TokenOutOfRange {
                        id,
                        size: self.len(),
                    })
            })
            .collect()
    }

    /// One token per line; line `n` (0-based) is id `n`, reserved symbols first.
    pub fn to_lines(&self) -> Vec<String> {
        self.tokens.clone()
    }

    pub fn from_lines(lines: &[String]) -> Result<Self> {
        if lines.len() < NUM_RESERVED || lines[..NUM_RESERVED] != RESERVED_TOKENS {
            return Err(Error::format(
                "vocabulary",
                "first four lines must be <pad> <unk> <s> </s>",
            ));
        }
        Self::from_tokens(lines[NUM_RESERVED..].iter().cloned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_lines_atomic(path, &self.to_lines())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_lines(&read_lines(path)?)
    }
}

/// A sentence as vocabulary ids, without BOS/EOS.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Reference,
    Hypothesis,
    /// Both kinds interleaved.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: TokenSequence,
    pub target: TokenSequence,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub target_kind: TargetKind,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, target_kind: TargetKind) -> Self {
        Self { pairs, target_kind }
    }

    /// Encodes tokenized sides; returns the corpus and (source, target) OOV counts.
    pub fn encode<S: AsRef<str>>(
        source: &[Vec<S>],
        target: &[Vec<S>],
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
        target_kind: TargetKind,
    ) -> Result<(Self, usize, usize)> {
        if source.len() != target.len() {
            return Err(Error::format(
                "bitext",
                format!(
                    "{} source sentences vs {} targets",
                    source.len(),
                    target.len()
                ),
            ));
        }
        let (mut so, mut to) = (0, 0);
        let pairs = source
            .iter()
            .zip(target)
            .map(|(s, t)| {
                let (source, a) = src_vocab.encode(s);
                let (target, b) = tgt_vocab.encode(t);
                so += a;
                to += b;
                SentencePair { source, target }
            })
            .collect();
        Ok((Self::new(pairs, target_kind), so, to))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<TokenSequence> {
        self.pairs.iter().map(|p| p.source.clone()).collect()
    }

    pub fn target_tokens(&self, vocab: &Vocabulary) -> Result<Vec<Vec<String>>> {
        self.pairs.iter().map(|p| vocab.decode(&p.target)).collect()
    }

    /// `n` pairs drawn uniformly without replacement, kept in corpus order.
    pub fn sample_subset(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.len() {
            return Err(Error::SubsetTooLarge {
                requested: n,
                available: self.len(),
            });
        }
        let mut idx = Rng::new(seed).sample_indices(self.len(), n);
        idx.sort_unstable();
        Ok(Self::new(
            idx.into_iter().map(|i| self.pairs[i].clone()).collect(),
            self.target_kind,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn tokenize_examples() {
        let r = TokenizerConfig::default();
        assert!(tokenize("", &r).is_empty());
        assert_eq!(tokenize("a b", &r), ["a", "b"]);
        assert_eq!(tokenize("Hello, world.", &r), ["Hello", ",", "world", "."]);
        assert_eq!(tokenize("«Oui»\tnon…", &r), ["«", "Oui", "»", "non", "…"]);
        assert_eq!(tokenize("l'école", &r), ["l", "'", "école"]);
    }

    #[test]
    fn tokenizer_config_from_kv() {
        let kv = KvConfig::parse("isolate=digit\nextra_chars=@").unwrap();
        let r = TokenizerConfig::from_kv(&kv).unwrap();
        assert_eq!(tokenize("ab12@c.", &r), ["ab", "1", "2", "@", "c."]);
        assert!(TokenizerConfig::from_kv(&KvConfig::parse("isolate=bogus").unwrap()).is_err());
    }

    #[test]
    fn filter_examples() {
        let cfg = FilterConfig::default();
        let bitext = RawBitext {
            pairs: vec![
                ("a b".into(), "x y".into()),
                ("a".into(), "x x x x".into()),
                ("".into(), "x".into()),
                ("a b c".into(), "x".into()),
            ],
        };
        let out = filter_parallel(&bitext, &cfg).unwrap();
        assert_eq!(
            out.pairs,
            vec![
                ("a b".to_string(), "x y".to_string()),
                ("a b c".into(), "x".into())
            ]
        );
        let long = RawBitext {
            pairs: vec![(vec!["w"; 51].join(" "), vec!["w"; 50].join(" "))],
        };
        assert!(filter_parallel(&long, &cfg).unwrap().is_empty());
        assert!(filter_parallel(
            &bitext,
            &FilterConfig {
                ratio_bound: 0.5,
                ..cfg
            }
        )
        .is_err());
    }

    #[test]
    fn vocabulary_examples() {
        let corpus = vec![toks("a a b a")];
        let v = Vocabulary::build(corpus.iter().map(Vec::as_slice), 10);
        assert_eq!(v.to_lines(), ["<pad>", "<unk>", "<s>", "</s>", "a", "b"]);

        let corpus = vec![toks("c a b"), toks("a b a")];
        let v = Vocabulary::build(corpus.iter().map(Vec::as_slice), 2);
        assert_eq!(v.content(), ["a", "b"]);
        let (seq, oov) = v.encode(&toks("c"));
        assert_eq!((seq.ids(), oov), (&[UNK][..], 1));

        let empty: Vec<Vec<String>> = Vec::new();
        assert_eq!(
            Vocabulary::build(empty.iter().map(Vec::as_slice), 5).len(),
            4
        );
    }

    #[test]
    fn vocabulary_ties_follow_first_occurrence() {
        let corpus = vec![toks("z y x y z x")];
        let v = Vocabulary::build(corpus.iter().map(Vec::as_slice), 10);
        assert_eq!(v.content(), ["z", "y", "x"]);
    }

    #[test]
    fn encode_decode() {
        let corpus = vec![toks("a b")];
        let v = Vocabulary::build(corpus.iter().map(Vec::as_slice), 10);
        let (seq, oov) = v.encode(&toks("a"));
        assert_eq!((seq.ids(), oov), (&[4usize][..], 0));
        assert_eq!(v.decode(&seq).unwrap(), ["a"]);
        assert!(matches!(
            v.decode(&TokenSequence(vec![99])),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let corpus = vec![toks("b a c a")];
        let v = Vocabulary::build(corpus.iter().map(Vec::as_slice), 10);
        assert_eq!(Vocabulary::from_lines(&v.to_lines()).unwrap(), v);
        assert!(Vocabulary::from_lines(&toks("<unk> <pad> <s> </s>")).is_err());
    }

    fn corpus(n: usize) -> ParallelCorpus {
        ParallelCorpus::new(
            (0..n)
                .map(|i| SentencePair {
                    source: TokenSequence(vec![i + 4]),
                    target: TokenSequence(vec![i + 5]),
                })
                .collect(),
            TargetKind::Reference,
        )
    }

    #[test]
    fn subset_sampling() {
        let c = corpus(20);
        let all = c.sample_subset(20, 1).unwrap();
        assert_eq!(all, c);
        assert!(c.sample_subset(0, 1).unwrap().is_empty());
        assert_eq!(
            c.sample_subset(7, 3).unwrap(),
            c.sample_subset(7, 3).unwrap()
        );
        let sub = c.sample_subset(7, 3).unwrap();
        assert!(sub
            .pairs
            .iter()
            .all(|p| p.target.ids()[0] == p.source.ids()[0] + 1));
        assert!(matches!(
            c.sample_subset(21, 1),
            Err(Error::SubsetTooLarge { .. })
        ));
    }
}
