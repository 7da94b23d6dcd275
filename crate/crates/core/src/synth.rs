//! Synthetic bitext with literal and "free" reference translations.
//!
//! Sources are drawn from a Zipfian unigram process. The literal target maps
//! each source token through a bijective lexicon. A free target starts from
//! the literal one and then swaps in synonyms, locally reorders (each token
//! moves at most `reorder_window` places), and inserts particles or drops
//! function tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::io::{join_tokens, write_lines_atomic};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub sentence_count: usize,
    pub valid_count: usize,
    pub test_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub free_prob: f64,
    pub reorder_window: usize,
    /// Target words that have a synonym.
    pub synonym_classes: usize,
    /// Most frequent source words, whose translations may be dropped.
    pub function_words: usize,
    /// Target-only tokens that free translations may insert.
    pub particles: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 500,
            sentence_count: 5000,
            valid_count: 500,
            test_count: 500,
            min_len: 4,
            max_len: 10,
            free_prob: 0.5,
            reorder_window: 2,
            synonym_classes: 100,
            function_words: 10,
            particles: 5,
            zipf_exponent: 1.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.vocab_size >= 1
            && (0.0..=1.0).contains(&self.free_prob)
            && self.min_len >= 1
            && self.min_len <= self.max_len
            && self.synonym_classes <= self.vocab_size
            && self.function_words <= self.vocab_size
            && self.zipf_exponent >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synth config {self:?}")))
        }
    }

    pub fn from_kv(cfg: &KvConfig, base: &SynthConfig) -> Result<Self> {
        let out = Self {
            vocab_size: cfg.get_or("vocab_size", base.vocab_size)?,
            sentence_count: cfg.get_or("sentence_count", base.sentence_count)?,
            valid_count: cfg.get_or("valid_count", base.valid_count)?,
            test_count: cfg.get_or("test_count", base.test_count)?,
            min_len: cfg.get_or("min_len", base.min_len)?,
            max_len: cfg.get_or("max_len", base.max_len)?,
            free_prob: cfg.get_or("free_prob", base.free_prob)?,
            reorder_window: cfg.get_or("reorder_window", base.reorder_window)?,
            synonym_classes: cfg.get_or("synonym_classes", base.synonym_classes)?,
            function_words: cfg.get_or("function_words", base.function_words)?,
            particles: cfg.get_or("particles", base.particles)?,
            zipf_exponent: cfg.get_or("zipf_exponent", base.zipf_exponent)?,
            seed: cfg.get_or("seed", base.seed)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_kv(&self, prefix: &str, out: &mut KvConfig) {
        let fields: [(&str, String); 13] = [
            ("vocab_size", self.vocab_size.to_string()),
            ("sentence_count", self.sentence_count.to_string()),
            ("valid_count", self.valid_count.to_string()),
            ("test_count", self.test_count.to_string()),
            ("min_len", self.min_len.to_string()),
            ("max_len", self.max_len.to_string()),
            ("free_prob", self.free_prob.to_string()),
            ("reorder_window", self.reorder_window.to_string()),
            ("synonym_classes", self.synonym_classes.to_string()),
            ("function_words", self.function_words.to_string()),
            ("particles", self.particles.to_string()),
            ("zipf_exponent", self.zipf_exponent.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in fields {
            out.set(format!("{prefix}{k}"), v);
        }
    }
}

/// The word lists behind a synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    /// Target word for each source rank.
    pub target_of: Vec<String>,
    /// Synonym of selected target words.
    pub synonym_of: HashMap<String, String>,
    pub function: Vec<String>,
    pub particles: Vec<String>,
    canonical: HashMap<String, String>,
}

impl Lexicon {
    fn new(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        let mut perm: Vec<usize> = (0..cfg.vocab_size).collect();
        rng.shuffle(&mut perm);
        let target_of: Vec<String> = perm.iter().map(|k| format!("t{k}")).collect();
        // synonyms go to mid-frequency words, not the function words
        let first = cfg.function_words.min(cfg.vocab_size - cfg.synonym_classes);
        let mut synonym_of = HashMap::new();
        let mut canonical = HashMap::new();
        for t in &target_of[first..first + cfg.synonym_classes] {
            let syn = format!("{t}s");
            synonym_of.insert(t.clone(), syn.clone());
            canonical.insert(syn, t.clone());
        }
        Self {
            function: target_of[..cfg.function_words].to_vec(),
            particles: (0..cfg.particles).map(|k| format!("p{k}")).collect(),
            target_of,
            synonym_of,
            canonical,
        }
    }

    pub fn source_word(rank: usize) -> String {
        format!("s{rank}")
    }

    fn literal(&self, source: &[usize]) -> Vec<String> {
        source.iter().map(|&r| self.target_of[r].clone()).collect()
    }

    /// Sorted content tokens with synonyms mapped to their base word;
    /// particles and function tokens are ignored.
    pub fn meaning_key<S: AsRef<str>>(&self, target: &[S]) -> Vec<String> {
        let mut key: Vec<String> = target
            .iter()
            .map(AsRef::as_ref)
            .filter(|t| {
                !self.particles.iter().any(|p| p == t) && !self.function.iter().any(|f| f == t)
            })
            .map(|t| {
                self.canonical
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| t.to_string())
            })
            .collect();
        key.sort_unstable();
        key
    }
}

/// One split: token lists line-parallel across fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthSplit {
    pub source: Vec<Vec<String>>,
    pub target: Vec<Vec<String>>,
    pub literal: Vec<Vec<String>>,
    pub free: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub config: SynthConfig,
    pub lexicon: Lexicon,
    pub train: SynthSplit,
    pub valid: SynthSplit,
    pub test: SynthSplit,
}

/// Reorders so that no token moves more than `window` places: sort by
/// position plus uniform noise in `[0, window + 1)`.
pub fn local_shuffle<T: Clone>(items: &[T], window: usize, rng: &mut Rng) -> Vec<T> {
    let mut keyed: Vec<(f64, usize)> = (0..items.len())
        .map(|k| (k as f64 + rng.uniform(0.0, window as f64 + 1.0), k))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, k)| items[k].clone()).collect()
}

fn free_translation(
    lex: &Lexicon,
    literal: &[String],
    cfg: &SynthConfig,
    rng: &mut Rng,
) -> Vec<String> {
    let mut out: Vec<String> = literal
        .iter()
        .map(|t| match lex.synonym_of.get(t) {
            Some(s) if rng.bernoulli(0.5) => s.clone(),
            _ => t.clone(),
        })
        .collect();
    out = local_shuffle(&out, cfg.reorder_window, rng);
    if !lex.particles.is_empty() && rng.bernoulli(0.5) {
        let at = rng.below(out.len() + 1);
        out.insert(at, lex.particles[rng.below(lex.particles.len())].clone());
    }
    let function: Vec<usize> = (0..out.len())
        .filter(|&k| lex.function.contains(&out[k]))
        .collect();
    if !function.is_empty() && out.len() > 1 && rng.bernoulli(0.5) {
        out.remove(function[rng.below(function.len())]);
    }
    out
}

fn zipf_cdf(n: usize, s: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = (1..=n)
        .map(|r| {
            acc += (r as f64).powf(-s);
            acc
        })
        .collect();
    for c in cdf.iter_mut() {
        *c /= acc;
    }
    cdf
}

fn split(lex: &Lexicon, cfg: &SynthConfig, cdf: &[f64], count: usize, rng: &mut Rng) -> SynthSplit {
    let mut out = SynthSplit::default();
    for _ in 0..count {
        let len = rng.range_inclusive(cfg.min_len, cfg.max_len);
        let ranks: Vec<usize> = (0..len)
            .map(|_| {
                let u = rng.uniform(0.0, 1.0);
                cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
            })
            .collect();
        let literal = lex.literal(&ranks);
        let free = rng.bernoulli(cfg.free_prob);
        let target = if free {
            free_translation(lex, &literal, cfg, rng)
        } else {
            literal.clone()
        };
        out.source
            .push(ranks.into_iter().map(Lexicon::source_word).collect());
        out.target.push(target);
        out.literal.push(literal);
        out.free.push(free);
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let lexicon = Lexicon::new(cfg, &mut root.derive(0));
    let cdf = zipf_cdf(cfg.vocab_size, cfg.zipf_exponent);
    Ok(SynthData {
        train: split(&lexicon, cfg, &cdf, cfg.sentence_count, &mut root.derive(1)),
        valid: split(&lexicon, cfg, &cdf, cfg.valid_count, &mut root.derive(2)),
        test: split(&lexicon, cfg, &cdf, cfg.test_count, &mut root.derive(3)),
        config: cfg.clone(),
        lexicon,
    })
}

impl SynthData {
    /// Writes `{split}.src`, `{split}.tgt`, `{split}.lit` and a manifest.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, s) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            for (ext, side) in [("src", &s.source), ("tgt", &s.target), ("lit", &s.literal)] {
                let path = dir.join(format!("{name}.{ext}"));
                let lines: Vec<String> = side.iter().map(|t| join_tokens(t)).collect();
                write_lines_atomic(&path, &lines)?;
                written.push(path);
            }
        }
        let mut manifest = KvConfig::new();
        self.config.to_kv("", &mut manifest);
        for (name, s) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            manifest.set(
                format!("{name}.free_pairs"),
                s.free.iter().filter(|&&f| f).count(),
            );
        }
        let path = dir.join("synth.manifest");
        crate::io::write_atomic(&path, manifest.render().as_bytes())?;
        written.push(path);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(free_prob: f64) -> SynthConfig {
        SynthConfig {
            vocab_size: 60,
            sentence_count: 300,
            valid_count: 20,
            test_count: 20,
            synonym_classes: 20,
            free_prob,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn literal_only_when_never_free() {
        let d = generate(&small(0.0)).unwrap();
        assert_eq!(d.train.target, d.train.literal);
        assert!(d.train.free.iter().all(|f| !f));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            generate(&small(0.5)).unwrap(),
            generate(&small(0.5)).unwrap()
        );
        let other = SynthConfig {
            seed: 2,
            ..small(0.5)
        };
        assert_ne!(
            generate(&small(0.5)).unwrap().train,
            generate(&other).unwrap().train
        );
    }

    #[test]
    fn free_targets_keep_meaning() {
        let d = generate(&small(1.0)).unwrap();
        let mut changed = 0;
        for (t, l) in d.train.target.iter().zip(&d.train.literal) {
            assert_eq!(d.lexicon.meaning_key(t), d.lexicon.meaning_key(l));
            changed += usize::from(t != l);
        }
        assert!(changed > 250);
    }

    #[test]
    fn shuffle_displacement_is_bounded() {
        let mut rng = Rng::new(3);
        for w in 0..4 {
            for _ in 0..200 {
                let items: Vec<usize> = (0..12).collect();
                let out = local_shuffle(&items, w, &mut rng);
                for (pos, &k) in out.iter().enumerate() {
                    assert!(pos.abs_diff(k) <= w, "window {w}: {out:?}");
                }
            }
        }
    }
}
