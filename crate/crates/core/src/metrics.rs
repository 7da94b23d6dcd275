//! Corpus BLEU, binned histograms, and their plot-data rendering.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus-level BLEU-4 with the statistics it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Percentage, 0..=100.
    pub bleu: f64,
    /// Modified n-gram precisions p_1..p_4 as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn ratio(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        }
    }

    /// The `multi-bleu.perl` summary line.
    pub fn line(&self) -> String {
        let p = self.precisions.map(|x| 100.0 * x);
        format!(
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.ratio(),
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    out
}

/// Case-sensitive single-reference corpus BLEU over tokenized text, without
/// smoothing: any zero precision yields a score of 0.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[Vec<H>],
    references: &[Vec<R>],
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            what: "hypotheses vs references",
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus("bleu"));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&gram).copied().unwrap_or(0));
            }
            totals[n - 1] += (h.len() + 1).saturating_sub(n);
        }
    }
    let precisions: [f64; MAX_ORDER] = std::array::from_fn(|i| {
        if totals[i] == 0 {
            0.0
        } else {
            matches[i] as f64 / totals[i] as f64
        }
    });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Integer-binned counts over `lo..=hi`; values outside are clamped into the
/// edge bins.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    lo: i64,
    hi: i64,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: i64, hi: i64) -> Result<Self> {
        if hi < lo {
            return Err(Error::Config(format!(
                "histogram range {lo}..={hi} is empty"
            )));
        }
        Ok(Self {
            lo,
            hi,
            counts: vec![0; (hi - lo + 1) as usize],
        })
    }

    pub fn from_values(lo: i64, hi: i64, values: impl IntoIterator<Item = i64>) -> Result<Self> {
        let mut h = Self::new(lo, hi)?;
        for v in values {
            h.add(v);
        }
        Ok(h)
    }

    pub fn add(&mut self, value: i64) {
        let bin = value.clamp(self.lo, self.hi);
        self.counts[(bin - self.lo) as usize] += 1;
    }

    pub fn range(&self) -> (i64, i64) {
        (self.lo, self.hi)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, bin: i64) -> u64 {
        if (self.lo..=self.hi).contains(&bin) {
            self.counts[(bin - self.lo) as usize]
        } else {
            0
        }
    }

    /// Share of all values in `bin`, in percent (0 for an empty histogram).
    pub fn percent(&self, bin: i64) -> f64 {
        match self.total() {
            0 => 0.0,
            t => 100.0 * self.count(bin) as f64 / t as f64,
        }
    }

    /// `(bin, percent)` for every bin in range, ascending.
    pub fn percentages(&self) -> Vec<(i64, f64)> {
        (self.lo..=self.hi).map(|b| (b, self.percent(b))).collect()
    }

    /// Pointwise `self - other` in percentage points over the union range.
    pub fn difference(&self, other: &Histogram) -> Curve {
        let (lo, hi) = (self.lo.min(other.lo), self.hi.max(other.hi));
        Curve {
            points: (lo..=hi)
                .map(|b| (b, self.percent(b) - other.percent(b)))
                .collect(),
        }
    }
}

/// A binned curve that need not sum to 100 (e.g. a difference of histograms).
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub points: Vec<(i64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricReport {
    Histogram(Histogram),
    Curve(Curve),
}

pub const LENGTH_DIFF_RANGE: (i64, i64) = (-10, 20);

/// Histogram of `len(target) - len(source)` per pair, in percent of pairs.
pub fn length_diff_histogram(corpus: &ParallelCorpus) -> Result<Histogram> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("length difference histogram"));
    }
    let (lo, hi) = LENGTH_DIFF_RANGE;
    Histogram::from_values(
        lo,
        hi,
        corpus
            .pairs
            .iter()
            .map(|p| p.target.len() as i64 - p.source.len() as i64),
    )
}

const PLOT_DECIMALS: usize = 6;

/// Two whitespace-separated columns, `bin percent`, ascending by bin. A
/// histogram is preceded by a `#` header carrying its range and total so the
/// counts can be recovered.
pub fn emit_plot_data(report: &MetricReport) -> String {
    let mut out = String::new();
    let points = match report {
        MetricReport::Histogram(h) => {
            let _ = writeln!(
                out,
                "# histogram lo={} hi={} total={}",
                h.lo,
                h.hi,
                h.total()
            );
            h.percentages()
        }
        MetricReport::Curve(c) => {
            out.push_str("# curve\n");
            let mut p = c.points.clone();
            p.sort_by_key(|&(b, _)| b);
            p
        }
    };
    for (bin, pct) in points {
        let _ = writeln!(out, "{bin} {pct:.PLOT_DECIMALS$}");
    }
    out
}

pub fn parse_plot_data(text: &str) -> Result<MetricReport> {
    let bad = |detail: String| Error::format("plot data", detail);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
    let mut points = Vec::new();
    for (n, line) in lines.enumerate() {
        let mut cols = line.split_whitespace();
        let (Some(b), Some(p), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(bad(format!("line {}: expected two columns", n + 2)));
        };
        let bin: i64 = b
            .parse()
            .map_err(|_| bad(format!("line {}: bad bin {b}", n + 2)))?;
        let pct: f64 = p
            .parse()
            .map_err(|_| bad(format!("line {}: bad value {p}", n + 2)))?;
        points.push((bin, pct));
    }
    if header == "# curve" {
        return Ok(MetricReport::Curve(Curve { points }));
    }
    let fields: HashMap<&str, &str> = header
        .strip_prefix("# histogram ")
        .ok_or_else(|| bad(format!("unknown header {header}")))?
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let field = |k: &str| -> Result<i64> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("header lacks {k}")))
    };
    let (lo, hi, total) = (field("lo")?, field("hi")?, field("total")?);
    let mut h = Histogram::new(lo, hi)?;
    if points.len() != h.counts.len() {
        return Err(bad(format!(
            "expected {} bins, found {}",
            h.counts.len(),
            points.len()
        )));
    }
    for (k, (bin, pct)) in points.into_iter().enumerate() {
        if bin != lo + k as i64 {
            return Err(bad(format!("bin {bin} out of order")));
        }
        h.counts[k] = (pct * total as f64 / 100.0).round() as u64;
    }
    if h.total() != total as u64 {
        return Err(bad(format!("bin counts do not add up to {total}")));
    }
    Ok(MetricReport::Histogram(h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_examples() {
        let h = vec![toks("a b c d e"), toks("x y z w")];
        assert_eq!(bleu(&h, &h).unwrap().bleu, 100.0);
        assert_eq!(
            bleu(&h, &h).unwrap().line(),
            "BLEU = 100.00, 100.0/100.0/100.0/100.0 (BP=1.000, ratio=1.000, hyp_len=9, ref_len=9)"
        );
        let r = bleu(&[toks("a b c d")], &[toks("e f g h")]).unwrap();
        assert_eq!(r.bleu, 0.0);
        let r = bleu(&[toks("the the the")], &[toks("the cat")]).unwrap();
        assert_eq!(r.matches[0], 1);
        assert!((r.precisions[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(bleu::<String, String>(&[], &[]).is_err());
        assert!(bleu(&[toks("a")], &[toks("a"), toks("b")]).is_err());
    }

    #[test]
    fn histogram_clamps_and_sums() {
        let h = Histogram::from_values(-10, 20, [-40, -10, 0, 0, 25]).unwrap();
        assert_eq!(h.count(-10), 2);
        assert_eq!(h.count(20), 1);
        assert!((h.percentages().iter().map(|p| p.1).sum::<f64>() - 100.0).abs() < 1e-9);
        assert!(h.difference(&h).points.iter().all(|p| p.1 == 0.0));
    }

    #[test]
    fn plot_data_round_trip() {
        let h = Histogram::from_values(-2, 3, [0, 0, 1, 7, -5, 2, 2, 2]).unwrap();
        let text = emit_plot_data(&MetricReport::Histogram(h.clone()));
        assert!(text.contains("\n-1 0.000000\n"));
        assert_eq!(
            parse_plot_data(&text).unwrap(),
            MetricReport::Histogram(h.clone())
        );
        let other = Histogram::from_values(-2, 3, [3, 3]).unwrap();
        let diff = MetricReport::Curve(h.difference(&other));
        let text = emit_plot_data(&diff);
        assert!(text.contains("\n3 -87.500000\n"));
        let back = parse_plot_data(&text).unwrap();
        assert_eq!(emit_plot_data(&back), text);
        assert!(parse_plot_data("# histogram lo=0 hi=1 total=2\n0 50.0\n").is_err());
    }
}
