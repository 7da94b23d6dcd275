//! Slow, obviously-correct reference implementations.

fn ngrams(tokens: &[&str], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n)
        .map(|s| tokens[s..s + n].iter().map(|t| t.to_string()).collect())
        .collect()
}

/// Corpus BLEU-4 by linear scans over n-gram lists: `(bleu, [p1..p4], bp)`.
pub fn brute_bleu(hyps: &[&str], refs: &[&str]) -> (f64, [f64; 4], f64) {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut h_len, mut r_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        h_len += h.len();
        r_len += r.len();
        for n in 1..=4 {
            let hg = ngrams(&h, n);
            let rg = ngrams(&r, n);
            total[n - 1] += hg.len();
            let mut seen: Vec<&Vec<String>> = Vec::new();
            for g in &hg {
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let in_h = hg.iter().filter(|x| *x == g).count();
                let in_r = rg.iter().filter(|x| *x == g).count();
                matched[n - 1] += in_h.min(in_r);
            }
        }
    }
    let p: Vec<f64> = (0..4)
        .map(|n| if total[n] == 0 { 0.0 } else { matched[n] as f64 / total[n] as f64 })
        .collect();
    let bp = if h_len == 0 {
        0.0
    } else if h_len < r_len {
        (1.0 - r_len as f64 / h_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if p.iter().any(|&x| x == 0.0) {
        0.0
    } else {
        100.0 * bp * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp()
    };
    (bleu, [p[0], p[1], p[2], p[3]], bp)
}

/// Hand-built corpora with, where worked out by hand, the expected score.
pub fn micro_corpora() -> Vec<(&'static str, Vec<&'static str>, Vec<&'static str>, Option<f64>)> {
    vec![
        ("identity", vec!["the cat sat on the mat", "a b c d e"], vec!["the cat sat on the mat", "a b c d e"], Some(100.0)),
        ("disjoint", vec!["a b c d"], vec!["e f g h"], Some(0.0)),
        ("clipped", vec!["the the the"], vec!["the cat"], Some(0.0)),
        // p = 4/5, 3/4, 2/3, 1/2 with equal lengths: 100 * 0.2^(1/4)
        ("one substitution", vec!["a b c d e"], vec!["a b c d f"], Some(100.0 * 0.2f64.powf(0.25))),
        // exact prefix, BP = exp(1 - 6/4)
        ("short", vec!["a b c d"], vec!["a b c d e f"], Some(100.0 * (-0.5f64).exp())),
        ("two sentences", vec!["x y x y x", "p q r s t u"], vec!["x y z", "p q r s t v w"], None),
        (
            "mixed",
            vec!["the quick brown fox jumps over the dog", "it is a test", "he read the book"],
            vec!["the quick brown fox jumped over the lazy dog", "this is a test", "he read the book"],
            None,
        ),
    ]
}

pub fn inversions(perm: &[usize]) -> u64 {
    let mut n = 0;
    for a in 0..perm.len() {
        for b in a + 1..perm.len() {
            if perm[a] > perm[b] {
                n += 1;
            }
        }
    }
    n
}
