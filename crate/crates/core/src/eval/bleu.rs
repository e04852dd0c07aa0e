use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Human-readable description of the BLEU variant, stored in reports.
pub const BLEU_SIGNATURE: &str = "bleu:case-sensitive,tok-13a,max-order-4,smooth-add-one-n>=2,single-ref";

struct Tok13a {
    symbols: Regex,
    period_comma_after: Regex,
    period_comma_before: Regex,
    dash: Regex,
}

fn tok13a() -> &'static Tok13a {
    static TOK: OnceLock<Tok13a> = OnceLock::new();
    TOK.get_or_init(|| Tok13a {
        symbols: Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").expect("valid regex"),
        period_comma_after: Regex::new(r"([^0-9])([\.,])").expect("valid regex"),
        period_comma_before: Regex::new(r"([\.,])([^0-9])").expect("valid regex"),
        dash: Regex::new(r"([0-9])(-)").expect("valid regex"),
    })
}

/// The `13a` tokenizer of the reference BLEU scripts: punctuation and
/// symbols split off, periods and commas split unless inside numbers.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let t = tok13a();
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s.replace("&quot;", "\"").replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">");
    }
    let s = format!(" {s} ");
    let s = t.symbols.replace_all(&s, " $1 ");
    let s = t.period_comma_after.replace_all(&s, "$1 $2 ");
    let s = t.period_comma_before.replace_all(&s, " $1 $2");
    let s = t.dash.replace_all(&s, "$1 $2 ");
    s.split_whitespace().map(str::to_string).collect()
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

impl BleuStats {
    /// Statistics of one pre-tokenized sentence pair.
    pub fn from_tokens(hyp: &[String], reference: &[String]) -> Self {
        let mut stats = BleuStats {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..BleuStats::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            stats.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
            stats.matches[n - 1] = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
        }
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Modified precisions; orders two and up use add-one smoothing.
    pub fn precisions(&self) -> [f64; MAX_ORDER] {
        let mut p = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            p[n] = if n == 0 {
                if self.totals[0] == 0 {
                    0.0
                } else {
                    self.matches[0] as f64 / self.totals[0] as f64
                }
            } else {
                (self.matches[n] + 1) as f64 / (self.totals[n] + 1) as f64
            };
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// BLEU on the 0-100 scale.
    pub fn score(&self) -> f64 {
        let p = self.precisions();
        if p[0] == 0.0 {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

pub fn corpus_stats<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[R]) -> Result<BleuStats> {
    if hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::contract("BLEU of an empty corpus"));
    }
    let mut total = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&BleuStats::from_tokens(&tokenize_13a(h.as_ref()), &tokenize_13a(r.as_ref())));
    }
    Ok(total)
}

/// Corpus-level BLEU (0-100) with 13a tokenization.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[R]) -> Result<f64> {
    Ok(corpus_stats(hypotheses, references)?.score())
}
