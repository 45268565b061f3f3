//! Sentence-level n-gram similarity metrics: BLEU-N, ROUGE-N and ROUGE-L.
//!
//! All scores lie in `[0, 1]`. BLEU is cumulative with uniform weights and a
//! brevity penalty; zero n-gram matches are replaced by a small epsilon so the
//! geometric mean stays defined. ROUGE-L is the LCS F-measure with `beta = 1`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing constant substituted for zero n-gram precisions.
pub const DEFAULT_EPS: f64 = 1e-9;

/// A lowercase, punctuation-free word sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    /// Builds a sequence from tokens that are already normalized.
    ///
    /// Tokens containing whitespace are split, empty tokens dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let toks: Vec<String> = tokens
            .into_iter()
            .flat_map(|t| {
                t.as_ref()
                    .split_whitespace()
                    .map(str::to_owned)
                    .collect::<Vec<_>>()
            })
            .collect();
        if toks.is_empty() {
            return Err(Error::EmptyCaption);
        }
        Ok(TokenSeq(toks))
    }

    /// Wraps model output, which may legitimately be empty.
    pub(crate) fn from_generated(tokens: Vec<String>) -> Self {
        TokenSeq(tokens)
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Result<TokenSeq> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    TokenSeq::from_tokens(cleaned.split_whitespace())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Number of candidate n-grams matched in the reference, each clipped by its
/// reference count.
fn clipped_matches(candidate: &[String], reference: &[String], n: usize) -> usize {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    cand.iter()
        .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
        .sum()
}

/// Cumulative sentence BLEU-`n` of `candidate` against one reference.
///
/// Returns 0 when the candidate has fewer than `n` tokens.
pub fn bleu_n(candidate: &TokenSeq, reference: &TokenSeq, n: usize, eps: f64) -> f64 {
    assert!((1..=4).contains(&n), "bleu order must be in 1..=4, got {n}");
    assert!(eps > 0.0, "smoothing eps must be positive");
    let c = candidate.len();
    let r = reference.len();
    if c < n {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let total = c - k + 1;
        let matched = clipped_matches(candidate.tokens(), reference.tokens(), k);
        let p = if matched == 0 {
            eps
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let brevity = (1.0 - r as f64 / c as f64).exp().min(1.0);
    (brevity * (log_sum / n as f64).exp()).clamp(0.0, 1.0)
}

/// ROUGE-`n` recall: clipped n-gram matches over reference n-gram count.
pub fn rouge_n(candidate: &TokenSeq, reference: &TokenSeq, n: usize) -> f64 {
    assert!((1..=4).contains(&n), "rouge order must be in 1..=4, got {n}");
    if reference.len() < n {
        return 0.0;
    }
    let total = reference.len() - n + 1;
    let matched = clipped_matches(candidate.tokens(), reference.tokens(), n);
    matched as f64 / total as f64
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over the longest common subsequence.
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    let lcs = lcs_len(candidate.tokens(), reference.tokens());
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Per-sample similarity scores used as membership evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub rouge_l: f64,
}

impl ScoreVector {
    pub const DIM: usize = 4;

    pub fn as_array(&self) -> [f64; 4] {
        [self.bleu1, self.bleu2, self.bleu3, self.rouge_l]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        ScoreVector {
            bleu1: v[0],
            bleu2: v[1],
            bleu3: v[2],
            rouge_l: v[3],
        }
    }
}

pub fn score_vector(candidate: &TokenSeq, reference: &TokenSeq) -> ScoreVector {
    ScoreVector {
        bleu1: bleu_n(candidate, reference, 1, DEFAULT_EPS),
        bleu2: bleu_n(candidate, reference, 2, DEFAULT_EPS),
        bleu3: bleu_n(candidate, reference, 3, DEFAULT_EPS),
        rouge_l: rouge_l(candidate, reference),
    }
}

/// Scores against every reference and keeps the per-metric maximum.
pub fn score_against_references(candidate: &TokenSeq, references: &[TokenSeq]) -> Result<ScoreVector> {
    if candidate.is_empty() || references.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let mut best = [0.0f64; 4];
    for reference in references {
        let s = score_vector(candidate, reference).as_array();
        for (b, v) in best.iter_mut().zip(s) {
            *b = b.max(v);
        }
    }
    Ok(ScoreVector::from_array(best))
}
