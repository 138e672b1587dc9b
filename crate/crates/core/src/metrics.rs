//! Corpus BLEU-1..4 and CIDEr against multi-reference ground truth.
//!
//! BLEU is corpus-level: clipped n-gram matches and candidate n-gram totals
//! are summed over all images before taking precisions, with the standard
//! brevity penalty and no smoothing.
//!
//! CIDEr is the plain variant: raw-count TF, `ln(M / df)` IDF computed over
//! the reference sets of the corpus being scored, cosine similarity averaged
//! over references, n = 1..4 and images. No ×10 scaling, no length penalty,
//! no clipping.
//!
//! Per-image contributions are sorted before being summed so the result does
//! not depend on image or reference order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// One image: a generated caption and its ground-truth captions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusEval {
    pub items: Vec<EvalItem>,
    pub language: Option<String>,
}

impl CorpusEval {
    pub fn new(items: Vec<EvalItem>) -> Self {
        Self { items, language: None }
    }

    fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::contract("cannot score an empty corpus"));
        }
        if let Some(i) = self.items.iter().position(|it| it.references.is_empty()) {
            return Err(Error::contract(format!("image #{i} has no reference captions")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub images: usize,
    pub candidate_tokens: usize,
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Reference length closest to `c`, preferring the shorter on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .expect("validated non-empty")
}

/// Corpus-level BLEU with n-gram orders `1..=n`.
pub fn bleu_n(corpus: &CorpusEval, n: usize) -> Result<f64> {
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(Error::contract(format!("BLEU order must be in 1..=4, got {n}")));
    }
    corpus.validate()?;
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for item in &corpus.items {
        c += item.candidate.len();
        r += closest_ref_len(item.candidate.len(), &item.references);
        for k in 1..=n {
            let cand = ngrams(&item.candidate, k);
            let mut max_ref: Counts = Counts::new();
            for reference in &item.references {
                for (g, cnt) in ngrams(reference, k) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(cnt);
                }
            }
            totals[k - 1] += cand.values().sum::<usize>();
            matches[k - 1] += cand
                .iter()
                .map(|(g, &cnt)| cnt.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if matches[k] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[k] as f64 / totals[k] as f64).ln();
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn tfidf<'a>(counts: &Counts<'a>, idf: &dyn Fn(&[String]) -> f64) -> BTreeMap<&'a [String], f64> {
    counts.iter().map(|(g, &c)| (*g, c as f64 * idf(g))).collect()
}

fn cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let sq = |v: &BTreeMap<&[String], f64>| v.values().map(|x| x * x).sum::<f64>();
    let (sa, sb) = (sq(a), sq(b));
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    // sqrt(s * s) == s exactly, so identical vectors score exactly 1.
    dot / (sa * sb).sqrt()
}

/// Per-image CIDEr scores, in corpus order.
pub fn cider_per_image(corpus: &CorpusEval) -> Result<Vec<f64>> {
    corpus.validate()?;
    let m = corpus.items.len() as f64;
    let mut scores = vec![Vec::with_capacity(MAX_ORDER); corpus.items.len()];
    for n in 1..=MAX_ORDER {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for item in &corpus.items {
            let seen: BTreeSet<&[String]> = item
                .references
                .iter()
                .flat_map(|r| ngrams(r, n).into_keys())
                .collect();
            for g in seen {
                *df.entry(g).or_default() += 1;
            }
        }
        let idf = |g: &[String]| (m / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (i, item) in corpus.items.iter().enumerate() {
            let cand = tfidf(&ngrams(&item.candidate, n), &idf);
            let sims: Vec<f64> = item
                .references
                .iter()
                .map(|r| cosine(&cand, &tfidf(&ngrams(r, n), &idf)))
                .collect();
            scores[i].push(sorted_sum(sims) / item.references.len() as f64);
        }
    }
    Ok(scores
        .into_iter()
        .map(|per_n| per_n.iter().sum::<f64>() / MAX_ORDER as f64)
        .collect())
}

pub fn cider(corpus: &CorpusEval) -> Result<f64> {
    let per_image = cider_per_image(corpus)?;
    let n = per_image.len() as f64;
    Ok(sorted_sum(per_image) / n)
}

pub fn evaluate_corpus(corpus: &CorpusEval) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu1: bleu_n(corpus, 1)?,
        bleu2: bleu_n(corpus, 2)?,
        bleu3: bleu_n(corpus, 3)?,
        bleu4: bleu_n(corpus, 4)?,
        cider: cider(corpus)?,
        images: corpus.items.len(),
        candidate_tokens: corpus.items.iter().map(|i| i.candidate.len()).sum(),
    })
}
