//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Written independently of the library: n-grams are
//! joined strings in hash maps and every quantity is recomputed from scratch.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use mlcap::beam::StepModel;
use mlcap::metrics::{CorpusEval, EvalItem};
use mlcap::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

fn grams(tokens: &[String], n: usize) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for i in 0..=tokens.len() - n {
        *out.entry(tokens[i..i + n].join("\u{1}")).or_insert(0) += 1;
    }
    out
}

/// Corpus BLEU with orders 1..=n.
pub fn oracle_bleu(items: &[(Vec<String>, Vec<Vec<String>>)], n: usize) -> f64 {
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    let mut precisions = Vec::new();
    for (cand, refs) in items {
        cand_len += cand.len();
        let mut best: Option<usize> = None;
        for r in refs {
            let better = match best {
                None => true,
                Some(b) => {
                    let (d_new, d_old) = (r.len().abs_diff(cand.len()), b.abs_diff(cand.len()));
                    d_new < d_old || (d_new == d_old && r.len() < b)
                }
            };
            if better {
                best = Some(r.len());
            }
        }
        ref_len += best.unwrap();
    }
    for k in 1..=n {
        let mut hit = 0usize;
        let mut total = 0usize;
        for (cand, refs) in items {
            let c = grams(cand, k);
            for (g, cnt) in &c {
                total += cnt;
                let max_ref = refs.iter().map(|r| grams(r, k).get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                hit += (*cnt).min(max_ref);
            }
        }
        if hit == 0 {
            return 0.0;
        }
        precisions.push(hit as f64 / total as f64);
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * precisions.iter().product::<f64>().powf(1.0 / n as f64)
}

/// Plain CIDEr: raw TF, ln(M / df) IDF, cosine averaged over references,
/// orders 1..4 and images.
pub fn oracle_cider(items: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    let m = items.len() as f64;
    let mut total = 0.0;
    for (cand, refs) in items {
        let mut image_score = 0.0;
        for n in 1..=4 {
            let mut df: HashMap<String, usize> = HashMap::new();
            for (_, other_refs) in items {
                let seen: HashSet<String> = other_refs.iter().flat_map(|r| grams(r, n).into_keys()).collect();
                for g in seen {
                    *df.entry(g).or_insert(0) += 1;
                }
            }
            let vec = |t: &[String]| -> HashMap<String, f64> {
                grams(t, n)
                    .into_iter()
                    .map(|(g, c)| {
                        let d = df.get(&g).copied().unwrap_or(0).max(1) as f64;
                        (g, c as f64 * (m / d).ln())
                    })
                    .collect()
            };
            let cv = vec(cand);
            let mut sum = 0.0;
            for r in refs {
                let rv = vec(r);
                let na = cv.values().map(|x| x * x).sum::<f64>().sqrt();
                let nb = rv.values().map(|x| x * x).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    let dot: f64 = cv.iter().map(|(g, x)| x * rv.get(g).copied().unwrap_or(0.0)).sum();
                    sum += dot / (na * nb);
                }
            }
            image_score += sum / refs.len() as f64;
        }
        total += image_score / 4.0;
    }
    total / m
}

/// Random corpus: up to `max_images` images, 1-4 references each, token
/// lists of up to `max_tokens` drawn from a small alphabet so n-grams recur.
pub fn random_corpus(rng: &mut ChaCha8Rng, max_images: usize, max_tokens: usize) -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    const ALPHABET: [&str; 5] = ["a", "b", "c", "d", "e"];
    let sentence = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
        let len = rng.gen_range(min..=max_tokens);
        (0..len).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())].to_string()).collect()
    };
    let n = rng.gen_range(1..=max_images);
    (0..n)
        .map(|_| {
            let cand = sentence(rng, 0);
            let refs = (0..rng.gen_range(1..=4)).map(|_| sentence(rng, 1)).collect();
            (cand, refs)
        })
        .collect()
}

pub fn to_corpus(items: &[(Vec<String>, Vec<Vec<String>>)]) -> CorpusEval {
    CorpusEval::new(
        items
            .iter()
            .map(|(c, r)| EvalItem {
                candidate: c.clone(),
                references: r.clone(),
            })
            .collect(),
    )
}

/// Step model whose next-token distribution is a random function of the
/// whole prefix. Id 0 is never emitted and id 2 ends a sequence.
/// With `coarse`, logits take only the values 0 and 1 so ties are common.
pub struct PrefixTable {
    pub vocab: usize,
    pub seed: u64,
    pub coarse: bool,
}

impl PrefixTable {
    fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut key = self.seed;
        for &id in prefix {
            key = key.wrapping_mul(1_000_003).wrapping_add(id as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| {
                if self.coarse {
                    rng.gen_range(0..2) as f64
                } else {
                    rng.gen_range(-3.0..3.0)
                }
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        logits.iter().map(|l| l - max - z.ln()).collect()
    }
}

impl StepModel for PrefixTable {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn can_emit(&self, id: usize) -> bool {
        id != 0
    }

    fn start(&self, _feature: &[f64]) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn advance(&self, state: &Vec<usize>, id: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut next = state.clone();
        next.push(id);
        let lp = self.log_probs(&next);
        Ok((next, lp))
    }
}
