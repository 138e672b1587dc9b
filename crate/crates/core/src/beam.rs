//! Beam-search caption generation and an exhaustive reference decoder.
//!
//! Hypotheses are ranked by summed log-probability. Ties go to the
//! lexicographically smaller id sequence, which prefers the lower token id and
//! then the shorter sequence. The same order is used by [`exhaustive_decode`],
//! so at saturating width the two agree bit for bit.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{step_distribution, CaptionModel, LstmState, StepInput};
use crate::vocab::EOS_ID;

/// Most sequences [`exhaustive_decode`] will enumerate.
pub const EXHAUSTIVE_LIMIT: u64 = 1_000_000;

/// Anything that can score the next token given a recurrent state.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Whether `id` may be emitted. Control tokens other than eos are not.
    fn can_emit(&self, id: usize) -> bool;

    /// State after consuming the image feature.
    fn start(&self, feature: &[f64]) -> Result<Self::State>;

    /// Feeds `id`, returning the new state and next-token log-probabilities.
    fn advance(&self, state: &Self::State, id: usize) -> Result<(Self::State, Vec<f64>)>;
}

impl StepModel for CaptionModel {
    type State = LstmState;

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn can_emit(&self, id: usize) -> bool {
        self.vocab.is_emittable(id)
    }

    fn start(&self, feature: &[f64]) -> Result<LstmState> {
        let zero = LstmState::zeros(self.params.dims.hidden);
        step_distribution(&zero, StepInput::Feature(feature), &self.params).map(|(s, _)| s)
    }

    fn advance(&self, state: &LstmState, id: usize) -> Result<(LstmState, Vec<f64>)> {
        step_distribution(state, StepInput::Token(id), &self.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by `logprob / len` instead of `logprob`.
    pub length_norm: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 5,
            max_len: 30,
            length_norm: false,
        }
    }
}

/// A partial or finished decode.
#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    pub ids: Vec<usize>,
    pub logprob: f64,
    pub state: S,
    /// Log-probabilities of the token after `ids`.
    next: Vec<f64>,
    pub finished: bool,
}

/// Output of a decoder: emitted ids (ending in eos unless truncated) and the
/// summed log-probability of emitting them.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub logprob: f64,
}

impl Decoded {
    fn score(&self, length_norm: bool) -> f64 {
        if length_norm && !self.ids.is_empty() {
            self.logprob / self.ids.len() as f64
        } else {
            self.logprob
        }
    }
}

fn rank(a_score: f64, a_ids: &[usize], b_score: f64, b_ids: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_ids.cmp(b_ids))
}

fn check_start<M: StepModel>(model: &M, start_id: usize) -> Result<()> {
    if start_id >= model.vocab_size() {
        return Err(Error::Index {
            what: "start token",
            index: start_id,
            len: model.vocab_size(),
        });
    }
    Ok(())
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len < 1 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    Ok(())
}

fn first_step<M: StepModel>(model: &M, feature: &[f64], start_id: usize) -> Result<(M::State, Vec<f64>)> {
    check_start(model, start_id)?;
    let s = model.start(feature)?;
    let (state, next) = model.advance(&s, start_id)?;
    if next.len() != model.vocab_size() {
        return Err(Error::Dimension {
            op: "step distribution",
            lhs: vec![next.len()],
            rhs: vec![model.vocab_size()],
        });
    }
    Ok((state, next))
}

/// Beam search from the image feature and language start token.
///
/// Returns up to `width` finished hypotheses, best first.
pub fn beam_search<M: StepModel>(
    model: &M,
    feature: &[f64],
    start_id: usize,
    config: &BeamConfig,
) -> Result<Vec<Decoded>> {
    if config.width < 1 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    check_max_len(config.max_len)?;
    let (state, next) = first_step(model, feature, start_id)?;
    let mut live = vec![Hypothesis {
        ids: Vec::new(),
        logprob: 0.0,
        state,
        next,
        finished: false,
    }];
    let mut finished: Vec<Decoded> = Vec::new();
    let emittable: Vec<usize> = (0..model.vocab_size()).filter(|&id| model.can_emit(id)).collect();

    while !live.is_empty() {
        let mut candidates: Vec<(usize, usize, f64)> = Vec::with_capacity(live.len() * emittable.len());
        for (h, hyp) in live.iter().enumerate() {
            debug_assert!(!hyp.finished);
            for &tok in &emittable {
                candidates.push((h, tok, hyp.logprob + hyp.next[tok]));
            }
        }
        // Candidates of one step share a length, so comparing (parent ids,
        // token) is the same as comparing the extended sequences.
        candidates.sort_by(|a, b| {
            rank(a.2, &live[a.0].ids, b.2, &live[b.0].ids).then_with(|| a.1.cmp(&b.1))
        });
        candidates.truncate(config.width);

        let mut survivors = Vec::with_capacity(candidates.len());
        for (h, tok, logprob) in candidates {
            let parent = &live[h];
            let mut ids = parent.ids.clone();
            ids.push(tok);
            if tok == EOS_ID || ids.len() >= config.max_len {
                finished.push(Decoded { ids, logprob });
                continue;
            }
            let (state, next) = model.advance(&parent.state, tok)?;
            survivors.push(Hypothesis {
                ids,
                logprob,
                state,
                next,
                finished: false,
            });
        }
        live = survivors;
    }

    finished.sort_by(|a, b| {
        rank(
            a.score(config.length_norm),
            &a.ids,
            b.score(config.length_norm),
            &b.ids,
        )
    });
    finished.truncate(config.width);
    Ok(finished)
}

/// Argmax decoding: the most probable emittable token at every step, lower id
/// on ties.
pub fn greedy_decode<M: StepModel>(model: &M, feature: &[f64], start_id: usize, max_len: usize) -> Result<Decoded> {
    check_max_len(max_len)?;
    let (mut state, mut next) = first_step(model, feature, start_id)?;
    let mut ids = Vec::new();
    let mut logprob = 0.0;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for tok in (0..model.vocab_size()).filter(|&t| model.can_emit(t)) {
            if best.is_none_or(|(_, lp)| next[tok] > lp) {
                best = Some((tok, next[tok]));
            }
        }
        let (tok, lp) = best.ok_or_else(|| Error::contract("no emittable tokens"))?;
        ids.push(tok);
        logprob += lp;
        if tok == EOS_ID || ids.len() >= max_len {
            return Ok(Decoded { ids, logprob });
        }
        (state, next) = model.advance(&state, tok)?;
    }
}

/// Exact argmax over every sequence of at most `max_len` tokens that ends in
/// eos or is truncated at `max_len`.
pub fn exhaustive_decode<M: StepModel>(model: &M, feature: &[f64], start_id: usize, max_len: usize) -> Result<Decoded> {
    check_max_len(max_len)?;
    let emittable: Vec<usize> = (0..model.vocab_size()).filter(|&id| model.can_emit(id)).collect();
    let branching = emittable.len() as u64;
    let mut total: u64 = 0;
    let mut level: u64 = 1;
    for _ in 0..max_len {
        level = level.saturating_mul(branching);
        total = total.saturating_add(level);
    }
    if total > EXHAUSTIVE_LIMIT {
        return Err(Error::contract(format!(
            "exhaustive decode would visit up to {total} sequences (limit {EXHAUSTIVE_LIMIT})"
        )));
    }
    let (state, next) = first_step(model, feature, start_id)?;
    let mut best: Option<Decoded> = None;
    let mut prefix = Vec::with_capacity(max_len);
    search(model, &emittable, &state, &next, 0.0, &mut prefix, max_len, &mut best)?;
    best.ok_or_else(|| Error::contract("no emittable tokens"))
}

#[allow(clippy::too_many_arguments)]
fn search<M: StepModel>(
    model: &M,
    emittable: &[usize],
    state: &M::State,
    next: &[f64],
    logprob: f64,
    prefix: &mut Vec<usize>,
    max_len: usize,
    best: &mut Option<Decoded>,
) -> Result<()> {
    for &tok in emittable {
        let lp = logprob + next[tok];
        prefix.push(tok);
        if tok == EOS_ID || prefix.len() >= max_len {
            let better = match best {
                None => true,
                Some(b) => rank(lp, prefix, b.logprob, &b.ids) == Ordering::Less,
            };
            if better {
                *best = Some(Decoded {
                    ids: prefix.clone(),
                    logprob: lp,
                });
            }
        } else {
            let (s, n) = model.advance(state, tok)?;
            search(model, emittable, &s, &n, lp, prefix, max_len, best)?;
        }
        prefix.pop();
    }
    Ok(())
}
