//! End-to-end training and captioning on loaded datasets.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::beam::{beam_search, BeamConfig};
use crate::checkpoint::Checkpoint;
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::metrics::{cider, CorpusEval, EvalItem};
use crate::model::{init_params, CaptionModel, Dims};
use crate::rng::{self, Stream};
use crate::trainer::{select_best_epoch, train_epoch, AdamState, Example, TrainConfig};
use crate::vocab::{build_vocab, TokenSequence, Vocabulary};

/// Languages to train on: `requested` if given (each must occur in
/// `records`), otherwise every language present, sorted.
pub fn resolve_languages(records: &[ImageRecord], requested: &[String]) -> Result<Vec<String>> {
    let present: std::collections::BTreeSet<&str> = records.iter().flat_map(|r| r.languages()).collect();
    if requested.is_empty() {
        if present.is_empty() {
            return Err(Error::contract("training split has no captions"));
        }
        return Ok(present.into_iter().map(String::from).collect());
    }
    let mut out: Vec<String> = Vec::new();
    for lang in requested {
        if !present.contains(lang.as_str()) {
            let known: Vec<&str> = present.iter().copied().collect();
            return Err(Error::contract(format!(
                "language {lang:?} has no training captions (available: {})",
                known.join(", ")
            )));
        }
        if !out.contains(lang) {
            out.push(lang.clone());
        }
    }
    out.sort();
    Ok(out)
}

/// Vocabulary over the captions of `records` in `languages`.
pub fn vocab_for(records: &[ImageRecord], languages: &[String], min_count: usize) -> Result<Vocabulary> {
    let corpus = records.iter().flat_map(|r| {
        r.captions
            .iter()
            .filter(|c| languages.contains(&c.lang))
            .map(|c| (c.lang.as_str(), c.tokens.as_slice()))
    });
    build_vocab(corpus, min_count)
}

fn feature_dim(records: &[ImageRecord]) -> Result<usize> {
    let d = records
        .first()
        .map(|r| r.feature.len())
        .ok_or_else(|| Error::contract("no records"))?;
    if let Some(r) = records.iter().find(|r| r.feature.len() != d) {
        return Err(Error::Dimension {
            op: "image feature",
            lhs: vec![r.feature.len()],
            rhs: vec![d],
        });
    }
    Ok(d)
}

/// Best-scoring caption for one image in `language`.
pub fn caption_image(model: &CaptionModel, feature: &[f64], language: &str, beam: &BeamConfig) -> Result<Vec<String>> {
    if feature.len() != model.params.dims.feature {
        return Err(Error::Dimension {
            op: "image feature",
            lhs: vec![feature.len()],
            rhs: vec![model.params.dims.feature],
        });
    }
    let start = model.vocab.start_id(language)?;
    let best = beam_search(model, feature, start, beam)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::contract("beam search produced no hypothesis"))?;
    model.vocab.decode(&best.ids)
}

/// Generated captions against ground truth for every record with at least
/// one `language` caption.
pub fn language_corpus(
    model: &CaptionModel,
    records: &[ImageRecord],
    language: &str,
    beam: &BeamConfig,
) -> Result<CorpusEval> {
    let mut items = Vec::new();
    for r in records {
        let references: Vec<Vec<String>> = r.captions_in(language).map(<[String]>::to_vec).collect();
        if references.is_empty() {
            continue;
        }
        items.push(EvalItem {
            candidate: caption_image(model, &r.feature, language, beam)?,
            references,
        });
    }
    Ok(CorpusEval {
        items,
        language: Some(language.to_string()),
    })
}

/// Per-language CIDEr on `records`, skipping languages with no references.
pub fn cider_by_language(
    model: &CaptionModel,
    records: &[ImageRecord],
    beam: &BeamConfig,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for lang in model.vocab.languages() {
        let corpus = language_corpus(model, records, lang, beam)?;
        if !corpus.items.is_empty() {
            out.insert(lang.to_string(), cider(&corpus)?);
        }
    }
    Ok(out)
}

/// Mean of the per-language validation CIDEr scores.
pub fn validation_score(model: &CaptionModel, val: &[ImageRecord], config: &TrainConfig) -> Result<f64> {
    let beam = BeamConfig {
        width: config.val_beam,
        max_len: config.max_len,
        length_norm: config.length_norm,
    };
    let scores = cider_by_language(model, val, &beam)?;
    if scores.is_empty() {
        return Err(Error::contract("validation split has no captions in the trained languages"));
    }
    Ok(scores.values().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cider: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Checkpoint,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    pub history: Vec<EpochReport>,
}

/// Trains for `config.epochs` epochs and keeps the epoch with the highest
/// validation CIDEr. `on_epoch` sees every epoch's report and checkpoint.
pub fn fit<F>(train: &[ImageRecord], val: &[ImageRecord], config: &TrainConfig, mut on_epoch: F) -> Result<FitOutcome>
where
    F: FnMut(&EpochReport, &Checkpoint) -> Result<()>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if val.is_empty() {
        return Err(Error::contract("validation split is empty; model selection needs at least one image"));
    }
    let languages = resolve_languages(train, &config.languages)?;
    let vocab = vocab_for(train, &languages, config.min_count)?;
    let d = feature_dim(train)?;
    if feature_dim(val)? != d {
        return Err(Error::contract("train and validation features differ in dimension"));
    }
    let dims = Dims {
        vocab: vocab.len(),
        embed: config.embed,
        hidden: config.hidden,
        feature: d,
    };

    let mut targets: Vec<(usize, usize, TokenSequence)> = Vec::new();
    for (i, r) in train.iter().enumerate() {
        for c in r.captions.iter().filter(|c| languages.contains(&c.lang)) {
            targets.push((i, vocab.start_id(&c.lang)?, vocab.encode(&c.tokens, &c.lang)?));
        }
    }
    let examples: Vec<Example> = targets
        .iter()
        .map(|(i, start_id, target)| Example {
            feature: &train[*i].feature,
            start_id: *start_id,
            target,
        })
        .collect();

    let mut params = init_params(dims, config.seed)?;
    let mut adam = AdamState::for_params(&params).with_lr(config.learning_rate);
    let mut shuffle = rng::stream(config.seed, Stream::Shuffle);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let stats = train_epoch(&examples, &mut params, &mut adam, config, &mut shuffle)?;
        if !params.is_finite() {
            return Err(Error::contract(format!("parameters became non-finite in epoch {epoch}")));
        }
        let ckpt = Checkpoint {
            model: CaptionModel::new(params.clone(), vocab.clone())?,
            config: config.clone(),
            epoch,
        };
        let val_cider = validation_score(&ckpt.model, val, config)?;
        let report = EpochReport {
            epoch,
            train_loss: stats.mean_loss,
            val_cider,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&report, &ckpt)?;
        let scores: Vec<f64> = history.iter().map(|r: &EpochReport| r.val_cider).chain([val_cider]).collect();
        if select_best_epoch(&scores)? == epoch - 1 {
            best = Some(ckpt);
        }
        history.push(report);
    }
    let best = best.expect("at least one epoch");
    Ok(FitOutcome {
        best_epoch: best.epoch,
        best,
        history,
    })
}
