//! Token vocabulary with reserved control symbols.
//!
//! Ids `0..3` are `<pad>`, `<unk>`, `<eos>`. They are followed by one start
//! token per language (`<en>`, `<jp>`, ...) in sorted language-code order, and
//! then the surface tokens by descending corpus frequency, ties broken
//! lexicographically.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOS_ID: usize = 2;

const FIRST_LANGUAGE_ID: usize = 3;

/// Start token string for a language code.
pub fn language_token(code: &str) -> String {
    format!("<{code}>")
}

/// Splits on whitespace. No other normalization is applied.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    language_start_ids: BTreeMap<String, usize>,
}

/// Encoded caption. The language start token is not part of `ids`; it is fed
/// to the decoder separately as the first input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub language: String,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    languages: Vec<String>,
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        let skip = FIRST_LANGUAGE_ID + v.language_start_ids.len();
        VocabRepr {
            languages: v.language_start_ids.keys().cloned().collect(),
            tokens: v.id_to_token[skip..].to_vec(),
        }
    }
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocabulary::from_parts(&r.languages, r.tokens)
    }
}

impl Vocabulary {
    /// Assembles a vocabulary from language codes and ordered surface tokens.
    pub fn from_parts(languages: &[String], surface: Vec<String>) -> Result<Self> {
        if languages.is_empty() {
            return Err(Error::contract("vocabulary needs at least one language"));
        }
        let langs: BTreeSet<&String> = languages.iter().collect();
        if langs.len() != languages.len() {
            return Err(Error::contract("duplicate language code"));
        }
        let mut id_to_token: Vec<String> = [PAD, UNK, EOS].iter().map(|s| s.to_string()).collect();
        let mut language_start_ids = BTreeMap::new();
        for code in langs {
            if code.is_empty() || code.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid language code {code:?}")));
            }
            language_start_ids.insert(code.clone(), id_to_token.len());
            id_to_token.push(language_token(code));
        }
        id_to_token.extend(surface);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i).is_some() {
                return Err(Error::contract(format!("token {tok:?} appears twice")));
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
            language_start_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Number of control ids (pad, unk, eos and every language start token).
    pub fn num_special(&self) -> usize {
        FIRST_LANGUAGE_ID + self.language_start_ids.len()
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.language_start_ids.keys().map(String::as_str)
    }

    pub fn language_start_ids(&self) -> &BTreeMap<String, usize> {
        &self.language_start_ids
    }

    pub fn start_id(&self, language: &str) -> Result<usize> {
        self.language_start_ids.get(language).copied().ok_or_else(|| {
            let known: Vec<&str> = self.languages().collect();
            Error::contract(format!(
                "unknown language {language:?}; known languages: {}",
                known.join(", ")
            ))
        })
    }

    pub fn is_language_start(&self, id: usize) -> bool {
        (FIRST_LANGUAGE_ID..self.num_special()).contains(&id)
    }

    /// Whether the decoder may emit `id`: everything except pad and the
    /// language start tokens.
    pub fn is_emittable(&self, id: usize) -> bool {
        id < self.len() && id != PAD_ID && !self.is_language_start(id)
    }

    pub fn encode(&self, tokens: &[String], language: &str) -> Result<TokenSequence> {
        self.start_id(language)?;
        let special = self.num_special();
        let mut ids: Vec<usize> = tokens
            .iter()
            .map(|t| match self.id(t) {
                Some(id) if id >= special => id,
                _ => UNK_ID,
            })
            .collect();
        ids.push(EOS_ID);
        Ok(TokenSequence {
            ids,
            language: language.to_string(),
        })
    }

    /// Surface tokens up to the first `<eos>`. Pad and start tokens are
    /// dropped; `<unk>` is kept.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.len()) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                len: self.len(),
            });
        }
        Ok(ids
            .iter()
            .take_while(|&&id| id != EOS_ID)
            .filter(|&&id| id != PAD_ID && !self.is_language_start(id))
            .map(|&id| self.id_to_token[id].clone())
            .collect())
    }
}

/// Builds a vocabulary from `(language, tokens)` pairs.
///
/// Surface tokens seen at least `min_count` times are kept. Tokens spelled
/// like a control symbol are never admitted.
pub fn build_vocab<'a, I>(corpus: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = (&'a str, &'a [String])>,
{
    if min_count < 1 {
        return Err(Error::contract("min_count must be at least 1"));
    }
    let mut languages = BTreeSet::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (lang, tokens) in corpus {
        languages.insert(lang.to_string());
        for t in tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if languages.is_empty() {
        return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
    }
    let reserved: BTreeSet<String> = [PAD, UNK, EOS]
        .iter()
        .map(|s| s.to_string())
        .chain(languages.iter().map(|l| language_token(l)))
        .collect();
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !reserved.contains(*t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let languages: Vec<String> = languages.into_iter().collect();
    Vocabulary::from_parts(&languages, kept.into_iter().map(|(t, _)| t.to_string()).collect())
}
