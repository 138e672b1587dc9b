//! Dataset records, JSONL I/O, splitting and the synthetic bilingual corpus.
//!
//! Datasets are line-delimited JSON, one image per line:
//!
//! ```json
//! {"image_id": "img-1", "feature": [0.1, 0.2], "captions": [{"lang": "en", "tokens": ["a", "cat"]}]}
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::vocab::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub lang: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub feature: Vec<f64>,
    #[serde(default)]
    pub captions: Vec<Caption>,
}

impl ImageRecord {
    pub fn captions_in<'a>(&'a self, lang: &'a str) -> impl Iterator<Item = &'a [String]> + 'a {
        self.captions
            .iter()
            .filter(move |c| c.lang == lang)
            .map(|c| c.tokens.as_slice())
    }

    pub fn languages(&self) -> BTreeSet<&str> {
        self.captions.iter().map(|c| c.lang.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    pub lowercase: bool,
    /// Scale every feature vector to unit L2 norm.
    pub feature_l2norm: bool,
    /// Accept records without captions (feature-only inputs for captioning).
    pub allow_missing_captions: bool,
}

fn data_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn load_dataset(path: &Path) -> Result<Vec<ImageRecord>> {
    load_dataset_with(path, &LoadOptions::default())
}

/// Reads a JSONL dataset, validating it as a whole. File order is preserved;
/// blank lines are skipped.
pub fn load_dataset_with(path: &Path, opts: &LoadOptions) -> Result<Vec<ImageRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records: Vec<ImageRecord> = Vec::new();
    let mut seen = HashSet::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ImageRecord =
            serde_json::from_str(&line).map_err(|e| data_err(path, line_no, format!("invalid record: {e}")))?;
        let id = &rec.image_id;
        if rec.feature.is_empty() {
            return Err(data_err(path, line_no, format!("image {id:?} has an empty feature vector")));
        }
        if rec.feature.iter().any(|x| !x.is_finite()) {
            return Err(data_err(path, line_no, format!("image {id:?} has non-finite feature values")));
        }
        match dim {
            None => dim = Some(rec.feature.len()),
            Some(d) if d != rec.feature.len() => {
                return Err(data_err(
                    path,
                    line_no,
                    format!("image {id:?} has feature length {} but earlier records have {d}", rec.feature.len()),
                ))
            }
            Some(_) => {}
        }
        if rec.captions.is_empty() && !opts.allow_missing_captions {
            return Err(data_err(path, line_no, format!("image {id:?} has no captions")));
        }
        if let Some(c) = rec.captions.iter().find(|c| c.lang.is_empty()) {
            return Err(data_err(path, line_no, format!("image {id:?} has a caption with empty language ({:?})", c.tokens)));
        }
        if !seen.insert(rec.image_id.clone()) {
            return Err(data_err(path, line_no, format!("duplicate image id {id:?}")));
        }
        if opts.lowercase {
            for c in &mut rec.captions {
                c.tokens = c.tokens.iter().map(|t| t.to_lowercase()).collect();
            }
        }
        if opts.feature_l2norm {
            l2_normalize(&mut rec.feature);
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub fn write_dataset(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// How to size the train/val/test partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    Counts { train: usize, val: usize, test: usize },
    Fractions { train: f64, val: f64, test: f64 },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitSpec {
    /// Concrete `(train, val, test)` sizes for `n` records.
    pub fn resolve(&self, n: usize) -> Result<(usize, usize, usize)> {
        match *self {
            SplitSpec::Counts { train, val, test } => {
                if train + val + test > n {
                    return Err(Error::contract(format!(
                        "split {train}+{val}+{test} exceeds the {n} available records"
                    )));
                }
                Ok((train, val, test))
            }
            SplitSpec::Fractions { train, val, test } => {
                let parts = [train, val, test];
                if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || parts.iter().sum::<f64>() > 1.0 + 1e-9 {
                    return Err(Error::contract(format!("invalid split fractions {parts:?}")));
                }
                let val_n = (val * n as f64).round() as usize;
                let test_n = (test * n as f64).round() as usize;
                let rest = n.saturating_sub(val_n + test_n);
                let train_n = ((train * n as f64).round() as usize).min(rest);
                SplitSpec::Counts {
                    train: train_n,
                    val: val_n,
                    test: test_n,
                }
                .resolve(n)
            }
        }
    }
}

impl FromStr for SplitSpec {
    type Err = String;

    /// `"22500,2000,2000"` (counts) or `"0.8,0.1,0.1"` (fractions).
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected three comma-separated values, got {s:?}"));
        }
        if let Ok(c) = parts.iter().map(|p| p.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>() {
            return Ok(SplitSpec::Counts {
                train: c[0],
                val: c[1],
                test: c[2],
            });
        }
        let f = parts
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format!("bad split {s:?}: {e}"))?;
        Ok(SplitSpec::Fractions {
            train: f[0],
            val: f[1],
            test: f[2],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

/// Seeded shuffle of whole images followed by a contiguous partition.
pub fn split_dataset(records: &[ImageRecord], spec: SplitSpec, seed: u64) -> Result<DatasetSplit> {
    let (n_train, n_val, n_test) = spec.resolve(records.len())?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Split));
    let take = |range: std::ops::Range<usize>| -> Vec<ImageRecord> {
        order[range].iter().map(|&i| records[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n_train + n_val + n_test),
    })
}

pub const SYNTH_COLORS: usize = 4;
pub const SYNTH_SHAPES: usize = 4;
pub const SYNTH_FEATURE_DIM: usize = SYNTH_COLORS * SYNTH_SHAPES;
pub const SYNTH_NOISE: f64 = 0.05;

enum Slot {
    Word(String),
    Color,
    Shape,
}

struct Lexicon {
    colors: [String; SYNTH_COLORS],
    shapes: [String; SYNTH_SHAPES],
    template: Vec<Slot>,
}

fn lexicon(lang: &str) -> Lexicon {
    let words = |ws: [&str; 4]| ws.map(String::from);
    match lang {
        "en" => Lexicon {
            colors: words(["red", "blue", "green", "yellow"]),
            shapes: words(["circle", "square", "triangle", "star"]),
            template: vec![
                Slot::Word("a".into()),
                Slot::Color,
                Slot::Shape,
                Slot::Word("is".into()),
                Slot::Word("shown".into()),
            ],
        },
        "jp" => Lexicon {
            colors: words(["aka", "ao", "midori", "kiiro"]),
            shapes: words(["maru", "shikaku", "sankaku", "hoshi"]),
            template: vec![Slot::Color, Slot::Word("no".into()), Slot::Shape, Slot::Word("desu".into())],
        },
        other => Lexicon {
            colors: std::array::from_fn(|i| format!("{other}_c{i}")),
            shapes: std::array::from_fn(|i| format!("{other}_s{i}")),
            template: vec![
                Slot::Word(format!("{other}_the")),
                Slot::Color,
                Slot::Shape,
                Slot::Word(format!("{other}_end")),
            ],
        },
    }
}

/// Ground-truth synthetic caption for an attribute pair.
pub fn synth_caption(lang: &str, color: usize, shape: usize) -> Vec<String> {
    let lex = lexicon(lang);
    lex.template
        .iter()
        .map(|slot| match slot {
            Slot::Word(w) => w.clone(),
            Slot::Color => lex.colors[color].clone(),
            Slot::Shape => lex.shapes[shape].clone(),
        })
        .collect()
}

/// Recovers `(color, shape)` from a well-formed synthetic caption.
pub fn synth_parse(lang: &str, tokens: &[String]) -> Option<(usize, usize)> {
    let lex = lexicon(lang);
    if tokens.len() != lex.template.len() {
        return None;
    }
    let (mut color, mut shape) = (None, None);
    for (slot, tok) in lex.template.iter().zip(tokens) {
        match slot {
            Slot::Word(w) if w == tok => {}
            Slot::Word(_) => return None,
            Slot::Color => color = Some(lex.colors.iter().position(|c| c == tok)?),
            Slot::Shape => shape = Some(lex.shapes.iter().position(|s| s == tok)?),
        }
    }
    Some((color?, shape?))
}

/// Every surface token the synthetic generator can produce for `lang`.
pub fn synth_lexicon(lang: &str) -> BTreeSet<String> {
    let lex = lexicon(lang);
    let mut out: BTreeSet<String> = lex.colors.iter().chain(&lex.shapes).cloned().collect();
    out.extend(lex.template.into_iter().filter_map(|s| match s {
        Slot::Word(w) => Some(w),
        _ => None,
    }));
    out
}

/// Index of the active one-hot entry of a synthetic feature.
pub fn synth_feature_index(color: usize, shape: usize) -> usize {
    color * SYNTH_SHAPES + shape
}

/// Desk-scale stand-in for a captioned image corpus.
///
/// Each image draws a color and a shape; its feature is the one-hot of the
/// pair over 16 slots plus uniform noise in ±0.05, and it gets one template
/// caption per requested language.
pub fn synth_generate(n_images: usize, seed: u64, languages: &[String]) -> Result<Vec<ImageRecord>> {
    if n_images == 0 {
        return Err(Error::contract("synthetic dataset needs at least one image"));
    }
    if languages.is_empty() {
        return Err(Error::contract("synthetic dataset needs at least one language"));
    }
    let mut rng = rng::stream(seed, Stream::Synth);
    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let color = rng.gen_range(0..SYNTH_COLORS);
        let shape = rng.gen_range(0..SYNTH_SHAPES);
        let mut feature: Vec<f64> = (0..SYNTH_FEATURE_DIM)
            .map(|_| rng.gen_range(-SYNTH_NOISE..=SYNTH_NOISE))
            .collect();
        feature[synth_feature_index(color, shape)] += 1.0;
        let captions = languages
            .iter()
            .map(|lang| Caption {
                lang: lang.clone(),
                tokens: synth_caption(lang, color, shape),
            })
            .collect();
        records.push(ImageRecord {
            image_id: format!("synth-{i:06}"),
            feature,
            captions,
        });
    }
    Ok(records)
}

#[derive(Deserialize)]
struct CocoAnnotations {
    annotations: Vec<CocoCaption>,
}

#[derive(Deserialize)]
struct CocoCaption {
    image_id: serde_json::Value,
    caption: String,
}

#[derive(Deserialize)]
struct FeatureLine {
    image_id: serde_json::Value,
    feature: Vec<f64>,
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Best-effort import of MSCOCO-style caption annotations.
///
/// `features` is a JSONL file of `{"image_id", "feature"}` objects. Captions
/// are split on whitespace. Images lacking either a feature or a caption are
/// dropped; output follows the order of the feature file.
pub fn import_coco(annotations: &Path, features: &Path, lang: &str, lowercase: bool) -> Result<Vec<ImageRecord>> {
    let ann: CocoAnnotations = serde_json::from_reader(BufReader::new(File::open(annotations)?))
        .map_err(|e| data_err(annotations, 0, format!("invalid annotation file: {e}")))?;
    let mut captions: HashMap<String, Vec<Caption>> = HashMap::new();
    for a in ann.annotations {
        captions.entry(id_string(&a.image_id)).or_default().push(Caption {
            lang: lang.to_string(),
            tokens: tokenize(&a.caption, lowercase),
        });
    }
    let reader = BufReader::new(File::open(features)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FeatureLine = serde_json::from_str(&line).map_err(|e| data_err(features, i + 1, e.to_string()))?;
        let id = id_string(&f.image_id);
        if let Some(caps) = captions.remove(&id) {
            records.push(ImageRecord {
                image_id: id,
                feature: f.feature,
                captions: caps,
            });
        }
    }
    Ok(records)
}

/// Adds the captions of `extra` to matching images of `base`; unmatched
/// images of `extra` are appended.
pub fn merge_records(base: &mut Vec<ImageRecord>, extra: Vec<ImageRecord>) -> Result<()> {
    let index: HashMap<String, usize> = base.iter().enumerate().map(|(i, r)| (r.image_id.clone(), i)).collect();
    for rec in extra {
        match index.get(&rec.image_id) {
            Some(&i) => {
                if base[i].feature != rec.feature {
                    return Err(Error::contract(format!(
                        "image {:?} has different features in the merged files",
                        rec.image_id
                    )));
                }
                base[i].captions.extend(rec.captions);
            }
            None => base.push(rec),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_and_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            r#"{"image_id":"b","feature":[1.0,2.0],"captions":[{"lang":"en","tokens":["A","cat"]}]}

{"image_id":"a","feature":[3.0,4.0],"captions":[{"lang":"jp","tokens":["neko"]}]}
"#,
        );
        let recs = load_dataset(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].image_id, "b");
        assert_eq!(recs[1].image_id, "a");

        let opts = LoadOptions {
            lowercase: true,
            feature_l2norm: true,
            ..LoadOptions::default()
        };
        let recs = load_dataset_with(&p, &opts).unwrap();
        assert_eq!(recs[0].captions[0].tokens, vec!["a", "cat"]);
        assert!((recs[1].feature[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ragged_features_name_the_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            r#"{"image_id":"x","feature":[1.0,2.0],"captions":[{"lang":"en","tokens":["a"]}]}
{"image_id":"odd","feature":[1.0],"captions":[{"lang":"en","tokens":["a"]}]}
"#,
        );
        let err = load_dataset(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("\"odd\"") && msg.contains(":2:"), "{msg}");
        assert!(matches!(err, Error::Data { line: 2, .. }));
    }

    #[test]
    fn validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            r#"{"image_id":"x","feature":[1.0],"captions":[]}"#,
            r#"{"image_id":"x","feature":[1.0]}"#,
            r#"{"image_id":"x","feature":[],"captions":[{"lang":"en","tokens":[]}]}"#,
            "not json",
            "{\"image_id\":\"x\",\"feature\":[1.0],\"captions\":[{\"lang\":\"en\",\"tokens\":[]}]}\n{\"image_id\":\"x\",\"feature\":[1.0],\"captions\":[{\"lang\":\"en\",\"tokens\":[]}]}",
        ];
        for (i, body) in cases.iter().enumerate() {
            let p = write(&dir, &format!("c{i}.jsonl"), body);
            assert!(matches!(load_dataset(&p), Err(Error::Data { .. })), "case {i}");
        }
        let p = write(&dir, "feat.jsonl", r#"{"image_id":"x","feature":[1.0]}"#);
        let opts = LoadOptions {
            allow_missing_captions: true,
            ..LoadOptions::default()
        };
        assert_eq!(load_dataset_with(&p, &opts).unwrap().len(), 1);
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let recs = synth_generate(5, 3, &["en".into(), "jp".into()]).unwrap();
        let p = dir.path().join("s.jsonl");
        write_dataset(&p, &recs).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), recs);
    }

    #[test]
    fn split_partitions_and_is_deterministic() {
        let recs = synth_generate(10, 1, &["en".into()]).unwrap();
        let spec = SplitSpec::Counts {
            train: 6,
            val: 2,
            test: 2,
        };
        let s = split_dataset(&recs, spec, 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let ids: HashSet<&str> = s.train.iter().chain(&s.val).chain(&s.test).map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids.len(), 10);
        assert_eq!(s, split_dataset(&recs, spec, 4).unwrap());
        assert_ne!(s.train, split_dataset(&recs, spec, 5).unwrap().train);
        let too_many = SplitSpec::Counts {
            train: 9,
            val: 1,
            test: 1,
        };
        assert!(split_dataset(&recs, too_many, 4).is_err());
    }

    #[test]
    fn split_spec_parsing_and_sizes() {
        let c: SplitSpec = "22500,2000,2000".parse().unwrap();
        assert_eq!(c.resolve(26_500).unwrap(), (22_500, 2_000, 2_000));
        let f: SplitSpec = "0.8,0.1,0.1".parse().unwrap();
        assert_eq!(f.resolve(50).unwrap(), (40, 5, 5));
        assert!("1,2".parse::<SplitSpec>().is_err());
        assert!("0.9,0.9,0.1".parse::<SplitSpec>().unwrap().resolve(10).is_err());
    }

    #[test]
    fn synth_is_reproducible_and_invertible() {
        let langs = vec!["en".to_string(), "jp".to_string()];
        let a = synth_generate(1, 7, &langs).unwrap();
        assert_eq!(a, synth_generate(1, 7, &langs).unwrap());
        let recs = synth_generate(64, 2, &langs).unwrap();
        for r in &recs {
            assert_eq!(r.captions.len(), 2);
            assert_eq!(r.feature.len(), SYNTH_FEATURE_DIM);
            let hot = r
                .feature
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            for c in &r.captions {
                let (color, shape) = synth_parse(&c.lang, &c.tokens).unwrap();
                assert_eq!(synth_feature_index(color, shape), hot);
            }
        }
        let en = synth_lexicon("en");
        let jp = synth_lexicon("jp");
        assert!(en.is_disjoint(&jp));
        assert!(synth_lexicon("de").is_disjoint(&en));
        assert!(synth_generate(0, 1, &langs).is_err());
        assert!(synth_generate(1, 1, &[]).is_err());
    }

    #[test]
    fn coco_import_and_merge() {
        let dir = tempfile::tempdir().unwrap();
        let ann = write(
            &dir,
            "ann.json",
            r#"{"images":[{"id":1},{"id":2}],"annotations":[{"image_id":1,"caption":"A dog runs"},{"image_id":1,"caption":"dog"},{"image_id":3,"caption":"x"}]}"#,
        );
        let feats = write(&dir, "f.jsonl", "{\"image_id\":1,\"feature\":[0.5]}\n{\"image_id\":\"2\",\"feature\":[0.1]}\n");
        let mut recs = import_coco(&ann, &feats, "en", true).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].image_id, "1");
        assert_eq!(recs[0].captions[0].tokens, vec!["a", "dog", "runs"]);

        let jp = vec![ImageRecord {
            image_id: "1".into(),
            feature: vec![0.5],
            captions: vec![Caption {
                lang: "jp".into(),
                tokens: vec!["inu".into()],
            }],
        }];
        merge_records(&mut recs, jp).unwrap();
        assert_eq!(recs[0].captions.len(), 3);
    }
}
