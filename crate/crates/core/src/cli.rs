//! The `mlcap` command line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::beam::BeamConfig;
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::data::{
    import_coco, load_dataset, load_dataset_with, merge_records, split_dataset, synth_generate, write_dataset,
    ImageRecord, LoadOptions, SplitSpec,
};
use crate::error::Error;
use crate::metrics::{evaluate_corpus, CorpusEval, EvalItem, MetricReport};
use crate::model::Dims;
use crate::pipeline::{caption_image, fit, resolve_languages, vocab_for};
use crate::trainer::{gradient_suite, LossNorm, TrainConfig};
use crate::vocab::tokenize;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_GRADCHECK: i32 = 4;

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: max relative error {0:e} >= {GRADCHECK_TOLERANCE:e}")]
    GradCheck(f64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::GradCheck(_) => EXIT_GRADCHECK,
            CliError::Lib(e) => match e {
                Error::Io(_) | Error::Contract(_) => EXIT_USAGE,
                Error::Data { .. }
                | Error::Json(_)
                | Error::Checkpoint(_)
                | Error::Dimension { .. }
                | Error::Index { .. } => EXIT_DATA,
            },
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mlcap", version, about = "Multilingual image captioning with language start tokens")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic bilingual dataset as JSONL.
    Synth(SynthArgs),
    /// List the vocabulary a dataset would produce, one `id<TAB>token` per line.
    BuildVocab(BuildVocabArgs),
    /// Train one model over all requested languages.
    Train(TrainArgs),
    /// Caption images with a trained checkpoint.
    Caption(CaptionArgs),
    /// Score generated captions with BLEU-1..4 and CIDEr.
    Evaluate(EvaluateArgs),
    /// Compare autodiff and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Convert COCO-style caption annotations plus a feature file to JSONL.
    ImportCoco(ImportCocoArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, short = 'n', default_value_t = 1200)]
    pub images: usize,
    #[arg(long, default_value = "en,jp", value_delimiter = ',')]
    pub langs: Vec<String>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output file; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated language codes; all present languages if omitted.
    #[arg(long, value_delimiter = ',')]
    pub langs: Option<Vec<String>>,
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub langs: Option<Vec<String>>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    #[arg(long, default_value_t = 512)]
    pub embed: usize,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Beam width recorded for captioning with the trained model.
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Beam width for validation decoding during model selection.
    #[arg(long, default_value_t = 5)]
    pub val_beam: usize,
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    /// Sum the loss over tokens instead of averaging.
    #[arg(long)]
    pub loss_sum: bool,
    /// Clip the global gradient norm; `--clip` alone uses 5.0.
    #[arg(long, num_args = 0..=1, default_missing_value = "5.0")]
    pub clip: Option<f64>,
    #[arg(long)]
    pub length_norm: bool,
    #[arg(long)]
    pub feature_l2norm: bool,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Keep only best.ckpt instead of one checkpoint per epoch.
    #[arg(long)]
    pub best_only: bool,
    /// `train,val,test` as counts or fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub split: SplitSpec,
    /// Resolve the configuration and write manifest.json without training.
    #[arg(long)]
    pub dry_run: bool,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            hidden: self.hidden,
            embed: self.embed,
            beam: self.beam,
            val_beam: self.val_beam,
            max_len: self.max_len,
            seed: self.seed,
            min_count: self.min_count,
            languages: self.langs.clone().unwrap_or_default(),
            loss_norm: if self.loss_sum { LossNorm::Sum } else { LossNorm::PerToken },
            clip: self.clip,
            learning_rate: self.learning_rate.unwrap_or(TrainConfig::default().learning_rate),
            lowercase: self.lowercase,
            feature_l2norm: self.feature_l2norm,
            length_norm: self.length_norm,
        }
    }
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSONL records; captions are optional.
    #[arg(long)]
    pub features: PathBuf,
    /// Language whose start token seeds generation.
    #[arg(long)]
    pub lang: String,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Defaults to the value the checkpoint was trained with.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub length_norm: bool,
    /// Normalize features; implied when the checkpoint was trained that way.
    #[arg(long)]
    pub feature_l2norm: bool,
    /// Output file; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write `id<TAB>lang<TAB>tokens` instead of `id<TAB>tokens`.
    #[arg(long)]
    pub tag_lang: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Lines of `id<TAB>tokens` (with --lang) or `id<TAB>lang<TAB>tokens`.
    #[arg(long)]
    pub candidates: PathBuf,
    /// JSONL dataset holding the ground-truth captions.
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long)]
    pub lang: Option<String>,
    #[arg(long)]
    pub lowercase: bool,
    /// Output file; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub vocab: usize,
    #[arg(long, default_value_t = 6)]
    pub embed: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 5)]
    pub feature: usize,
    #[arg(long, default_value_t = 4)]
    pub seq_len: usize,
}

#[derive(Debug, Args)]
pub struct ImportCocoArgs {
    /// COCO captions JSON (`annotations: [{image_id, caption}]`).
    #[arg(long)]
    pub annotations: PathBuf,
    /// JSONL of `{image_id, feature}`.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub lowercase: bool,
    /// Existing dataset to add the captions to.
    #[arg(long)]
    pub merge: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mlcap_version: String,
    pub checkpoint_format: u32,
    pub data: PathBuf,
    pub out: PathBuf,
    pub split: String,
    pub split_sizes: [usize; 3],
    pub languages: Vec<String>,
    pub best_only: bool,
    pub config: TrainConfig,
    pub best_epoch: Option<usize>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::BuildVocab(a) => cmd_build_vocab(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Caption(a) => cmd_caption(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::ImportCoco(a) => cmd_import_coco(&a),
    }
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    if a.images == 0 {
        return Err(CliError::Usage("--images must be positive".into()));
    }
    write_dataset(&a.out, &synth_generate(a.images, a.seed, &a.langs)?)?;
    Ok(())
}

pub fn cmd_build_vocab(a: &BuildVocabArgs) -> CliResult<()> {
    require_file(&a.data, "dataset")?;
    let opts = LoadOptions {
        lowercase: a.lowercase,
        ..LoadOptions::default()
    };
    let records = load_dataset_with(&a.data, &opts)?;
    let langs = resolve_languages(&records, a.langs.as_deref().unwrap_or_default())?;
    let vocab = vocab_for(&records, &langs, a.min_count)?;
    let mut out = output(a.out.as_deref())?;
    for (id, tok) in vocab.tokens().iter().enumerate() {
        writeln!(out, "{id}\t{tok}")?;
    }
    out.flush()?;
    Ok(())
}

fn split_label(spec: &SplitSpec) -> String {
    match *spec {
        SplitSpec::Counts { train, val, test } => format!("{train},{val},{test}"),
        SplitSpec::Fractions { train, val, test } => format!("{train},{val},{test}"),
    }
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> CliResult<()> {
    let mut json = serde_json::to_string_pretty(manifest).map_err(Error::from)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let config = a.config();
    if let Err(e) = config.validate() {
        return Err(CliError::Usage(e.to_string()));
    }
    require_file(&a.data, "dataset")?;
    let opts = LoadOptions {
        lowercase: a.lowercase,
        feature_l2norm: a.feature_l2norm,
        allow_missing_captions: false,
    };
    let records = load_dataset_with(&a.data, &opts)?;
    let split = split_dataset(&records, a.split, config.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest {
        mlcap_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_format: FORMAT_VERSION,
        data: a.data.clone(),
        out: a.out.clone(),
        split: split_label(&a.split),
        split_sizes: [split.train.len(), split.val.len(), split.test.len()],
        languages: resolve_languages(&split.train, &config.languages)?,
        best_only: a.best_only,
        config: config.clone(),
        best_epoch: None,
    };
    write_manifest(&a.out, &manifest)?;
    if a.dry_run {
        return Ok(());
    }

    let splits = a.out.join("splits");
    fs::create_dir_all(&splits)?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        write_dataset(&splits.join(format!("{name}.jsonl")), part)?;
    }

    let mut log = BufWriter::new(File::create(a.out.join("train.log"))?);
    writeln!(log, "epoch\ttrain_loss\tval_cider\tseconds")?;
    println!("epoch\ttrain_loss\tval_cider\tseconds");
    let outcome = fit(&split.train, &split.val, &config, |r, ckpt| {
        let line = format!("{}\t{:.6}\t{:.6}\t{:.2}", r.epoch, r.train_loss, r.val_cider, r.seconds);
        writeln!(log, "{line}")?;
        log.flush()?;
        println!("{line}");
        if !a.best_only {
            ckpt.save(&a.out.join(format!("epoch-{:03}.ckpt", r.epoch)))?;
        }
        Ok(())
    })?;
    outcome.best.save(&a.out.join("best.ckpt"))?;
    println!("best epoch {}", outcome.best_epoch);
    manifest.best_epoch = Some(outcome.best_epoch);
    write_manifest(&a.out, &manifest)?;
    Ok(())
}

pub fn cmd_caption(a: &CaptionArgs) -> CliResult<()> {
    require_file(&a.ckpt, "checkpoint")?;
    require_file(&a.features, "feature file")?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = &ckpt.model;
    if model.vocab.start_id(&a.lang).is_err() {
        let known: Vec<&str> = model.vocab.languages().collect();
        return Err(CliError::Usage(format!(
            "unknown language {:?}; this checkpoint knows: {}",
            a.lang,
            known.join(", ")
        )));
    }
    let beam = BeamConfig {
        width: a.beam,
        max_len: a.max_len.unwrap_or(ckpt.config.max_len),
        length_norm: a.length_norm,
    };
    if beam.width == 0 || beam.max_len == 0 {
        return Err(CliError::Usage("--beam and --max-len must be positive".into()));
    }
    let opts = LoadOptions {
        lowercase: false,
        feature_l2norm: a.feature_l2norm || ckpt.config.feature_l2norm,
        allow_missing_captions: true,
    };
    let records = load_dataset_with(&a.features, &opts)?;
    let mut out = output(a.out.as_deref())?;
    for r in &records {
        let tokens = caption_image(model, &r.feature, &a.lang, &beam)?.join(" ");
        if a.tag_lang {
            writeln!(out, "{}\t{}\t{tokens}", r.image_id, a.lang)?;
        } else {
            writeln!(out, "{}\t{tokens}", r.image_id)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(flatten)]
    pub overall: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub languages: Option<BTreeMap<String, MetricReport>>,
}

/// Candidate captions keyed by `(image_id, language)`.
pub fn read_candidates(path: &Path, lang: Option<&str>, lowercase: bool) -> CliResult<BTreeMap<(String, String), Vec<String>>> {
    let mut out = BTreeMap::new();
    let file = BufReader::new(File::open(path)?);
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| Error::Data {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let (id, language, text) = match (fields.as_slice(), lang) {
            ([id, l, text], _) => (*id, *l, *text),
            ([id, text], Some(l)) => (*id, l, *text),
            ([_, _], None) => {
                return Err(CliError::Usage(format!(
                    "{}:{lineno}: two-column candidates need --lang",
                    path.display()
                )))
            }
            _ => return Err(bad(format!("expected 2 or 3 tab-separated fields, got {}", fields.len())).into()),
        };
        let key = (id.to_string(), language.to_string());
        if out.insert(key, tokenize(text, lowercase)).is_some() {
            return Err(bad(format!("duplicate candidate for image {id:?} in {language:?}")).into());
        }
    }
    Ok(out)
}

pub fn evaluate_candidates(
    candidates: &BTreeMap<(String, String), Vec<String>>,
    references: &[ImageRecord],
) -> CliResult<EvaluationReport> {
    if candidates.is_empty() {
        return Err(CliError::Usage("no candidate captions to evaluate".into()));
    }
    let by_id: BTreeMap<&str, &ImageRecord> = references.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut per_lang: BTreeMap<&str, Vec<EvalItem>> = BTreeMap::new();
    for ((id, lang), cand) in candidates {
        let rec = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::contract(format!("no reference record for image {id:?}")))?;
        let refs: Vec<Vec<String>> = rec.captions_in(lang).map(<[String]>::to_vec).collect();
        if refs.is_empty() {
            return Err(Error::contract(format!("image {id:?} has no {lang:?} reference captions")).into());
        }
        per_lang.entry(lang).or_default().push(EvalItem {
            candidate: cand.clone(),
            references: refs,
        });
    }
    let all: Vec<EvalItem> = per_lang.values().flatten().cloned().collect();
    let overall = evaluate_corpus(&CorpusEval::new(all))?;
    let languages = if per_lang.len() > 1 {
        let mut m = BTreeMap::new();
        for (lang, items) in per_lang {
            m.insert(lang.to_string(), evaluate_corpus(&CorpusEval::new(items))?);
        }
        Some(m)
    } else {
        None
    };
    Ok(EvaluationReport { overall, languages })
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    require_file(&a.candidates, "candidate file")?;
    require_file(&a.references, "reference file")?;
    let candidates = read_candidates(&a.candidates, a.lang.as_deref(), a.lowercase)?;
    let opts = LoadOptions {
        lowercase: a.lowercase,
        ..LoadOptions::default()
    };
    let references = load_dataset_with(&a.references, &opts)?;
    let report = evaluate_candidates(&candidates, &references)?;
    let mut out = output(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report).map_err(Error::from)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let dims = Dims {
        vocab: a.vocab,
        embed: a.embed,
        hidden: a.hidden,
        feature: a.feature,
    };
    let report = gradient_suite(dims, a.seq_len, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut text = String::new();
    for (name, err) in crate::model::PARAM_NAMES.iter().zip(&report.per_input) {
        let _ = writeln!(text, "{name:<18} {err:.3e}");
    }
    let _ = writeln!(text, "coordinates checked: {}", report.coordinates);
    let _ = writeln!(text, "max relative error: {:.3e}", report.max_rel_err);
    print!("{text}");
    if !(report.max_rel_err < GRADCHECK_TOLERANCE) {
        return Err(CliError::GradCheck(report.max_rel_err));
    }
    Ok(())
}

pub fn cmd_import_coco(a: &ImportCocoArgs) -> CliResult<()> {
    require_file(&a.annotations, "annotation file")?;
    require_file(&a.features, "feature file")?;
    let imported = import_coco(&a.annotations, &a.features, &a.lang, a.lowercase)?;
    let records = match &a.merge {
        Some(base) => {
            require_file(base, "dataset")?;
            let mut records = load_dataset(base)?;
            merge_records(&mut records, imported)?;
            records
        }
        None => imported,
    };
    let langs: BTreeSet<&str> = records.iter().flat_map(|r| r.languages()).collect();
    write_dataset(&a.out, &records)?;
    eprintln!("wrote {} images ({})", records.len(), langs.into_iter().collect::<Vec<_>>().join(", "));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::DEFAULT_CLIP_NORM;

    #[test]
    fn train_defaults() {
        let cli = Cli::try_parse_from(["mlcap", "train", "--data", "d.jsonl", "--out", "o"]).unwrap();
        let Command::Train(args) = cli.command else { panic!() };
        let c = args.config();
        assert_eq!((c.epochs, c.batch_size, c.hidden, c.beam), (40, 128, 512, 5));
        assert_eq!(c, TrainConfig::default());
        assert_eq!(args.split, SplitSpec::default());

        let cli = Cli::try_parse_from(["mlcap", "train", "--data", "d", "--out", "o", "--langs", "en,jp"]).unwrap();
        let Command::Train(args) = cli.command else { panic!() };
        assert_eq!(args.config().languages, vec!["en", "jp"]);
    }

    #[test]
    fn clip_flag_forms() {
        let parse = |extra: &[&str]| {
            let mut argv = vec!["mlcap", "train", "--data", "d", "--out", "o"];
            argv.extend_from_slice(extra);
            let Command::Train(a) = Cli::try_parse_from(argv).unwrap().command else { panic!() };
            a.config().clip
        };
        assert_eq!(parse(&[]), None);
        assert_eq!(parse(&["--clip"]), Some(DEFAULT_CLIP_NORM));
        assert_eq!(parse(&["--clip", "2.5"]), Some(2.5));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(Error::contract("x")).exit_code(), 2);
        assert_eq!(CliError::from(Error::Checkpoint("x".into())).exit_code(), 3);
        assert_eq!(CliError::GradCheck(1.0).exit_code(), 4);
    }

    #[test]
    fn candidate_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        fs::write(&p, "a\tred circle\nb\tjp\taka no maru desu\nc\t\n").unwrap();
        let c = read_candidates(&p, Some("en"), false).unwrap();
        assert_eq!(c[&("a".into(), "en".into())], vec!["red", "circle"]);
        assert_eq!(c[&("b".into(), "jp".into())].len(), 4);
        assert!(c[&("c".into(), "en".into())].is_empty());
        assert_eq!(read_candidates(&p, None, false).unwrap_err().exit_code(), 2);
        fs::write(&p, "a\tx\na\tx\n").unwrap();
        assert_eq!(read_candidates(&p, Some("en"), false).unwrap_err().exit_code(), 3);
    }
}
