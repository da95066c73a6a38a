//! Command-line front end. Every configuration value is addressable by a
//! dotted key (`train.epochs`, `dsp.n_mels`, `toy.seen_split.seed`, ...),
//! settable from a flat `key = value` file and overridden by flags.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{self, CheckpointError, ModelCheckpoint};
use crate::corpus::{self, CorpusError, Split, ToyCorpusConfig, TrackRecord};
use crate::dsp::{DspConfig, DspError, MelFrontend};
use crate::encoder::{EncoderConfig, EncoderError};
use crate::eval::{self, Averaging, EvalError, Protocol, TargetTrack};
use crate::gradcheck;
use crate::inference::{InferenceError, ZeroShotModel};
use crate::trainer::{self, TrainConfig, TrainError, TrainingData};
use crate::words::{self, ResolutionPolicy, WordError, WordVectorTable};

type S = f32;

/// Failure classes, one per nonzero exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

fn data<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Data(format!("{context}: {e}"))
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Failure::Numeric(format!("trainer: {e}")),
            TrainError::Config(_) => Failure::Usage(format!("trainer: {e}")),
            _ => Failure::Data(format!("trainer: {e}")),
        }
    }
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Threshold(_) | InferenceError::BadK { .. } => {
                Failure::Usage(format!("inference: {e}"))
            }
            _ => Failure::Data(format!("inference: {e}")),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Inference(e) => e.into(),
            e => Failure::Data(format!("evaluation: {e}")),
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::Data(format!("corpus: {e}"))
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(format!("checkpoint: {e}"))
    }
}

impl From<WordError> for Failure {
    fn from(e: WordError) -> Self {
        Failure::Data(format!("word vectors: {e}"))
    }
}

impl From<DspError> for Failure {
    fn from(e: DspError) -> Self {
        Failure::Data(format!("audio: {e}"))
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// Options that belong to no single module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Hop between encoder patches, in frames.
    pub patch_stride: usize,
    /// `macro` or `global` retrieval-AUC averaging.
    pub averaging: String,
    /// `strict` or `averaging` tag resolution.
    pub policy: String,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            patch_stride: crate::inference::DEFAULT_PATCH_STRIDE,
            averaging: "macro".into(),
            policy: "strict".into(),
        }
    }
}

/// The full effective configuration of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dsp: DspConfig,
    pub encoder: EncoderConfig,
    pub toy: ToyCorpusConfig,
    pub run: RunOptions,
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn parse_like(key: &str, template: &Value, raw: &str) -> std::result::Result<Value, String> {
    let raw = raw.trim();
    let bad = |what: &str| format!("{key}: expected {what}, got {raw:?}");
    match template {
        Value::Bool(_) => match raw {
            "true" | "on" => Ok(Value::Bool(true)),
            "false" | "off" => Ok(Value::Bool(false)),
            _ => Err(bad("on/off or true/false")),
        },
        Value::Number(n) if n.is_u64() => raw
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| bad("a nonnegative integer")),
        Value::Number(_) => match raw.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Value::from(x)),
            _ => Err(bad("a finite number")),
        },
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(items) => {
            let element = items.first().cloned().unwrap_or(Value::from(0u64));
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            raw.split(',')
                .map(|part| parse_like(key, &element, part))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        _ => Err(format!("{key}: not settable")),
    }
}

fn display_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(display_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Applies `key = value` overrides on top of the defaults.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> std::result::Result<Self, String> {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(RunConfig::default()).expect("serializable"), &mut flat);
        for (key, raw) in pairs {
            let key = key.trim();
            let template = flat
                .get(key)
                .ok_or_else(|| format!("unknown configuration key {key:?}"))?;
            let value = parse_like(key, template, raw)?;
            flat.insert(key.to_string(), value);
        }
        let mut root = serde_json::Map::new();
        for (key, value) in flat {
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(serde_json::Map::new()))
                    .as_object_mut()
                    .expect("object");
            }
            node.insert(parts[parts.len() - 1].to_string(), value);
        }
        let config: RunConfig = serde_json::from_value(Value::Object(root)).map_err(|e| e.to_string())?;
        config.validate()?;
        Ok(config)
    }

    /// Every key with its effective value, in key order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("serializable"), &mut flat);
        flat.into_iter().map(|(k, v)| (k, display_value(&v))).collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.dsp.validate().map_err(|e| e.to_string())?;
        self.encoder.validate().map_err(|e: EncoderError| e.to_string())?;
        self.toy.validate().map_err(|e| e.to_string())?;
        if self.encoder.n_mels != self.dsp.n_mels {
            return Err(format!(
                "encoder.n_mels ({}) must equal dsp.n_mels ({})",
                self.encoder.n_mels, self.dsp.n_mels
            ));
        }
        if self.run.patch_stride == 0 {
            return Err("run.patch_stride must be >= 1".into());
        }
        self.averaging()?;
        self.policy()?;
        Ok(())
    }

    pub fn averaging(&self) -> std::result::Result<Averaging, String> {
        match self.run.averaging.as_str() {
            "macro" => Ok(Averaging::Macro),
            "global" => Ok(Averaging::Global),
            other => Err(format!("run.averaging: expected macro or global, got {other:?}")),
        }
    }

    pub fn policy(&self) -> std::result::Result<ResolutionPolicy, String> {
        match self.run.policy.as_str() {
            "strict" => Ok(ResolutionPolicy::Strict),
            "averaging" => Ok(ResolutionPolicy::Averaging),
            other => Err(format!("run.policy: expected strict or averaging, got {other:?}")),
        }
    }

    /// Renders the configuration as a config file that reproduces it.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parses a flat config file: `key = value` lines, `#` comments.
pub fn parse_config_text(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

#[derive(Parser, Debug)]
#[command(name = "tagspace", version, about = "Zero-shot music tagging in a joint audio/word space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` configuration file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for training and corpus synthesis [default: 0]
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Deterministic training
    #[arg(long, value_name = "on|off", value_parser = ["on", "off"], default_value = "on")]
    deterministic: String,
    /// Worker threads for per-example work [default: 1]
    #[arg(long, value_name = "INT")]
    threads: Option<usize>,
    /// Override any configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct ModelInputs {
    /// Trained checkpoint
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Word-vector text file (`token v1 ... vD` per line)
    #[arg(long = "word-vectors", value_name = "PATH")]
    word_vectors: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic toy corpus: WAV files, manifest, word vectors, tag lists
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train both branches and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Track manifest; tracks in the train split are used (all tracks if no splits)
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Word-vector text file
        #[arg(long = "word-vectors", value_name = "PATH")]
        word_vectors: PathBuf,
        /// Training vocabulary, one tag per line [default: tags of the training tracks]
        #[arg(long, value_name = "PATH")]
        tags: Option<PathBuf>,
        /// Output checkpoint path
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Score candidate tags for audio files
    Annotate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelInputs,
        /// Candidate tags, one per line
        #[arg(long, value_name = "PATH")]
        tags: PathBuf,
        /// Cosine threshold for selecting a tag, in [-1, 1]
        #[arg(long, value_name = "FLOAT", default_value_t = 0.5, allow_negative_numbers = true)]
        threshold: f64,
        /// Print only the best k tags per file [default: all]
        #[arg(long, value_name = "INT")]
        topk: Option<usize>,
        /// WAV files to annotate
        #[arg(required = true, value_name = "AUDIO")]
        audio: Vec<PathBuf>,
    },
    /// Rank manifest tracks by similarity to a query tag
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelInputs,
        /// Tracks to search
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Query tag
        #[arg(long, value_name = "TAG")]
        query: String,
        /// Number of tracks to return
        #[arg(long, value_name = "INT", default_value_t = 10)]
        topk: usize,
        /// Output file [default: stdout]
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Evaluate on a split of a manifest (retrieval AUC or genre accuracy)
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelInputs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Candidate tags, one per line [default: tags of the evaluated tracks]
        #[arg(long, value_name = "PATH")]
        tags: Option<PathBuf>,
    },
    /// Evaluate on a foreign corpus with its own label set and no adaptation
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelInputs,
        #[command(flatten)]
        eval: EvalArgs,
        /// The target corpus's candidate tags, one per line
        #[arg(long, value_name = "PATH")]
        tags: PathBuf,
    },
    /// Finite-difference check of every layer kind and the full objective
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds to check, starting at --seed
        #[arg(long, value_name = "INT", default_value_t = 1)]
        seeds: u64,
    },
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    /// Tracks to evaluate
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Metric
    #[arg(long, value_name = "auc|accuracy", default_value = "auc")]
    protocol: Protocol,
    /// Split to evaluate (train, valid, test or all); tracks without a split always count
    #[arg(long, value_name = "SPLIT", default_value = "test")]
    split: String,
    /// Write JSON-lines report here [default: stdout]
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(data(&format!("config {}", path.display())))?;
        pairs.extend(parse_config_text(&text).map_err(Failure::Usage)?);
    }
    if let Some(seed) = common.seed {
        pairs.push(("train.seed".into(), seed.to_string()));
        pairs.push(("toy.seed".into(), seed.to_string()));
    }
    pairs.push(("train.deterministic".into(), common.deterministic.clone()));
    if let Some(threads) = common.threads {
        pairs.push(("train.threads".into(), threads.to_string()));
    }
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    RunConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).map_err(Failure::Usage)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(data(&path.display().to_string()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

fn read_word_vectors(path: &Path) -> Result<WordVectorTable<S>> {
    let file = File::open(path).map_err(data(&path.display().to_string()))?;
    Ok(words::parse_word_vectors(BufReader::new(file), None)?.0)
}

fn read_manifest(path: &Path) -> Result<(Vec<TrackRecord>, PathBuf)> {
    let file = File::open(path).map_err(data(&path.display().to_string()))?;
    let records = corpus::load_manifest(BufReader::new(file))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((records, base))
}

fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint<S>> {
    let file = File::open(path).map_err(data(&path.display().to_string()))?;
    Ok(checkpoint::load_checkpoint(BufReader::new(file))?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(data(&path.display().to_string()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn config_header(config: &RunConfig) -> String {
    config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("# {k} = {v}\n"))
        .collect()
}

fn load_model(inputs: &ModelInputs, config: &RunConfig) -> Result<(ZeroShotModel<S>, WordVectorTable<S>)> {
    let checkpoint = read_checkpoint(&inputs.checkpoint)?;
    let model = ZeroShotModel::new(checkpoint)?.with_patch_stride(config.run.patch_stride);
    Ok((model, read_word_vectors(&inputs.word_vectors)?))
}

fn cmd_synth(config: &RunConfig, out: &Path) -> Result<()> {
    let toy = corpus::synth_toy_corpus::<S>(&config.toy)?;
    let audio_dir = out.join("audio");
    let exported = corpus::export_wavs(&toy.records, &audio_dir)?;
    let records: Vec<TrackRecord> = exported
        .into_iter()
        .map(|mut r| {
            if let corpus::AudioSource::Path(p) = &r.audio {
                r.audio = corpus::AudioSource::Path(Path::new("audio").join(p));
            }
            r
        })
        .collect();
    let mut manifest = Vec::new();
    corpus::write_manifest(&records, &mut manifest)?;
    write_file(&out.join("manifest.tsv"), &manifest)?;
    let unseen: HashSet<&String> = toy.unseen_tags.iter().collect();
    let target: Vec<TrackRecord> = records
        .iter()
        .filter(|r| r.tags.iter().any(|t| unseen.contains(t)))
        .cloned()
        .collect();
    let mut manifest = Vec::new();
    corpus::write_manifest(&target, &mut manifest)?;
    write_file(&out.join("unseen.tsv"), &manifest)?;
    let mut vectors = Vec::new();
    words::write_word_vectors(&toy.words, &mut vectors).map_err(data("word vectors"))?;
    write_file(&out.join("words.txt"), &vectors)?;
    let lines = |tags: &[String]| tags.iter().map(|t| format!("{t}\n")).collect::<String>();
    write_file(&out.join("seen_tags.txt"), lines(&toy.seen_tags).as_bytes())?;
    write_file(&out.join("unseen_tags.txt"), lines(&toy.unseen_tags).as_bytes())?;
    let all: Vec<String> = toy.seen_tags.iter().chain(&toy.unseen_tags).cloned().collect();
    write_file(&out.join("all_tags.txt"), lines(&all).as_bytes())?;
    write_file(&out.join("config.txt"), config.to_text().as_bytes())?;
    println!(
        "wrote {} tracks ({} seen tags, {} unseen) to {}",
        records.len(),
        toy.seen_tags.len(),
        toy.unseen_tags.len(),
        out.display()
    );
    Ok(())
}

fn select_split(records: &[TrackRecord], split: Option<Split>) -> Vec<&TrackRecord> {
    match split {
        None => records.iter().collect(),
        Some(s) => records.iter().filter(|r| r.split.is_none() || r.split == Some(s)).collect(),
    }
}

fn cmd_train(
    config: &RunConfig,
    manifest: &Path,
    word_vectors: &Path,
    tags: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (records, base) = read_manifest(manifest)?;
    let train = select_split(&records, Some(Split::Train));
    let table = read_word_vectors(word_vectors)?;
    let vocab_tags = match tags {
        Some(path) => read_lines(path)?,
        None => {
            let mut all: Vec<String> = train.iter().flat_map(|r| r.tags.iter().cloned()).collect();
            all.sort();
            all.dedup();
            all
        }
    };
    let vocab = words::build_label_matrix(&table, &vocab_tags, config.policy().map_err(Failure::Usage)?)?;
    if !vocab.dropped.is_empty() {
        eprintln!("dropped {} tags without word vectors: {}", vocab.dropped.len(), vocab.dropped.join(", "));
    }
    let frontend = MelFrontend::<S>::new(config.dsp)?;
    let mut tracks = Vec::with_capacity(train.len());
    for r in train {
        let mel = frontend.compute_any_rate(&r.load_audio(Some(&base))?)?;
        tracks.push((r.track_id.clone(), mel, r.tags.clone()));
    }
    let data = TrainingData::build(tracks, vocab, &config.encoder, config.dsp, config.run.patch_stride)?;
    let outcome = trainer::fit(&data, &config.encoder, &config.train)?;
    let mut checkpoint = outcome.checkpoint;
    checkpoint.meta.run_config = config.to_pairs();
    write_file(out, &checkpoint.to_bytes())?;
    for (epoch, loss) in outcome.loss_history.iter().enumerate() {
        println!("epoch {}\tloss {loss:.6}", epoch + 1);
    }
    println!("checkpoint {} ({})", out.display(), checkpoint.fingerprint());
    Ok(())
}

fn cmd_annotate(
    config: &RunConfig,
    inputs: &ModelInputs,
    tags: &Path,
    threshold: f64,
    topk: Option<usize>,
    audio: &[PathBuf],
) -> Result<()> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(InferenceError::Threshold(threshold).into());
    }
    let (model, table) = load_model(inputs, config)?;
    let index = model.label_index(&read_lines(tags)?, &table, config.policy().map_err(Failure::Usage)?)?;
    let mut text = config_header(config);
    for path in audio {
        let bytes = std::fs::read(path).map_err(data(&path.display().to_string()))?;
        let signal = crate::dsp::decode_wav::<S>(&bytes)?;
        let result = model.annotate(&signal, &index, threshold)?;
        let _ = writeln!(text, "{}", path.display());
        for (tag, score) in result.ranking.iter().take(topk.unwrap_or(usize::MAX)) {
            let mark = if result.selected.contains(tag) { "*" } else { "" };
            let _ = writeln!(text, "  {tag}\t{score:.6}\t{mark}");
        }
    }
    if !index.dropped().is_empty() {
        let _ = writeln!(text, "# dropped: {}", index.dropped().join(", "));
    }
    emit(None, &text)
}

fn embed_records(
    model: &ZeroShotModel<S>,
    records: &[&TrackRecord],
    base: &Path,
    threads: usize,
) -> Result<Vec<eval::EvalTrack<S>>> {
    let targets = records
        .iter()
        .map(|r| {
            Ok(TargetTrack {
                id: r.track_id.clone(),
                signal: r.load_audio(Some(base))?,
                tags: r.tags.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(eval::embed_tracks(model, &targets, threads)?)
}

fn cmd_retrieve(
    config: &RunConfig,
    inputs: &ModelInputs,
    manifest: &Path,
    query: &str,
    topk: usize,
    out: Option<&Path>,
) -> Result<()> {
    let (model, table) = load_model(inputs, config)?;
    let (records, base) = read_manifest(manifest)?;
    let policy = config.policy().map_err(Failure::Usage)?;
    let query_point = model.project_query(query, &table, policy)?;
    let refs: Vec<&TrackRecord> = records.iter().collect();
    let tracks: Vec<_> = embed_records(&model, &refs, &base, config.train.threads)?
        .into_iter()
        .map(|t| (t.id, t.embedding))
        .collect();
    let ranked = crate::inference::retrieve_tracks(&query_point, &tracks, topk.min(tracks.len()))?;
    let mut text = config_header(config);
    let _ = writeln!(text, "# query = {query}");
    for (rank, (id, score)) in ranked.iter().enumerate() {
        let _ = writeln!(text, "{}\t{id}\t{score:.6}", rank + 1);
    }
    emit(out, &text)
}

fn cmd_evaluate(
    config: &RunConfig,
    inputs: &ModelInputs,
    args: &EvalArgs,
    tags: Option<&Path>,
    transfer: bool,
) -> Result<()> {
    let split = match args.split.as_str() {
        "all" => None,
        s => Some(s.parse::<Split>().map_err(Failure::Usage)?),
    };
    let (model, table) = load_model(inputs, config)?;
    let (records, base) = read_manifest(&args.manifest)?;
    let selected = select_split(&records, split);
    let candidates = match tags {
        Some(path) => read_lines(path)?,
        None => {
            let mut all: Vec<String> = selected.iter().flat_map(|r| r.tags.iter().cloned()).collect();
            all.sort();
            all.dedup();
            all
        }
    };
    let target_name = args.manifest.display().to_string();
    if selected.is_empty() {
        return Err(EvalError::EmptyTarget(target_name).into());
    }
    let index = model.label_index(&candidates, &table, config.policy().map_err(Failure::Usage)?)?;
    let tracks = embed_records(&model, &selected, &base, config.train.threads)?;
    let mut report = eval::transfer_report(
        &model,
        &target_name,
        &index,
        &tracks,
        args.protocol,
        config.averaging().map_err(Failure::Usage)?,
    )?;
    if !transfer {
        report.zero_target_supervision = false;
        report.notes.retain(|n| !n.starts_with("no target-corpus"));
    }
    let mut run_config: Vec<(String, String)> = report
        .run_config
        .iter()
        .map(|(k, v)| (format!("checkpoint.{k}"), v.clone()))
        .collect();
    run_config.extend(config.to_pairs());
    report.run_config = run_config;
    let mut records_out = Vec::new();
    report.write_records(&mut records_out).map_err(data("report"))?;
    match &args.out {
        Some(path) => {
            write_file(path, &records_out)?;
            print!("{report}");
        }
        None => {
            std::io::stdout().write_all(&records_out).map_err(data("stdout"))?;
            eprint!("{report}");
        }
    }
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig, seeds: u64) -> Result<()> {
    let start = config.train.seed;
    let entries = gradcheck::run_suite(start..start + seeds.max(1))
        .map_err(|e| Failure::Numeric(format!("gradcheck: {e}")))?;
    let mut worst: f64 = 0.0;
    for e in &entries {
        println!("{:<26} seed {:<4} {}", e.name, e.seed, e.report);
        worst = worst.max(e.report.max_rel_error);
    }
    println!("max relative error {worst:.3e} (threshold {:.0e})", gradcheck::TOLERANCE);
    if worst < gradcheck::TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradcheck: max relative error {worst:.3e} exceeds {:.0e}",
            gradcheck::TOLERANCE
        )))
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { common, out } => cmd_synth(&effective_config(&common)?, &out),
        Command::Train {
            common,
            manifest,
            word_vectors,
            tags,
            checkpoint,
        } => cmd_train(
            &effective_config(&common)?,
            &manifest,
            &word_vectors,
            tags.as_deref(),
            &checkpoint,
        ),
        Command::Annotate {
            common,
            model,
            tags,
            threshold,
            topk,
            audio,
        } => {
            if !(-1.0..=1.0).contains(&threshold) {
                return Err(InferenceError::Threshold(threshold).into());
            }
            cmd_annotate(&effective_config(&common)?, &model, &tags, threshold, topk, &audio)
        }
        Command::Retrieve {
            common,
            model,
            manifest,
            query,
            topk,
            out,
        } => cmd_retrieve(&effective_config(&common)?, &model, &manifest, &query, topk, out.as_deref()),
        Command::Evaluate {
            common,
            model,
            eval,
            tags,
        } => cmd_evaluate(&effective_config(&common)?, &model, &eval, tags.as_deref(), false),
        Command::Transfer {
            common,
            model,
            eval,
            tags,
        } => cmd_evaluate(&effective_config(&common)?, &model, &eval, Some(&tags), true),
        Command::Gradcheck { common, seeds } => cmd_gradcheck(&effective_config(&common)?, seeds),
    }
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            failure.code()
        }
    }
}
