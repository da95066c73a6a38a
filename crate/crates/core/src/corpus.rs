//! Track manifests, seeded train/valid/test splits, and the synthetic toy
//! corpus of harmonic tones whose held-out classes interpolate seen ones in
//! both audio and word space.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, DspError, MelSpectrogram, PcmSignal, WavEncoding};
use crate::scalar::Scalar;
use crate::words::{WordError, WordVectorTable};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("manifest line {line}: duplicate track id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("invalid split spec: {0}")]
    SplitSpec(String),
    #[error("{records} records cannot fill {buckets} nonzero split buckets")]
    TooFewRecords { records: usize, buckets: usize },
    #[error("invalid toy corpus config: {0}")]
    ToyConfig(String),
    #[error("track {0:?} has inline audio and no path; export it first")]
    InlineAudio(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Word(#[from] WordError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Recipe for one synthetic harmonic tone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneSpec {
    pub fundamental: f64,
    pub amplitudes: Vec<f64>,
    pub phase: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub noise_stream: u64,
    pub duration_secs: f64,
    pub sample_rate: u32,
}

impl ToneSpec {
    /// `Σₖ aₖ·sin(2π·k·f·t + φ) / Σₖ aₖ` plus Gaussian noise, clamped to [-1, 1].
    pub fn render<S: Scalar>(&self) -> Result<PcmSignal<S>> {
        let n = (self.duration_secs * self.sample_rate as f64).round() as usize;
        let norm: f64 = self.amplitudes.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        rng.set_stream(self.noise_stream);
        let noise = Normal::new(0.0, self.noise_sigma)
            .map_err(|e| CorpusError::ToyConfig(e.to_string()))?;
        let rate = self.sample_rate as f64;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                let tone: f64 = self
                    .amplitudes
                    .iter()
                    .enumerate()
                    .map(|(k, a)| a * (2.0 * PI * (k + 1) as f64 * self.fundamental * t + self.phase).sin())
                    .sum();
                S::lit((tone / norm + noise.sample(&mut rng)).clamp(-1.0, 1.0))
            })
            .collect();
        Ok(PcmSignal::new(samples, self.sample_rate)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AudioSource {
    Path(PathBuf),
    Synthetic(ToneSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub track_id: String,
    pub audio: AudioSource,
    pub tags: Vec<String>,
    pub split: Option<Split>,
}

impl TrackRecord {
    /// Decodes or synthesises the track's audio. Relative paths are taken
    /// relative to `base`.
    pub fn load_audio<S: Scalar>(&self, base: Option<&Path>) -> Result<PcmSignal<S>> {
        match &self.audio {
            AudioSource::Synthetic(spec) => spec.render(),
            AudioSource::Path(p) => {
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                let bytes = std::fs::read(&path).map_err(|source| CorpusError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                Ok(dsp::decode_wav(&bytes)?)
            }
        }
    }
}

/// Reads `track_id TAB path TAB tag,tag,... [TAB split]` lines. Blank lines
/// are ignored.
pub fn load_manifest<R: BufRead>(source: R) -> Result<Vec<TrackRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| CorpusError::Malformed {
            line: line_no,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(bad(&format!("expected 3 or 4 tab-separated fields, found {}", fields.len())));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(bad("empty track id"));
        }
        if fields[1].trim().is_empty() {
            return Err(bad("empty audio path"));
        }
        let tags: Vec<String> = fields[2]
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        if tags.is_empty() {
            return Err(bad("empty tag list"));
        }
        let split = match fields.get(3).map(|s| s.trim()) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<Split>().map_err(|e| bad(&e))?),
        };
        if !ids.insert(id.to_string()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: id.to_string(),
            });
        }
        records.push(TrackRecord {
            track_id: id.to_string(),
            audio: AudioSource::Path(PathBuf::from(fields[1].trim())),
            tags,
            split,
        });
    }
    Ok(records)
}

pub fn write_manifest<W: Write>(records: &[TrackRecord], mut out: W) -> Result<()> {
    let io = |source| CorpusError::Io {
        path: "<manifest>".into(),
        source,
    };
    for r in records {
        let AudioSource::Path(path) = &r.audio else {
            return Err(CorpusError::InlineAudio(r.track_id.clone()));
        };
        write!(out, "{}\t{}\t{}", r.track_id, path.display(), r.tags.join(",")).map_err(io)?;
        if let Some(split) = r.split {
            write!(out, "\t{split}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    Ok(())
}

/// Renders every synthetic record to `dir/<track_id>.wav` (16-bit PCM) and
/// returns the records pointing at those files by relative name.
pub fn export_wavs(records: &[TrackRecord], dir: &Path) -> Result<Vec<TrackRecord>> {
    std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            if let AudioSource::Synthetic(spec) = &r.audio {
                let name = format!("{}.wav", r.track_id);
                let bytes = dsp::encode_wav(&spec.render::<f64>()?, WavEncoding::Pcm16)?;
                let path = dir.join(&name);
                std::fs::write(&path, bytes).map_err(|source| CorpusError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                out.audio = AudioSource::Path(PathBuf::from(name));
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
    /// Split each group of records sharing a primary tag separately.
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
            seed: 0,
            stratify: false,
        }
    }
}

impl SplitSpec {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.valid, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(CorpusError::SplitSpec(format!("fractions must be >= 0, got {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::SplitSpec(format!("fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier bucket.
fn apportion(n: usize, fractions: [f64; 3], fill_nonzero: bool) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for b in 0..3 {
        counts[b] = exact[b].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>().min(n);
    for &b in order.iter().cycle().take(3 * 3) {
        if left == 0 {
            break;
        }
        if fractions[b] > 0.0 {
            counts[b] += 1;
            left -= 1;
        }
    }
    if fill_nonzero {
        for b in 0..3 {
            if fractions[b] > 0.0 && counts[b] == 0 {
                let donor = (0..3).max_by_key(|&d| (counts[d], std::cmp::Reverse(d))).unwrap();
                counts[donor] -= 1;
                counts[b] += 1;
            }
        }
    }
    counts
}

/// Assigns splits by seeded shuffling. Order of `records` is preserved.
pub fn make_splits(records: &[TrackRecord], spec: &SplitSpec) -> Result<Vec<TrackRecord>> {
    spec.validate()?;
    let fractions = spec.fractions();
    let buckets = fractions.iter().filter(|&&f| f > 0.0).count();
    if records.len() < buckets {
        return Err(CorpusError::TooFewRecords {
            records: records.len(),
            buckets,
        });
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = if spec.stratify {
            r.tags.iter().min().cloned().unwrap_or_default()
        } else {
            String::new()
        };
        groups.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = records.to_vec();
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), fractions, !spec.stratify);
        let mut it = members.iter();
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for &i in it.by_ref().take(count) {
                out[i].split = Some(split);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub n_classes: usize,
    pub tracks_per_class: usize,
    pub seen_classes: Vec<usize>,
    /// Held-out class `unseen[i]` interpolates `seen[2i]` and `seen[2i+1]`.
    pub unseen_classes: Vec<usize>,
    pub word_dim: usize,
    pub base_frequency: f64,
    pub frequency_step: f64,
    pub amplitudes: Vec<f64>,
    pub noise_sigma: f64,
    pub duration_secs: f64,
    pub jitter: f64,
    pub sample_rate: u32,
    /// Fractions used to split seen-class tracks; held-out tracks are all test.
    pub seen_split: SplitSpec,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_classes: 12,
            tracks_per_class: 40,
            seen_classes: (0..10).collect(),
            unseen_classes: vec![10, 11],
            word_dim: 16,
            base_frequency: 200.0,
            frequency_step: 60.0,
            amplitudes: vec![1.0, 0.5, 0.25, 0.125],
            noise_sigma: 0.01,
            duration_secs: 3.0,
            jitter: 0.03,
            sample_rate: 22050,
            seen_split: SplitSpec {
                train: 0.8,
                valid: 0.0,
                test: 0.2,
                seed: 0,
                stratify: true,
            },
            seed: 0,
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::ToyConfig(m));
        if self.n_classes == 0 || self.tracks_per_class == 0 {
            return bad("n_classes and tracks_per_class must be >= 1".into());
        }
        let seen: HashSet<usize> = self.seen_classes.iter().copied().collect();
        let unseen: HashSet<usize> = self.unseen_classes.iter().copied().collect();
        if seen.len() != self.seen_classes.len() || unseen.len() != self.unseen_classes.len() {
            return bad("class lists contain duplicates".into());
        }
        if !seen.is_disjoint(&unseen) {
            return bad("seen and unseen classes overlap".into());
        }
        if seen.len() + unseen.len() != self.n_classes
            || seen.iter().chain(&unseen).any(|&g| g >= self.n_classes)
        {
            return bad(format!("seen and unseen classes must cover 0..{} exactly", self.n_classes));
        }
        if 2 * unseen.len() > seen.len() {
            return bad("each unseen class needs two seen classes to interpolate".into());
        }
        if self.word_dim == 0 {
            return bad("word_dim must be >= 1".into());
        }
        if self.amplitudes.is_empty() || self.amplitudes.iter().any(|a| a.is_nan() || *a < 0.0) || self.amplitudes.iter().sum::<f64>() <= 0.0 {
            return bad("amplitudes must be nonnegative with a positive sum".into());
        }
        if !(self.noise_sigma >= 0.0 && self.duration_secs > 0.0 && (0.0..1.0).contains(&self.jitter)) {
            return bad("need noise_sigma >= 0, duration_secs > 0, 0 <= jitter < 1".into());
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        let top = self.amplitudes.len() as f64 * self.class_frequency(self.n_classes - 1) * (1.0 + self.jitter);
        if self.base_frequency.is_nan() || self.base_frequency <= 0.0 || top >= self.sample_rate as f64 / 2.0 {
            return bad("harmonics must stay between 0 Hz and Nyquist".into());
        }
        self.seen_split.validate()
    }

    /// Nominal fundamental: affine in the class id for seen classes, the
    /// midpoint of the two parent fundamentals for unseen ones.
    pub fn class_frequency(&self, class: usize) -> f64 {
        match self.unseen_classes.iter().position(|&g| g == class) {
            Some(i) => {
                let (a, b) = self.parents(i);
                0.5 * (self.linear_frequency(a) + self.linear_frequency(b))
            }
            None => self.linear_frequency(class),
        }
    }

    fn linear_frequency(&self, class: usize) -> f64 {
        self.base_frequency + self.frequency_step * class as f64
    }

    fn parents(&self, unseen_index: usize) -> (usize, usize) {
        (
            self.seen_classes[2 * unseen_index],
            self.seen_classes[2 * unseen_index + 1],
        )
    }
}

pub fn class_tag(class: usize) -> String {
    format!("class_{class}")
}

#[derive(Debug, Clone)]
pub struct ToyCorpus<S> {
    pub records: Vec<TrackRecord>,
    pub words: WordVectorTable<S>,
    pub seen_tags: Vec<String>,
    pub unseen_tags: Vec<String>,
    pub config: ToyCorpusConfig,
}

impl<S> ToyCorpus<S> {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TrackRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn class_of(record: &TrackRecord) -> Option<usize> {
        record.tags.first()?.strip_prefix("class_")?.parse().ok()
    }
}

/// Builds the toy corpus. Everything derives from `config.seed`: word vectors
/// come from stream 0, track `i` (class-major order) from stream `i + 1`.
pub fn synth_toy_corpus<S: Scalar>(config: &ToyCorpusConfig) -> Result<ToyCorpus<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut vectors: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &g in &config.seen_classes {
        let v = loop {
            let v: Vec<f64> = (0..config.word_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                break v.into_iter().map(|x| x / n).collect::<Vec<_>>();
            }
        };
        vectors.insert(g, v);
    }
    for (i, &g) in config.unseen_classes.iter().enumerate() {
        let (a, b) = config.parents(i);
        let mid: Vec<f64> = vectors[&a].iter().zip(&vectors[&b]).map(|(x, y)| x + y).collect();
        let n = mid.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            return Err(CorpusError::ToyConfig(format!("parents of class {g} are antipodal")));
        }
        vectors.insert(g, mid.into_iter().map(|x| x / n).collect());
    }
    let mut words = WordVectorTable::new(config.word_dim);
    for (&g, v) in &vectors {
        let v: Vec<S> = v.iter().map(|&x| S::lit(x)).collect();
        words.insert(&class_tag(g), &v)?;
    }

    let mut records = Vec::with_capacity(config.n_classes * config.tracks_per_class);
    for g in 0..config.n_classes {
        for j in 0..config.tracks_per_class {
            let stream = (records.len() + 1) as u64;
            let mut track_rng = ChaCha8Rng::seed_from_u64(config.seed);
            track_rng.set_stream(stream);
            let jitter = track_rng.random_range(-config.jitter..=config.jitter);
            let phase = track_rng.random_range(0.0..2.0 * PI);
            records.push(TrackRecord {
                track_id: format!("toy_{g:02}_{j:03}"),
                audio: AudioSource::Synthetic(ToneSpec {
                    fundamental: config.class_frequency(g) * (1.0 + jitter),
                    amplitudes: config.amplitudes.clone(),
                    phase,
                    noise_sigma: config.noise_sigma,
                    noise_seed: config.seed,
                    noise_stream: stream | (1 << 63),
                    duration_secs: config.duration_secs,
                    sample_rate: config.sample_rate,
                }),
                tags: vec![class_tag(g)],
                split: None,
            });
        }
    }
    let seen: HashSet<usize> = config.seen_classes.iter().copied().collect();
    let (seen_records, unseen_records): (Vec<TrackRecord>, Vec<TrackRecord>) = records
        .into_iter()
        .partition(|r| ToyCorpus::<S>::class_of(r).is_some_and(|g| seen.contains(&g)));
    let mut assigned = make_splits(&seen_records, &config.seen_split)?;
    assigned.extend(unseen_records.into_iter().map(|mut r| {
        r.split = Some(Split::Test);
        r
    }));
    assigned.sort_by(|a, b| a.track_id.cmp(&b.track_id));

    Ok(ToyCorpus {
        records: assigned,
        words,
        seen_tags: config.seen_classes.iter().map(|&g| class_tag(g)).collect(),
        unseen_tags: config.unseen_classes.iter().map(|&g| class_tag(g)).collect(),
        config: config.clone(),
    })
}

/// Mean log-mel frame of a spectrogram.
pub fn mel_profile<S: Scalar>(mel: &MelSpectrogram<S>) -> Vec<f64> {
    let mut profile = vec![0.0; mel.n_mels()];
    for r in 0..mel.n_frames() {
        for (p, x) in profile.iter_mut().zip(mel.values().row(r)) {
            *p += x.as_f64();
        }
    }
    let n = mel.n_frames().max(1) as f64;
    profile.iter_mut().for_each(|p| *p /= n);
    profile
}

/// Reference classifier: assigns each test profile to the class whose mean
/// training profile is nearest in Euclidean distance. Returns accuracy.
pub fn nearest_centroid_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
    let mut centroids: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (p, c) in train {
        let entry = centroids.entry(*c).or_insert_with(|| (vec![0.0; p.len()], 0));
        entry.0.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        entry.1 += 1;
    }
    let centroids: Vec<(usize, Vec<f64>)> = centroids
        .into_iter()
        .map(|(c, (sum, n))| (c, sum.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    if test.is_empty() || centroids.is_empty() {
        return 0.0;
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let correct = test
        .iter()
        .filter(|(p, c)| {
            let best = centroids
                .iter()
                .min_by(|a, b| dist(&a.1, p).partial_cmp(&dist(&b.1, p)).unwrap())
                .unwrap();
            best.0 == *c
        })
        .count();
    correct as f64 / test.len() as f64
}
