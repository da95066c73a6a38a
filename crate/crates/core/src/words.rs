//! Word-vector side information and the word branch of the model.
//!
//! Tables use the common `token f1 f2 ... fD` text layout (UTF-8, single
//! spaces, no header line). Tags are resolved against the table with a
//! configurable [`ResolutionPolicy`] and mapped into the joint space by an
//! affine projection followed by L2 normalisation.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::encoder::SemanticPoint;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum WordError {
    #[error("I/O error reading word vectors: {0}")]
    Io(#[from] std::io::Error),
    #[error("word-vector stream is empty")]
    Empty,
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse {value:?} as a number")]
    BadFloat { line: usize, value: String },
    #[error("line {line}: non-finite component")]
    NonFinite { line: usize },
    #[error("line {line}: missing token")]
    MissingToken { line: usize },
    #[error("tags {first:?} and {second:?} normalise to the same label {normalized:?}")]
    DuplicateTag {
        first: String,
        second: String,
        normalized: String,
    },
    #[error("empty tag list")]
    NoTags,
    #[error("vector has {found} components, projection expects {expected}")]
    Shape { expected: usize, found: usize },
    #[error("projection maps the input to the zero vector")]
    DegenerateZero,
    #[error("invalid projection parameters: {0}")]
    InvalidProjection(String),
}

pub type Result<T> = std::result::Result<T, WordError>;

/// Token → vector lookup with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable<S> {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<S>,
}

impl<S: Scalar> WordVectorTable<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    /// Inserts `token` unless it is already present; returns whether it was added.
    pub fn insert(&mut self, token: &str, vector: &[S]) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(WordError::Shape {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if self.index.contains_key(token) {
            return Ok(false);
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.data.extend_from_slice(vector);
        Ok(true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[S]> {
        self.index
            .get(token)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Entries in insertion (file) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[S])> {
        self.tokens
            .iter()
            .zip(self.data.chunks_exact(self.dim.max(1)))
            .map(|(t, v)| (t.as_str(), v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParseStats {
    pub lines: usize,
    pub duplicates: usize,
    pub filtered: usize,
}

/// Parses a word-vector text stream. With an allow list, only those tokens are
/// kept (and other lines are not parsed beyond their token). The first
/// nonempty line fixes the dimension.
pub fn parse_word_vectors<S: Scalar, R: BufRead>(
    reader: R,
    allow_list: Option<&HashSet<String>>,
) -> Result<(WordVectorTable<S>, ParseStats)> {
    let mut table: Option<WordVectorTable<S>> = None;
    let mut stats = ParseStats::default();
    let mut vector = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or_default();
        if token.is_empty() {
            return Err(WordError::MissingToken { line: lineno });
        }
        let first = table.is_none();
        if !first && allow_list.is_some_and(|allow| !allow.contains(token)) {
            stats.filtered += 1;
            continue;
        }
        vector.clear();
        for field in fields {
            let x: f64 = field.parse().map_err(|_| WordError::BadFloat {
                line: lineno,
                value: field.to_string(),
            })?;
            if !x.is_finite() {
                return Err(WordError::NonFinite { line: lineno });
            }
            vector.push(S::lit(x));
        }
        let table = table.get_or_insert_with(|| WordVectorTable::new(vector.len()));
        if vector.len() != table.dim {
            return Err(WordError::DimensionMismatch {
                line: lineno,
                expected: table.dim,
                found: vector.len(),
            });
        }
        if first && allow_list.is_some_and(|allow| !allow.contains(token)) {
            stats.filtered += 1;
            continue;
        }
        if !table.insert(token, &vector)? {
            stats.duplicates += 1;
        }
    }
    match table {
        Some(t) if t.dim > 0 => Ok((t, stats)),
        Some(_) => Err(WordError::DimensionMismatch {
            line: 1,
            expected: 1,
            found: 0,
        }),
        None => Err(WordError::Empty),
    }
}

/// Writes a table in the same text layout `parse_word_vectors` reads.
pub fn write_word_vectors<S: Scalar, W: Write>(
    table: &WordVectorTable<S>,
    mut out: W,
) -> std::io::Result<()> {
    for (token, vector) in table.iter() {
        write!(out, "{token}")?;
        for x in vector {
            write!(out, " {x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResolutionPolicy {
    /// Exact token, then the whitespace/hyphen-stripped concatenation.
    #[default]
    Strict,
    /// Strict, then the mean of the per-word vectors when every word is present.
    Averaging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionStatus {
    Exact,
    Joined,
    Averaged,
    Missing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagResolution<S> {
    pub tag: String,
    pub status: ResolutionStatus,
    pub vector: Option<Vec<S>>,
}

pub fn normalize_tag(tag: &str) -> String {
    tag.trim().to_lowercase()
}

fn is_separator(c: char) -> bool {
    c.is_whitespace() || c == '-'
}

pub fn resolve_tag<S: Scalar>(
    table: &WordVectorTable<S>,
    tag: &str,
    policy: ResolutionPolicy,
) -> TagResolution<S> {
    let resolved = |status, vector: Vec<S>| TagResolution {
        tag: tag.to_string(),
        status,
        vector: Some(vector),
    };
    let norm = normalize_tag(tag);
    if let Some(v) = table.get(&norm) {
        return resolved(ResolutionStatus::Exact, v.to_vec());
    }
    let joined: String = norm.chars().filter(|&c| !is_separator(c)).collect();
    if !joined.is_empty() {
        if let Some(v) = table.get(&joined) {
            return resolved(ResolutionStatus::Joined, v.to_vec());
        }
    }
    if policy == ResolutionPolicy::Averaging {
        let words: Vec<&str> = norm.split(is_separator).filter(|w| !w.is_empty()).collect();
        if words.len() > 1 {
            if let Some(vectors) = words.iter().map(|w| table.get(w)).collect::<Option<Vec<_>>>() {
                let n = S::lit(words.len() as f64);
                let mean = (0..table.dim())
                    .map(|j| vectors.iter().map(|v| v[j]).sum::<S>() / n)
                    .collect();
                return resolved(ResolutionStatus::Averaged, mean);
            }
        }
    }
    TagResolution {
        tag: tag.to_string(),
        status: ResolutionStatus::Missing,
        vector: None,
    }
}

/// Tags split into those with a word vector (input order kept) and those omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix<S> {
    pub kept: Vec<(String, Vec<S>)>,
    pub dropped: Vec<String>,
}

impl<S> LabelMatrix<S> {
    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.kept.iter().map(|(t, _)| t.as_str())
    }

    pub fn position(&self, tag: &str) -> Option<usize> {
        let norm = normalize_tag(tag);
        self.kept.iter().position(|(t, _)| normalize_tag(t) == norm)
    }
}

pub fn build_label_matrix<S: Scalar>(
    table: &WordVectorTable<S>,
    tags: &[String],
    policy: ResolutionPolicy,
) -> Result<LabelMatrix<S>> {
    if tags.is_empty() {
        return Err(WordError::NoTags);
    }
    let mut seen: HashMap<String, &str> = HashMap::new();
    for tag in tags {
        let norm = normalize_tag(tag);
        if let Some(first) = seen.insert(norm.clone(), tag) {
            return Err(WordError::DuplicateTag {
                first: first.to_string(),
                second: tag.clone(),
                normalized: norm,
            });
        }
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for tag in tags {
        match resolve_tag(table, tag, policy).vector {
            Some(v) => kept.push((tag.clone(), v)),
            None => dropped.push(tag.clone()),
        }
    }
    Ok(LabelMatrix { kept, dropped })
}

/// Affine map from word-vector space (D) to the joint space (d).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<S> {
    /// `[d × D]`, row-major.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
    pub joint_dim: usize,
    pub word_dim: usize,
}

impl<S: Scalar> ProjectionParams<S> {
    pub fn new(weight: Vec<S>, bias: Vec<S>, joint_dim: usize, word_dim: usize) -> Result<Self> {
        if joint_dim == 0 || word_dim == 0 {
            return Err(WordError::InvalidProjection("dimensions must be >= 1".into()));
        }
        if weight.len() != joint_dim * word_dim || bias.len() != joint_dim {
            return Err(WordError::InvalidProjection(format!(
                "weight has {} entries and bias {}, expected {}x{} and {}",
                weight.len(),
                bias.len(),
                joint_dim,
                word_dim,
                joint_dim
            )));
        }
        if weight.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(WordError::InvalidProjection("non-finite parameter".into()));
        }
        Ok(Self {
            weight,
            bias,
            joint_dim,
            word_dim,
        })
    }

    /// `weight · vector + bias` before normalisation.
    pub fn affine(&self, vector: &[S]) -> Result<Vec<S>> {
        if vector.len() != self.word_dim {
            return Err(WordError::Shape {
                expected: self.word_dim,
                found: vector.len(),
            });
        }
        Ok(self
            .weight
            .chunks_exact(self.word_dim)
            .zip(&self.bias)
            .map(|(row, &b)| crate::scalar::dot(row, vector) + b)
            .collect())
    }
}

/// Projects a word vector into the joint space and normalises it to unit length.
pub fn project_tag<S: Scalar>(vector: &[S], params: &ProjectionParams<S>) -> Result<SemanticPoint<S>> {
    let z = params.affine(vector)?;
    SemanticPoint::normalized(z).ok_or(WordError::DegenerateZero)
}

/// The 50 most frequent MagnaTagATune tags used by the standard evaluation setup.
pub const MTAT_TOP50: [&str; 50] = [
    "guitar",
    "classical",
    "slow",
    "techno",
    "strings",
    "drums",
    "electronic",
    "rock",
    "fast",
    "piano",
    "ambient",
    "beat",
    "violin",
    "vocal",
    "synth",
    "female",
    "indian",
    "opera",
    "male",
    "singing",
    "vocals",
    "no vocals",
    "harpsichord",
    "loud",
    "quiet",
    "flute",
    "woman",
    "male vocal",
    "no vocal",
    "pop",
    "soft",
    "sitar",
    "solo",
    "man",
    "classic",
    "choir",
    "voice",
    "new age",
    "dance",
    "male voice",
    "female vocal",
    "beats",
    "harp",
    "cello",
    "no voice",
    "weird",
    "country",
    "metal",
    "female voice",
    "choral",
];

/// The ten GTZAN genre labels.
pub const GTZAN_GENRES: [&str; 10] = [
    "blues",
    "classical",
    "country",
    "disco",
    "hiphop",
    "jazz",
    "metal",
    "pop",
    "reggae",
    "rock",
];
