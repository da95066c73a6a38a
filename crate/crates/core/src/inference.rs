//! Zero-shot prediction over arbitrary candidate label sets, and tag-query
//! track retrieval. Scores are raw cosine similarities in `[-1, 1]`.

use std::cmp::Ordering;

use thiserror::Error;

use crate::checkpoint::{CheckpointError, ModelCheckpoint};
use crate::diff::ParameterStore;
use crate::dsp::{DspError, MelFrontend, MelSpectrogram, PcmSignal};
use crate::encoder::{EncoderError, SemanticPoint};
use crate::model::JointModel;
use crate::scalar::Scalar;
use crate::words::{
    self, build_label_matrix, resolve_tag, ProjectionParams, ResolutionPolicy, WordError,
    WordVectorTable,
};

/// Patch hop used when embedding whole tracks.
pub const DEFAULT_PATCH_STRIDE: usize = 64;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("label index is empty")]
    EmptyIndex,
    #[error("none of the {0} candidate tags resolves in the word table")]
    NoResolvableCandidates(usize),
    #[error("k = {k} outside 1..={len}")]
    BadK { k: usize, len: usize },
    #[error("threshold {0} outside the cosine range [-1, 1]")]
    Threshold(f64),
    #[error("query tag {0:?} does not resolve in the word table")]
    UnresolvedQuery(String),
    #[error("duplicate label {0:?} in index")]
    DuplicateLabel(String),
    #[error("point has dimension {found}, index uses {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("no tracks to search")]
    NoTracks,
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Word(#[from] WordError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

/// Candidate labels projected into the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelIndex<S> {
    entries: Vec<(String, SemanticPoint<S>)>,
    dropped: Vec<String>,
}

impl<S: Scalar> LabelIndex<S> {
    pub fn new(entries: Vec<(String, SemanticPoint<S>)>, dropped: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (tag, _) in &entries {
            if !seen.insert(tag.as_str()) {
                return Err(InferenceError::DuplicateLabel(tag.clone()));
            }
        }
        if let Some((_, first)) = entries.first() {
            if let Some((_, p)) = entries.iter().find(|(_, p)| p.dim() != first.dim()) {
                return Err(InferenceError::Dimension {
                    expected: first.dim(),
                    found: p.dim(),
                });
            }
        }
        Ok(Self { entries, dropped })
    }

    pub fn entries(&self) -> &[(String, SemanticPoint<S>)] {
        &self.entries
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }

    pub fn dropped(&self) -> &[String] {
        &self.dropped
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cosine score of `point` against every label, in index order.
    pub fn scores(&self, point: &SemanticPoint<S>) -> Result<Vec<S>> {
        if let Some((_, first)) = self.entries.first() {
            if first.dim() != point.dim() {
                return Err(InferenceError::Dimension {
                    expected: first.dim(),
                    found: point.dim(),
                });
            }
        }
        Ok(self.entries.iter().map(|(_, p)| p.cosine(point)).collect())
    }
}

/// Projects each resolvable candidate through the trained word branch.
pub fn build_label_index<S: Scalar>(
    projection: &ProjectionParams<S>,
    candidates: &[String],
    table: &WordVectorTable<S>,
    policy: ResolutionPolicy,
) -> Result<LabelIndex<S>> {
    let matrix = build_label_matrix(table, candidates, policy)?;
    if matrix.kept.is_empty() {
        return Err(InferenceError::NoResolvableCandidates(candidates.len()));
    }
    let entries = matrix
        .kept
        .into_iter()
        .map(|(tag, v)| Ok((tag, words::project_tag(&v, projection)?)))
        .collect::<Result<Vec<_>>>()?;
    LabelIndex::new(entries, matrix.dropped)
}

/// Descending by score; equal scores keep index order.
fn rank_in_order<S: Scalar>(tags: impl Iterator<Item = String>, scores: &[S]) -> Vec<(String, S)> {
    let mut ranked: Vec<(String, S)> = tags.zip(scores.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    ranked
}

/// Top-`k` labels by cosine score.
pub fn nearest_labels<S: Scalar>(
    point: &SemanticPoint<S>,
    index: &LabelIndex<S>,
    k: usize,
) -> Result<Vec<(String, S)>> {
    if index.is_empty() {
        return Err(InferenceError::EmptyIndex);
    }
    if k == 0 || k > index.len() {
        return Err(InferenceError::BadK { k, len: index.len() });
    }
    let scores = index.scores(point)?;
    let mut ranked = rank_in_order(index.tags().map(str::to_string), &scores);
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationResult<S> {
    /// Score of every label, in index order.
    pub scores: Vec<(String, S)>,
    pub threshold: f64,
    /// Labels with score >= threshold, in ranking order.
    pub selected: Vec<String>,
    /// All labels by descending score, ties in index order.
    pub ranking: Vec<(String, S)>,
}

impl<S: Scalar> AnnotationResult<S> {
    pub fn from_scores(tags: Vec<String>, scores: Vec<S>, threshold: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&threshold) {
            return Err(InferenceError::Threshold(threshold));
        }
        let ranking = rank_in_order(tags.iter().cloned(), &scores);
        let t = S::lit(threshold);
        let selected = ranking
            .iter()
            .filter(|(_, s)| *s >= t)
            .map(|(tag, _)| tag.clone())
            .collect();
        Ok(Self {
            scores: tags.into_iter().zip(scores).collect(),
            threshold,
            selected,
            ranking,
        })
    }
}

/// Scores a point against an index and selects labels at `threshold`.
pub fn annotate_point<S: Scalar>(
    point: &SemanticPoint<S>,
    index: &LabelIndex<S>,
    threshold: f64,
) -> Result<AnnotationResult<S>> {
    if index.is_empty() {
        return Err(InferenceError::EmptyIndex);
    }
    let scores = index.scores(point)?;
    AnnotationResult::from_scores(index.tags().map(str::to_string).collect(), scores, threshold)
}

/// Ranks tracks by cosine to `query`; equal scores are ordered by track id.
pub fn retrieve_tracks<S: Scalar>(
    query: &SemanticPoint<S>,
    tracks: &[(String, SemanticPoint<S>)],
    k: usize,
) -> Result<Vec<(String, S)>> {
    if tracks.is_empty() {
        return Err(InferenceError::NoTracks);
    }
    if k == 0 || k > tracks.len() {
        return Err(InferenceError::BadK { k, len: tracks.len() });
    }
    let mut ranked = tracks
        .iter()
        .map(|(id, p)| {
            if p.dim() != query.dim() {
                return Err(InferenceError::Dimension {
                    expected: query.dim(),
                    found: p.dim(),
                });
            }
            Ok((id.clone(), p.cosine(query)))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// A trained model ready for inference: checkpoint plus prepared front end.
pub struct ZeroShotModel<S> {
    checkpoint: ModelCheckpoint<S>,
    model: JointModel,
    frontend: MelFrontend<S>,
    projection: ProjectionParams<S>,
    patch_stride: usize,
}

impl<S: Scalar> ZeroShotModel<S> {
    pub fn new(checkpoint: ModelCheckpoint<S>) -> Result<Self> {
        let model = checkpoint.model()?;
        let frontend = MelFrontend::new(checkpoint.dsp)?;
        let projection = model.projection(&checkpoint.params)?;
        Ok(Self {
            checkpoint,
            model,
            frontend,
            projection,
            patch_stride: DEFAULT_PATCH_STRIDE,
        })
    }

    pub fn with_patch_stride(mut self, stride: usize) -> Self {
        self.patch_stride = stride;
        self
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint<S> {
        &self.checkpoint
    }

    pub fn params(&self) -> &ParameterStore<S> {
        &self.checkpoint.params
    }

    pub fn projection(&self) -> &ProjectionParams<S> {
        &self.projection
    }

    pub fn frontend(&self) -> &MelFrontend<S> {
        &self.frontend
    }

    pub fn mel(&self, signal: &PcmSignal<S>) -> Result<MelSpectrogram<S>> {
        Ok(self.frontend.compute_any_rate(signal)?)
    }

    pub fn embed_mel(&self, mel: &MelSpectrogram<S>) -> Result<SemanticPoint<S>> {
        Ok(self
            .model
            .encoder()
            .encode_track(&self.checkpoint.params, mel, self.patch_stride)?)
    }

    /// Resample, mel-spectrogram and encode a whole track.
    pub fn embed_signal(&self, signal: &PcmSignal<S>) -> Result<SemanticPoint<S>> {
        self.embed_mel(&self.mel(signal)?)
    }

    pub fn label_index(
        &self,
        candidates: &[String],
        table: &WordVectorTable<S>,
        policy: ResolutionPolicy,
    ) -> Result<LabelIndex<S>> {
        build_label_index(&self.projection, candidates, table, policy)
    }

    pub fn project_query(
        &self,
        tag: &str,
        table: &WordVectorTable<S>,
        policy: ResolutionPolicy,
    ) -> Result<SemanticPoint<S>> {
        let resolution = resolve_tag(table, tag, policy);
        let v = resolution
            .vector
            .ok_or_else(|| InferenceError::UnresolvedQuery(tag.to_string()))?;
        Ok(words::project_tag(&v, &self.projection)?)
    }

    /// Embeds a track and thresholds its label scores.
    pub fn annotate(
        &self,
        signal: &PcmSignal<S>,
        index: &LabelIndex<S>,
        threshold: f64,
    ) -> Result<AnnotationResult<S>> {
        if !(-1.0..=1.0).contains(&threshold) {
            return Err(InferenceError::Threshold(threshold));
        }
        annotate_point(&self.embed_signal(signal)?, index, threshold)
    }

    /// Tracks ranked by similarity to a single query word.
    pub fn retrieve(
        &self,
        query_tag: &str,
        table: &WordVectorTable<S>,
        policy: ResolutionPolicy,
        tracks: &[(String, SemanticPoint<S>)],
        k: usize,
    ) -> Result<Vec<(String, S)>> {
        retrieve_tracks(&self.project_query(query_tag, table, policy)?, tracks, k)
    }
}
