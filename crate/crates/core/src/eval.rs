//! Retrieval AUC, genre accuracy and the cross-corpus transfer protocol.
//!
//! Tag retrieval AUC ranks the evaluation tracks by cosine similarity to each
//! tag's projected point and is macro-averaged over tags by default. Tags with
//! no positive (or no negative) track are skipped and listed in the report.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dsp::PcmSignal;
use crate::encoder::SemanticPoint;
use crate::inference::{self, InferenceError, LabelIndex, ZeroShotModel};
use crate::scalar::Scalar;
use crate::words::{normalize_tag, ResolutionPolicy, WordVectorTable};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("no tag has both positive and negative tracks")]
    NoEvaluableTags,
    #[error("track {track:?} has {found} ground-truth genres among the candidates, exactly one required")]
    GenreCount { track: String, found: usize },
    #[error("target dataset {0:?} has no test tracks")]
    EmptyTarget(String),
    #[error("thread pool: {0}")]
    Threads(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Exact ROC AUC as a ratio: the probability that a random positive outscores
/// a random negative, ties counting one half.
pub fn roc_auc_exact<S: Scalar>(scores: &[S], labels: &[bool]) -> Result<Ratio<u64>> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(bad.as_f64()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // twice the Mann-Whitney U statistic, so ties stay integral
    let mut twice_u: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    Ok(Ratio::new(twice_u, 2 * positives as u64 * negatives as u64))
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn roc_auc<S: Scalar>(scores: &[S], labels: &[bool]) -> Result<f64> {
    roc_auc_exact(scores, labels).map(ratio_to_f64)
}

/// Fraction of predictions equal to the ground truth.
pub fn accuracy<T: PartialEq>(predictions: &[T], truth: &[T]) -> f64 {
    assert_eq!(predictions.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    correct as f64 / truth.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Auc,
    Accuracy,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auc" => Ok(Protocol::Auc),
            "accuracy" => Ok(Protocol::Accuracy),
            other => Err(format!("unknown protocol {other:?} (expected auc or accuracy)")),
        }
    }
}

/// How per-tag AUCs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Unweighted mean of per-tag AUCs.
    #[default]
    Macro,
    /// One AUC over all (track, tag) pairs pooled together.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagMetric {
    pub tag: String,
    pub value: f64,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedTag {
    pub tag: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub averaging: Averaging,
    pub per_tag: Vec<TagMetric>,
    pub aggregate: f64,
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
    pub skipped: Vec<SkippedTag>,
    pub n_tracks: usize,
    pub target: String,
    pub checkpoint: String,
    /// True when no target-corpus annotation was used to fit the model.
    pub zero_target_supervision: bool,
    /// Number of evaluated tracks that also appear in the training set.
    pub training_overlap: usize,
    pub notes: Vec<String>,
    pub run_config: Vec<(String, String)>,
}

impl EvalReport {
    fn new(protocol: Protocol, averaging: Averaging, n_tracks: usize) -> Self {
        Self {
            protocol,
            averaging,
            per_tag: Vec::new(),
            aggregate: f64::NAN,
            kept: Vec::new(),
            dropped: Vec::new(),
            skipped: Vec::new(),
            n_tracks,
            target: String::new(),
            checkpoint: String::new(),
            zero_target_supervision: false,
            training_overlap: 0,
            notes: Vec::new(),
            run_config: Vec::new(),
        }
    }

    /// One JSON object per line: a header record, one record per tag, and
    /// a final aggregate record.
    pub fn write_records<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            record: &'static str,
            protocol: Protocol,
            averaging: Averaging,
            target: &'a str,
            checkpoint: &'a str,
            n_tracks: usize,
            zero_target_supervision: bool,
            training_overlap: usize,
            kept: &'a [String],
            dropped: &'a [String],
            skipped: &'a [SkippedTag],
            notes: &'a [String],
            run_config: &'a [(String, String)],
        }
        #[derive(Serialize)]
        struct Tag<'a> {
            record: &'static str,
            #[serde(flatten)]
            metric: &'a TagMetric,
        }
        #[derive(Serialize)]
        struct Aggregate {
            record: &'static str,
            value: f64,
            n_tags: usize,
        }
        let line = |v: serde_json::Result<String>| v.map_err(std::io::Error::other);
        writeln!(
            out,
            "{}",
            line(serde_json::to_string(&Header {
                record: "header",
                protocol: self.protocol,
                averaging: self.averaging,
                target: &self.target,
                checkpoint: &self.checkpoint,
                n_tracks: self.n_tracks,
                zero_target_supervision: self.zero_target_supervision,
                training_overlap: self.training_overlap,
                kept: &self.kept,
                dropped: &self.dropped,
                skipped: &self.skipped,
                notes: &self.notes,
                run_config: &self.run_config,
            }))?
        )?;
        for metric in &self.per_tag {
            writeln!(
                out,
                "{}",
                line(serde_json::to_string(&Tag {
                    record: "tag",
                    metric
                }))?
            )?;
        }
        writeln!(
            out,
            "{}",
            line(serde_json::to_string(&Aggregate {
                record: "aggregate",
                value: self.aggregate,
                n_tags: self.per_tag.len(),
            }))?
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let metric = match self.protocol {
            Protocol::Auc => "retrieval AUC",
            Protocol::Accuracy => "accuracy",
        };
        writeln!(
            f,
            "{} on {:?}: {} tracks, {} labels kept, {} dropped",
            metric,
            self.target,
            self.n_tracks,
            self.kept.len(),
            self.dropped.len()
        )?;
        let width = self.per_tag.iter().map(|m| m.tag.len()).max().unwrap_or(3).max(3);
        writeln!(f, "{:<width$}  {:>8}  {:>6}", "tag", "value", "n")?;
        for m in &self.per_tag {
            writeln!(f, "{:<width$}  {:>8.4}  {:>6}", m.tag, m.value, m.positives)?;
        }
        for s in &self.skipped {
            writeln!(f, "{:<width$}  skipped ({})", s.tag, s.reason)?;
        }
        let avg = match (self.protocol, self.averaging) {
            (Protocol::Auc, Averaging::Macro) => "macro",
            (Protocol::Auc, Averaging::Global) => "global",
            (Protocol::Accuracy, _) => "overall",
        };
        writeln!(f, "{avg} {metric}: {:.4}", self.aggregate)?;
        for note in &self.notes {
            writeln!(f, "note: {note}")?;
        }
        Ok(())
    }
}

/// An embedded evaluation track with its ground-truth tags.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrack<S> {
    pub id: String,
    pub embedding: SemanticPoint<S>,
    pub tags: Vec<String>,
}

fn has_tag<S>(track: &EvalTrack<S>, tag: &str) -> bool {
    let tag = normalize_tag(tag);
    track.tags.iter().any(|t| normalize_tag(t) == tag)
}

fn with_index_provenance<S: Scalar>(mut report: EvalReport, index: &LabelIndex<S>) -> EvalReport {
    report.kept = index.tags().map(str::to_string).collect();
    report.dropped = index.dropped().to_vec();
    report
}

/// Per-tag retrieval AUC over `tracks` for every label in `index`.
pub fn tag_retrieval_auc<S: Scalar>(
    index: &LabelIndex<S>,
    tracks: &[EvalTrack<S>],
    averaging: Averaging,
) -> Result<EvalReport> {
    let mut report = with_index_provenance(
        EvalReport::new(Protocol::Auc, averaging, tracks.len()),
        index,
    );
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    for (tag, point) in index.entries() {
        let scores: Vec<S> = tracks.iter().map(|t| t.embedding.cosine(point)).collect();
        let labels: Vec<bool> = tracks.iter().map(|t| has_tag(t, tag)).collect();
        match roc_auc(&scores, &labels) {
            Ok(value) => {
                report.per_tag.push(TagMetric {
                    tag: tag.clone(),
                    value,
                    positives: labels.iter().filter(|&&l| l).count(),
                });
                pooled_scores.extend(scores);
                pooled_labels.extend(labels);
            }
            Err(EvalError::SingleClass {
                positives,
                negatives,
            }) => report.skipped.push(SkippedTag {
                tag: tag.clone(),
                reason: format!("{positives} positives, {negatives} negatives"),
            }),
            Err(e) => return Err(e),
        }
    }
    if report.per_tag.is_empty() {
        return Err(EvalError::NoEvaluableTags);
    }
    report.aggregate = match averaging {
        Averaging::Macro => {
            report.per_tag.iter().map(|m| m.value).sum::<f64>() / report.per_tag.len() as f64
        }
        Averaging::Global => roc_auc(&pooled_scores, &pooled_labels)?,
    };
    report.notes.push(match averaging {
        Averaging::Macro => "aggregate is the unweighted mean of per-tag retrieval AUC".into(),
        Averaging::Global => "aggregate is one AUC over all (track, tag) pairs".into(),
    });
    Ok(report)
}

/// Top-1 genre accuracy; each track needs exactly one genre among the labels.
pub fn genre_accuracy<S: Scalar>(index: &LabelIndex<S>, tracks: &[EvalTrack<S>]) -> Result<EvalReport> {
    let mut report = with_index_provenance(
        EvalReport::new(Protocol::Accuracy, Averaging::Macro, tracks.len()),
        index,
    );
    let mut truth = Vec::with_capacity(tracks.len());
    let mut predicted = Vec::with_capacity(tracks.len());
    for track in tracks {
        let genres: Vec<&str> = index.tags().filter(|g| has_tag(track, g)).collect();
        if genres.len() != 1 {
            return Err(EvalError::GenreCount {
                track: track.id.clone(),
                found: genres.len(),
            });
        }
        let top = inference::nearest_labels(&track.embedding, index, 1)?;
        truth.push(genres[0].to_string());
        predicted.push(top[0].0.clone());
    }
    for genre in index.tags() {
        let members: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == genre).collect();
        if members.is_empty() {
            report.skipped.push(SkippedTag {
                tag: genre.to_string(),
                reason: "no tracks".into(),
            });
            continue;
        }
        let correct = members.iter().filter(|&&i| predicted[i] == genre).count();
        report.per_tag.push(TagMetric {
            tag: genre.to_string(),
            value: correct as f64 / members.len() as f64,
            positives: members.len(),
        });
    }
    report.aggregate = accuracy(&predicted, &truth);
    report
        .notes
        .push("per-tag values are per-genre recall; aggregate is overall top-1 accuracy".into());
    Ok(report)
}

/// A foreign corpus: its test tracks and its own candidate label set.
#[derive(Debug, Clone)]
pub struct TargetDataset<S> {
    pub name: String,
    pub tracks: Vec<TargetTrack<S>>,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TargetTrack<S> {
    pub id: String,
    pub signal: PcmSignal<S>,
    pub tags: Vec<String>,
}

/// Embeds signals with a frozen model, optionally on several threads.
pub fn embed_tracks<S: Scalar>(
    model: &ZeroShotModel<S>,
    tracks: &[TargetTrack<S>],
    threads: usize,
) -> Result<Vec<EvalTrack<S>>> {
    let embed = |t: &TargetTrack<S>| -> Result<EvalTrack<S>> {
        Ok(EvalTrack {
            id: t.id.clone(),
            embedding: model.embed_signal(&t.signal)?,
            tags: t.tags.clone(),
        })
    };
    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| EvalError::Threads(e.to_string()))?;
        pool.install(|| tracks.par_iter().map(embed).collect())
    } else {
        tracks.iter().map(embed).collect()
    }
}

/// Evaluates a trained model on another corpus with no adaptation: the
/// target's candidate labels go through the same word table and trained
/// projection, and its tracks are embedded directly.
#[allow(clippy::too_many_arguments)]
pub fn transfer_evaluate<S: Scalar>(
    model: &ZeroShotModel<S>,
    target: &TargetDataset<S>,
    table: &WordVectorTable<S>,
    policy: ResolutionPolicy,
    protocol: Protocol,
    averaging: Averaging,
    threads: usize,
) -> Result<EvalReport> {
    if target.tracks.is_empty() {
        return Err(EvalError::EmptyTarget(target.name.clone()));
    }
    let index = model.label_index(&target.candidates, table, policy)?;
    let tracks = embed_tracks(model, &target.tracks, threads)?;
    transfer_report(model, &target.name, &index, &tracks, protocol, averaging)
}

/// The transfer protocol on already-embedded tracks.
pub fn transfer_report<S: Scalar>(
    model: &ZeroShotModel<S>,
    target_name: &str,
    index: &LabelIndex<S>,
    tracks: &[EvalTrack<S>],
    protocol: Protocol,
    averaging: Averaging,
) -> Result<EvalReport> {
    if tracks.is_empty() {
        return Err(EvalError::EmptyTarget(target_name.to_string()));
    }
    let mut report = match protocol {
        Protocol::Auc => tag_retrieval_auc(index, tracks, averaging)?,
        Protocol::Accuracy => genre_accuracy(index, tracks)?,
    };
    let checkpoint = model.checkpoint();
    let trained: HashSet<&str> = checkpoint
        .meta
        .train_track_ids
        .iter()
        .map(String::as_str)
        .collect();
    report.training_overlap = tracks.iter().filter(|t| trained.contains(t.id.as_str())).count();
    report.zero_target_supervision = report.training_overlap == 0;
    report.target = target_name.to_string();
    report.checkpoint = checkpoint.fingerprint();
    report.run_config = checkpoint.meta.run_config.clone();
    if report.training_overlap > 0 {
        report.notes.push(format!(
            "{} evaluated tracks were part of the training set",
            report.training_overlap
        ));
    } else {
        report
            .notes
            .push("no target-corpus tracks or labels were used in training".into());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        let r = roc_auc_exact(&[0.8, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap();
        assert_eq!(r, Ratio::new(3, 4));
        assert_eq!(ratio_to_f64(r), 0.75);
        // all tied → one half
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn auc_errors() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(EvalError::SingleClass { positives: 2, negatives: 0 })
        ));
        assert!(matches!(roc_auc(&[0.1], &[true, false]), Err(EvalError::Length { .. })));
        assert!(matches!(
            roc_auc(&[f64::NAN, 0.1], &[true, false]),
            Err(EvalError::NonFiniteScore(_))
        ));
    }

    #[test]
    fn accuracy_arithmetic() {
        assert_eq!(accuracy(&["a", "b"], &["a", "b"]), 1.0);
        assert!((accuracy(&["a", "b", "c"], &["a", "b", "x"]) - 0.6667).abs() < 1e-4);
        assert!((accuracy(&[1, 2, 3], &[1, 2, 4]) - 2.0 / 3.0).abs() < 1e-9);
    }

    fn pt(v: &[f64]) -> SemanticPoint<f64> {
        SemanticPoint::normalized(v.to_vec()).unwrap()
    }

    fn track(id: &str, v: &[f64], tags: &[&str]) -> EvalTrack<f64> {
        EvalTrack {
            id: id.into(),
            embedding: pt(v),
            tags: tags.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn index() -> LabelIndex<f64> {
        LabelIndex::new(
            vec![
                ("rock".into(), pt(&[1.0, 0.0, 0.0])),
                ("jazz".into(), pt(&[0.0, 1.0, 0.0])),
                ("opera".into(), pt(&[0.0, 0.0, 1.0])),
            ],
            vec!["qzxv".into()],
        )
        .unwrap()
    }

    #[test]
    fn retrieval_auc_skips_tags_without_positives() {
        let tracks = vec![
            track("1", &[1.0, 0.1, 0.0], &["rock"]),
            track("2", &[0.1, 1.0, 0.0], &["jazz"]),
            track("3", &[0.9, 0.3, 0.0], &["rock", "jazz"]),
        ];
        let r = tag_retrieval_auc(&index(), &tracks, Averaging::Macro).unwrap();
        assert_eq!(r.per_tag.len(), 2);
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].tag, "opera");
        assert_eq!(r.dropped, ["qzxv"]);
        let mean = r.per_tag.iter().map(|m| m.value).sum::<f64>() / 2.0;
        assert!((r.aggregate - mean).abs() < 1e-12);
        let g = tag_retrieval_auc(&index(), &tracks, Averaging::Global).unwrap();
        assert!((0.0..=1.0).contains(&g.aggregate));
    }

    #[test]
    fn genre_accuracy_counts_top1() {
        let tracks = vec![
            track("1", &[1.0, 0.1, 0.0], &["rock"]),
            track("2", &[0.1, 1.0, 0.0], &["jazz"]),
            track("3", &[0.9, 0.3, 0.0], &["jazz"]),
        ];
        let r = genre_accuracy(&index(), &tracks).unwrap();
        assert!((r.aggregate - 2.0 / 3.0).abs() < 1e-9);
        let bad = vec![track("x", &[1.0, 0.0, 0.0], &["polka"])];
        assert!(matches!(
            genre_accuracy(&index(), &bad),
            Err(EvalError::GenreCount { found: 0, .. })
        ));
    }

    #[test]
    fn records_have_header_tags_and_aggregate() {
        let tracks = vec![
            track("1", &[1.0, 0.1, 0.0], &["rock"]),
            track("2", &[0.1, 1.0, 0.0], &["jazz"]),
        ];
        let r = tag_retrieval_auc(&index(), &tracks, Averaging::Macro).unwrap();
        let mut buf = Vec::new();
        r.write_records(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2 + r.per_tag.len());
        assert_eq!(lines[0]["record"], "header");
        assert_eq!(lines[1]["record"], "tag");
        assert_eq!(lines.last().unwrap()["record"], "aggregate");
        assert!(format!("{r}").contains("macro retrieval AUC"));
    }
}
