//! Joint training of both branches with a sum-over-negatives triplet hinge
//! loss on cosine similarity, optimised with Adam.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{ModelCheckpoint, TrainingMeta};
use crate::diff::{self, DiffError, GradientMap, NdArray, ParameterStore};
use crate::dsp::{self, DspConfig, DspError, MelSpectrogram};
use crate::encoder::{EncoderConfig, EncoderError};
use crate::model::JointModel;
use crate::scalar::{self, Scalar};
use crate::words::LabelMatrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("track {track:?} has no tag in the training vocabulary")]
    NoResolvableTag { track: String },
    #[error("track {track:?} leaves {available} negative tags, {needed} needed per anchor")]
    NoNegatives {
        track: String,
        available: usize,
        needed: usize,
    },
    #[error("{which} point is not unit norm (|norm - 1| = {deviation:.3e})")]
    NonUnit { which: String, deviation: f64 },
    #[error("non-finite training loss; first offending parameter block: {block}")]
    NonFinite { block: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub negatives_per_anchor: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    pub deterministic: bool,
    /// Worker threads for per-triplet forward/backward inside a batch.
    /// Reduction order is fixed, so results do not depend on this value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.4,
            negatives_per_anchor: 4,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 30,
            seed: 0,
            deterministic: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.margin > 0.0 && self.margin < 2.0) {
            return bad("margin must lie in (0, 2)");
        }
        if self.negatives_per_anchor == 0 {
            return bad("negatives_per_anchor must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be positive");
        }
        if self.threads == 0 {
            return bad("threads must be >= 1");
        }
        Ok(())
    }
}

/// A training track: its patches and the vocabulary indices of its tags.
#[derive(Debug, Clone)]
pub struct TrainTrack<S> {
    pub id: String,
    pub patches: Vec<MelSpectrogram<S>>,
    pub tags: Vec<usize>,
}

/// Tracks plus the tag vocabulary (with word vectors) they are labelled with.
#[derive(Debug, Clone)]
pub struct TrainingData<S> {
    pub tracks: Vec<TrainTrack<S>>,
    pub vocab: LabelMatrix<S>,
    pub dsp: DspConfig,
}

impl<S: Scalar> TrainingData<S> {
    /// Cuts each track into encoder patches and maps its tags onto the
    /// vocabulary; tags outside the vocabulary are ignored.
    pub fn build(
        tracks: Vec<(String, MelSpectrogram<S>, Vec<String>)>,
        vocab: LabelMatrix<S>,
        encoder: &EncoderConfig,
        dsp: DspConfig,
        patch_stride: usize,
    ) -> Result<Self> {
        if tracks.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut out = Vec::with_capacity(tracks.len());
        for (id, mel, tags) in tracks {
            let mut ids: Vec<usize> = tags.iter().filter_map(|t| vocab.position(t)).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.is_empty() {
                return Err(TrainError::NoResolvableTag { track: id });
            }
            let patches = dsp::extract_patches(&mel, encoder.patch_frames, patch_stride)?;
            out.push(TrainTrack {
                id,
                patches,
                tags: ids,
            });
        }
        Ok(Self {
            tracks: out,
            vocab,
            dsp,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.kept.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub track: usize,
    pub patch: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Anchors are referenced by (track, patch) index into the training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

/// Draws a batch: anchors uniform over tracks, one uniform patch each, a
/// uniform positive among the track's tags, and `negatives` distinct tags
/// drawn uniformly from those not attached to the track.
pub fn sample_triplets<S: Scalar, R: Rng>(
    tracks: &[TrainTrack<S>],
    vocab_size: usize,
    batch_size: usize,
    negatives: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    if tracks.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for t in tracks {
        if t.tags.is_empty() {
            return Err(TrainError::NoResolvableTag { track: t.id.clone() });
        }
        let available = vocab_size.saturating_sub(t.tags.len());
        if available < negatives.max(1) {
            return Err(TrainError::NoNegatives {
                track: t.id.clone(),
                available,
                needed: negatives.max(1),
            });
        }
    }
    let triplets = (0..batch_size)
        .map(|_| {
            let track = rng.random_range(0..tracks.len());
            let t = &tracks[track];
            let patch = rng.random_range(0..t.patches.len());
            let positive = t.tags[rng.random_range(0..t.tags.len())];
            let pool: Vec<usize> = (0..vocab_size)
                .filter(|i| t.tags.binary_search(i).is_err())
                .collect();
            let negatives = rand::seq::index::sample(rng, pool.len(), negatives)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            Triplet {
                track,
                patch,
                positive,
                negatives,
            }
        })
        .collect();
    Ok(TripletBatch { triplets })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HingeLoss<S> {
    pub loss: S,
    pub grad_anchor: Vec<S>,
    pub grad_positive: Vec<S>,
    pub grad_negatives: Vec<Vec<S>>,
}

const UNIT_TOLERANCE: f64 = 1e-4;

fn check_unit<S: Scalar>(which: &str, v: &[S]) -> Result<()> {
    let deviation = (scalar::l2_norm(v).as_f64() - 1.0).abs();
    if deviation > UNIT_TOLERANCE || deviation.is_nan() {
        return Err(TrainError::NonUnit {
            which: which.to_string(),
            deviation,
        });
    }
    Ok(())
}

/// `Σ_j max(0, margin − cos(a, p) + cos(a, n_j))`, with (sub)gradients for
/// every input; an inactive or exactly-at-the-kink term contributes zero.
pub fn triplet_hinge_loss<S: Scalar>(
    anchor: &[S],
    positive: &[S],
    negatives: &[&[S]],
    margin: S,
) -> Result<HingeLoss<S>> {
    if margin.is_nan() || margin <= S::zero() {
        return Err(TrainError::Config("margin must be positive".into()));
    }
    check_unit("anchor", anchor)?;
    check_unit("positive", positive)?;
    for (j, n) in negatives.iter().enumerate() {
        check_unit(&format!("negative {j}"), n)?;
    }
    let d = anchor.len();
    let pos = diff::cosine_similarity(anchor, positive)?;
    let mut loss = S::zero();
    let mut grad_anchor = vec![S::zero(); d];
    let mut grad_positive = vec![S::zero(); d];
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for n in negatives {
        let neg = diff::cosine_similarity(anchor, n)?;
        let term = margin - pos.value + neg.value;
        if term > S::zero() {
            loss += term;
            for i in 0..d {
                grad_anchor[i] += neg.grad_a[i] - pos.grad_a[i];
                grad_positive[i] -= pos.grad_b[i];
            }
            grad_negatives.push(neg.grad_b);
        } else {
            grad_negatives.push(vec![S::zero(); d]);
        }
    }
    Ok(HingeLoss {
        loss,
        grad_anchor,
        grad_positive,
        grad_negatives,
    })
}

/// Adam moments per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub step: u64,
    pub first: BTreeMap<String, Vec<S>>,
    pub second: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParameterStore<S>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, p)| (n.to_string(), vec![S::zero(); p.len()]))
                .collect()
        };
        Self {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One bias-corrected Adam step. Blocks whose gradient is identically
    /// zero are left untouched (parameters and moments).
    pub fn apply(
        &mut self,
        params: &mut ParameterStore<S>,
        grads: &GradientMap<S>,
        config: &TrainConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::lit(config.beta1), S::lit(config.beta2));
        let lr = S::lit(config.learning_rate);
        let eps = S::lit(config.adam_epsilon);
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        for (name, param) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            if grad.data().iter().all(|&g| g == S::zero()) {
                continue;
            }
            let m = self.first.get_mut(name).ok_or_else(|| DiffError::MissingParam(name.into()))?;
            let v = self.second.get_mut(name).ok_or_else(|| DiffError::MissingParam(name.into()))?;
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

struct TripletOutcome<S> {
    loss: S,
    encoder_grads: GradientMap<S>,
    tag_grads: Vec<(usize, Vec<S>)>,
}

/// Mean triplet loss of a batch and its gradient for every parameter of both
/// branches. Per-triplet work may run on `threads` workers; all reductions
/// happen afterwards in triplet order, then tag order.
pub fn batch_objective<S: Scalar>(
    model: &JointModel,
    params: &ParameterStore<S>,
    data: &TrainingData<S>,
    batch: &TripletBatch,
    margin: f64,
    threads: usize,
) -> Result<(S, GradientMap<S>)> {
    if batch.triplets.is_empty() {
        return Ok((S::zero(), GradientMap::new()));
    }
    let tag_ids: BTreeSet<usize> = batch
        .triplets
        .iter()
        .flat_map(|t| std::iter::once(t.positive).chain(t.negatives.iter().copied()))
        .collect();
    let mut tag_points = BTreeMap::new();
    for &id in &tag_ids {
        let (_, vector) = &data.vocab.kept[id];
        tag_points.insert(id, model.project_traced(params, vector)?);
    }
    let scale = S::one() / S::lit(batch.triplets.len() as f64);
    let margin = S::lit(margin);

    let one = |t: &Triplet| -> Result<TripletOutcome<S>> {
        let patch = &data.tracks[t.track].patches[t.patch];
        let (anchor, trace) = model.encoder().encode_patch_traced(params, patch)?;
        let positive = tag_points[&t.positive].0.as_slice();
        let negatives: Vec<&[S]> = t.negatives.iter().map(|n| tag_points[n].0.as_slice()).collect();
        let hinge = triplet_hinge_loss(anchor.as_slice(), positive, &negatives, margin)?;
        let mut tag_grads = Vec::with_capacity(1 + negatives.len());
        let scaled = |g: &[S]| g.iter().map(|&x| x * scale).collect::<Vec<S>>();
        let encoder_grads = if hinge.loss > S::zero() {
            tag_grads.push((t.positive, scaled(&hinge.grad_positive)));
            for (&n, g) in t.negatives.iter().zip(&hinge.grad_negatives) {
                tag_grads.push((n, scaled(g)));
            }
            model
                .encoder()
                .backward(params, &trace, &scaled(&hinge.grad_anchor))?
        } else {
            GradientMap::new()
        };
        Ok(TripletOutcome {
            loss: hinge.loss,
            encoder_grads,
            tag_grads,
        })
    };

    let outcomes: Vec<Result<TripletOutcome<S>>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
        pool.install(|| batch.triplets.par_iter().map(one).collect())
    } else {
        batch.triplets.iter().map(one).collect()
    };

    let mut grads: GradientMap<S> = params
        .iter()
        .map(|(n, p)| (n.to_string(), NdArray::zeros(p.shape())))
        .collect();
    let mut loss = S::zero();
    let mut tag_totals: BTreeMap<usize, Vec<S>> = BTreeMap::new();
    for outcome in outcomes {
        let outcome = outcome?;
        loss += outcome.loss;
        for (name, g) in &outcome.encoder_grads {
            grads
                .get_mut(name)
                .ok_or_else(|| DiffError::MissingParam(name.clone()))?
                .add_assign(g)?;
        }
        for (id, g) in outcome.tag_grads {
            let total = tag_totals
                .entry(id)
                .or_insert_with(|| vec![S::zero(); g.len()]);
            total.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        }
    }
    for (id, g) in &tag_totals {
        let proj = model.project_backward(params, &tag_points[id].1, g)?;
        for (name, pg) in &proj {
            grads
                .get_mut(name)
                .ok_or_else(|| DiffError::MissingParam(name.clone()))?
                .add_assign(pg)?;
        }
    }
    Ok((loss * scale, grads))
}

fn first_non_finite<S: Scalar>(grads: &GradientMap<S>, params: &ParameterStore<S>) -> String {
    grads
        .iter()
        .find(|(_, g)| !g.is_finite())
        .map(|(n, _)| n.clone())
        .or_else(|| params.iter().find(|(_, p)| !p.is_finite()).map(|(n, _)| n.to_string()))
        .unwrap_or_else(|| "loss".to_string())
}

/// Forward both branches, backward, and one Adam update of all parameters.
/// Returns the mean batch loss before the update.
pub fn train_step<S: Scalar>(
    model: &JointModel,
    params: &mut ParameterStore<S>,
    optimizer: &mut OptimizerState<S>,
    data: &TrainingData<S>,
    batch: &TripletBatch,
    config: &TrainConfig,
) -> Result<S> {
    let (loss, grads) = batch_objective(model, params, data, batch, config.margin, config.threads)?;
    if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite {
            block: first_non_finite(&grads, params),
        });
    }
    optimizer.apply(params, &grads, config)?;
    if params.iter().any(|(_, p)| !p.is_finite()) {
        return Err(TrainError::NonFinite {
            block: first_non_finite(&GradientMap::new(), params),
        });
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct FitOutcome<S> {
    pub checkpoint: ModelCheckpoint<S>,
    /// Mean batch loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Trains both branches from a fresh initialisation for `config.epochs`
/// epochs of `max(1, tracks / batch_size)` steps each.
pub fn fit<S: Scalar>(
    data: &TrainingData<S>,
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<FitOutcome<S>> {
    config.validate()?;
    if data.tracks.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let word_dim = data
        .vocab
        .kept
        .first()
        .map(|(_, v)| v.len())
        .ok_or_else(|| TrainError::Config("empty tag vocabulary".into()))?;
    let model = JointModel::new(encoder.clone(), word_dim)?;
    let mut params = model.init::<S>(config.seed);
    let mut optimizer = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let steps = (data.tracks.len() / config.batch_size).max(1);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = sample_triplets(
                &data.tracks,
                data.vocab_size(),
                config.batch_size,
                config.negatives_per_anchor,
                &mut rng,
            )?;
            total += train_step(&model, &mut params, &mut optimizer, data, &batch, config)?.as_f64();
        }
        history.push(total / steps as f64);
    }

    let checkpoint = ModelCheckpoint {
        encoder: encoder.clone(),
        dsp: data.dsp,
        word_dim,
        params,
        vocab: data.vocab.tags().map(str::to_string).collect(),
        meta: TrainingMeta {
            seed: config.seed,
            epochs_completed: config.epochs,
            train_track_ids: data.tracks.iter().map(|t| t.id.clone()).collect(),
            ..TrainingMeta::default()
        },
    };
    Ok(FitOutcome {
        checkpoint,
        loss_history: history,
    })
}
