//! The audio branch: a small CNN from a mel-spectrogram patch to a unit-norm
//! point in the joint semantic space.
//!
//! Architecture: `blocks × (conv k×k → relu → maxpool p×p)`, then global
//! average pooling, a dense layer to the joint dimension, and L2
//! normalisation. The patch is fed as a one-channel image `[1, frames, mels]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{self, Cache, DiffError, GradientMap, LayerSpec, NdArray, ParameterStore};
use crate::dsp::{self, DspError, MelSpectrogram};
use crate::scalar::{self, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("patch is {found:?} (frames x mels), encoder expects {expected:?}")]
    PatchShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("patch embeddings cancel out; the mean embedding has zero norm")]
    DegenerateMean,
    #[error("no patch embeddings to pool")]
    NoPatches,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// A unit-norm vector in the joint embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPoint<S>(Vec<S>);

impl<S: Scalar> SemanticPoint<S> {
    /// Normalises `v`; `None` when its norm is zero or not finite.
    pub fn normalized(mut v: Vec<S>) -> Option<Self> {
        let norm = scalar::l2_norm(&v);
        if norm == S::zero() || !norm.is_finite() {
            return None;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Some(Self(v))
    }

    /// Wraps a vector that is already unit norm within `tolerance`.
    pub fn from_unit(v: Vec<S>, tolerance: f64) -> Option<Self> {
        let norm = scalar::l2_norm(&v).as_f64();
        ((norm - 1.0).abs() <= tolerance).then_some(Self(v))
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<S> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> S {
        scalar::l2_norm(&self.0)
    }

    /// Cosine similarity; both points are unit norm so this is the dot product.
    pub fn cosine(&self, other: &Self) -> S {
        scalar::dot(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_frames: usize,
    pub n_mels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub joint_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_frames: 128,
            n_mels: 128,
            channels: vec![16, 32, 64, 64],
            kernel: 3,
            pool: 2,
            joint_dim: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.patch_frames == 0 || self.n_mels == 0 {
            return bad("input shape must be nonzero".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channels must be nonempty and positive, got {:?}", self.channels));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.pool == 0 {
            return bad("pool must be >= 1".into());
        }
        if self.joint_dim == 0 {
            return bad("joint_dim must be >= 1".into());
        }
        let (mut h, mut w) = (self.patch_frames, self.n_mels);
        for _ in &self.channels {
            if h < self.pool || w < self.pool {
                return bad(format!(
                    "input {}x{} shrinks below one cell after {} pooling stages",
                    self.patch_frames,
                    self.n_mels,
                    self.channels.len()
                ));
            }
            h /= self.pool;
            w /= self.pool;
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.channels.len()
    }
}

/// One layer of the stack and the name prefix of its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub spec: LayerSpec,
    pub name: Option<String>,
}

impl EncoderLayer {
    fn param_names(&self) -> Vec<String> {
        match &self.name {
            Some(prefix) => self
                .spec
                .param_shapes()
                .iter()
                .map(|(suffix, _, _)| format!("{prefix}.{suffix}"))
                .collect(),
            None => Vec::new(),
        }
    }
}

/// Forward state of one patch, consumed by [`AudioEncoder::backward`].
pub struct EncoderTrace<S> {
    caches: Vec<Cache<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    config: EncoderConfig,
    layers: Vec<EncoderLayer>,
}

impl AudioEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            layers.push(EncoderLayer {
                spec: LayerSpec::Conv2d {
                    in_channels: in_ch,
                    out_channels: out_ch,
                    kernel: config.kernel,
                    stride: 1,
                },
                name: Some(format!("encoder.block{i}.conv")),
            });
            layers.push(EncoderLayer {
                spec: LayerSpec::Relu,
                name: None,
            });
            layers.push(EncoderLayer {
                spec: LayerSpec::MaxPool2d {
                    size: config.pool,
                    stride: config.pool,
                },
                name: None,
            });
            in_ch = out_ch;
        }
        layers.push(EncoderLayer {
            spec: LayerSpec::GlobalAvgPool,
            name: None,
        });
        layers.push(EncoderLayer {
            spec: LayerSpec::Dense {
                in_features: in_ch,
                out_features: config.joint_dim,
            },
            name: Some("encoder.head".into()),
        });
        layers.push(EncoderLayer {
            spec: LayerSpec::L2Norm,
            name: None,
        });
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    /// He-uniform weights (bound `√(6/fan_in)`), zero biases.
    pub fn init<S: Scalar>(&self, seed: u64) -> ParameterStore<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for layer in &self.layers {
            let Some(prefix) = &layer.name else { continue };
            for (suffix, shape, fan_in) in layer.spec.param_shapes() {
                let n: usize = shape.iter().product();
                let data = if suffix == "weight" {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| S::lit(rng.random_range(-bound..=bound))).collect()
                } else {
                    vec![S::zero(); n]
                };
                store.insert(
                    format!("{prefix}.{suffix}"),
                    NdArray::from_vec(&shape, data).expect("shape product"),
                );
            }
        }
        store
    }

    fn input_array<S: Scalar>(&self, patch: &MelSpectrogram<S>) -> Result<NdArray<S>> {
        let found = (patch.n_frames(), patch.n_mels());
        let expected = (self.config.patch_frames, self.config.n_mels);
        if found != expected {
            return Err(EncoderError::PatchShape { expected, found });
        }
        Ok(NdArray::from_vec(
            &[1, found.0, found.1],
            patch.values().as_slice().to_vec(),
        )?)
    }

    fn layer_params<'a, S: Scalar>(
        &self,
        params: &'a ParameterStore<S>,
        layer: &EncoderLayer,
    ) -> Result<Vec<&'a NdArray<S>>> {
        layer
            .param_names()
            .iter()
            .map(|n| params.get(n).map_err(EncoderError::from))
            .collect()
    }

    /// Forward pass on a raw `[1, frames, mels]` input.
    pub fn forward<S: Scalar>(
        &self,
        params: &ParameterStore<S>,
        input: NdArray<S>,
    ) -> Result<(SemanticPoint<S>, EncoderTrace<S>)> {
        let mut x = input;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let p = self.layer_params(params, layer)?;
            let (y, cache) = diff::layer_forward(&layer.spec, &p, &x)?;
            caches.push(cache);
            x = y;
        }
        Ok((SemanticPoint(x.into_data()), EncoderTrace { caches }))
    }

    /// Gradients of all encoder parameters given `d loss / d point`.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParameterStore<S>,
        trace: &EncoderTrace<S>,
        grad_point: &[S],
    ) -> Result<GradientMap<S>> {
        let mut grads = GradientMap::new();
        let mut g = NdArray::vector(grad_point.to_vec());
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            let p = self.layer_params(params, layer)?;
            let (gi, gp) = diff::layer_backward(&layer.spec, &p, cache, &g)?;
            for (name, grad) in layer.param_names().into_iter().zip(gp) {
                grads.insert(name, grad);
            }
            g = gi;
        }
        Ok(grads)
    }

    pub fn encode_patch<S: Scalar>(
        &self,
        params: &ParameterStore<S>,
        patch: &MelSpectrogram<S>,
    ) -> Result<SemanticPoint<S>> {
        Ok(self.forward(params, self.input_array(patch)?)?.0)
    }

    /// Forward pass keeping the trace for training.
    pub fn encode_patch_traced<S: Scalar>(
        &self,
        params: &ParameterStore<S>,
        patch: &MelSpectrogram<S>,
    ) -> Result<(SemanticPoint<S>, EncoderTrace<S>)> {
        self.forward(params, self.input_array(patch)?)
    }

    /// Mean of the per-patch embeddings of a whole track, renormalised.
    pub fn encode_track<S: Scalar>(
        &self,
        params: &ParameterStore<S>,
        mel: &MelSpectrogram<S>,
        stride: usize,
    ) -> Result<SemanticPoint<S>> {
        let patches = dsp::extract_patches(mel, self.config.patch_frames, stride)?;
        let points = patches
            .iter()
            .map(|p| self.encode_patch(params, p))
            .collect::<Result<Vec<_>>>()?;
        pool_patch_embeddings(&points)
    }
}

/// Builds encoder parameters for `config`, deterministic in `seed`.
pub fn init_encoder<S: Scalar>(config: &EncoderConfig, seed: u64) -> Result<ParameterStore<S>> {
    Ok(AudioEncoder::new(config.clone())?.init(seed))
}

/// Renormalised mean of patch embeddings. Embeddings are summed in a canonical
/// (lexicographic) order, so the result does not depend on patch order.
pub fn pool_patch_embeddings<S: Scalar>(points: &[SemanticPoint<S>]) -> Result<SemanticPoint<S>> {
    let first = points.first().ok_or(EncoderError::NoPatches)?;
    if points.len() == 1 {
        return Ok(first.clone());
    }
    let mut ordered: Vec<&SemanticPoint<S>> = points.iter().collect();
    ordered.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = S::lit(points.len() as f64);
    let mut mean = vec![S::zero(); first.dim()];
    for p in ordered {
        mean.iter_mut().zip(&p.0).for_each(|(m, &x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    SemanticPoint::normalized(mean).ok_or(EncoderError::DegenerateMean)
}
