//! The two-branch joint model: audio encoder plus the word projection, with
//! parameters held in one [`ParameterStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{self, Cache, GradientMap, LayerSpec, NdArray, ParameterStore};
use crate::encoder::{AudioEncoder, EncoderConfig, EncoderError, SemanticPoint};
use crate::scalar::Scalar;
use crate::words::{ProjectionParams, WordError};

pub const PROJECTION_WEIGHT: &str = "projection.weight";
pub const PROJECTION_BIAS: &str = "projection.bias";

// keeps projection initialisation independent of the encoder's random stream
const PROJECTION_SEED_SALT: u64 = 0x5DEE_CE66_D1CE_4E5B;

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    encoder: AudioEncoder,
    word_dim: usize,
}

/// Word-branch forward state for one tag.
pub struct WordTrace<S> {
    dense: Cache<S>,
    norm: Cache<S>,
}

impl JointModel {
    pub fn new(encoder: EncoderConfig, word_dim: usize) -> Result<Self, EncoderError> {
        if word_dim == 0 {
            return Err(EncoderError::Config("word dimension must be >= 1".into()));
        }
        Ok(Self {
            encoder: AudioEncoder::new(encoder)?,
            word_dim,
        })
    }

    pub fn encoder(&self) -> &AudioEncoder {
        &self.encoder
    }

    pub fn joint_dim(&self) -> usize {
        self.encoder.config().joint_dim
    }

    pub fn word_dim(&self) -> usize {
        self.word_dim
    }

    fn projection_spec(&self) -> LayerSpec {
        LayerSpec::Dense {
            in_features: self.word_dim,
            out_features: self.joint_dim(),
        }
    }

    /// Fresh parameters for both branches, deterministic in `seed`.
    pub fn init<S: Scalar>(&self, seed: u64) -> ParameterStore<S> {
        let mut store = self.encoder.init(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROJECTION_SEED_SALT);
        let bound = (6.0 / self.word_dim as f64).sqrt();
        let weight = (0..self.joint_dim() * self.word_dim)
            .map(|_| S::lit(rng.random_range(-bound..=bound)))
            .collect();
        store.insert(
            PROJECTION_WEIGHT,
            NdArray::from_vec(&[self.joint_dim(), self.word_dim], weight).expect("shape"),
        );
        store.insert(PROJECTION_BIAS, NdArray::zeros(&[self.joint_dim()]));
        store
    }

    /// Checks that `params` holds every array this architecture needs, with
    /// the right shapes, and nothing else.
    pub fn check_params<S: Scalar>(&self, params: &ParameterStore<S>) -> Result<(), String> {
        let reference = self.init::<S>(0);
        for (name, value) in reference.iter() {
            let found = params
                .get(name)
                .map_err(|_| format!("missing parameter {name}"))?;
            if found.shape() != value.shape() {
                return Err(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    value.shape()
                ));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(format!("unexpected parameter {extra}"));
        }
        Ok(())
    }

    pub fn projection<S: Scalar>(
        &self,
        params: &ParameterStore<S>,
    ) -> Result<ProjectionParams<S>, WordError> {
        let missing = |e: diff::DiffError| WordError::InvalidProjection(e.to_string());
        ProjectionParams::new(
            params.get(PROJECTION_WEIGHT).map_err(missing)?.data().to_vec(),
            params.get(PROJECTION_BIAS).map_err(missing)?.data().to_vec(),
            self.joint_dim(),
            self.word_dim,
        )
    }

    /// Word branch with trace: `l2norm(W·v + b)`.
    pub fn project_traced<S: Scalar>(
        &self,
        params: &ParameterStore<S>,
        vector: &[S],
    ) -> Result<(SemanticPoint<S>, WordTrace<S>), EncoderError> {
        let spec = self.projection_spec();
        let w = params.get(PROJECTION_WEIGHT)?;
        let b = params.get(PROJECTION_BIAS)?;
        let (z, dense) = diff::layer_forward(&spec, &[w, b], &NdArray::vector(vector.to_vec()))?;
        let (p, norm) = diff::layer_forward(&LayerSpec::L2Norm, &[], &z)?;
        Ok((
            SemanticPoint::from_unit(p.into_data(), 1e-6).expect("l2norm output"),
            WordTrace { dense, norm },
        ))
    }

    /// Projection gradients given `d loss / d tag point`.
    pub fn project_backward<S: Scalar>(
        &self,
        params: &ParameterStore<S>,
        trace: &WordTrace<S>,
        grad_point: &[S],
    ) -> Result<GradientMap<S>, EncoderError> {
        let spec = self.projection_spec();
        let w = params.get(PROJECTION_WEIGHT)?;
        let b = params.get(PROJECTION_BIAS)?;
        let (gz, _) = diff::layer_backward(
            &LayerSpec::L2Norm,
            &[],
            &trace.norm,
            &NdArray::vector(grad_point.to_vec()),
        )?;
        let (_, mut gp) = diff::layer_backward(&spec, &[w, b], &trace.dense, &gz)?;
        let gb = gp.pop().expect("bias gradient");
        let gw = gp.pop().expect("weight gradient");
        let mut out = GradientMap::new();
        out.insert(PROJECTION_WEIGHT.to_string(), gw);
        out.insert(PROJECTION_BIAS.to_string(), gb);
        Ok(out)
    }
}
