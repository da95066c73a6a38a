//! Finite-difference verification of every layer kind and of the full
//! encoder + projection + hinge objective, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{
    self, check_gradient, DiffError, FnObjective, GradCheckReport, GradientMap, LayerSpec, NdArray,
    ParameterStore,
};
use crate::dsp::{DspConfig, Matrix, MelSpectrogram};
use crate::encoder::EncoderConfig;
use crate::model::JointModel;
use crate::trainer::{self, TrainTrack, TrainingData, Triplet, TripletBatch};
use crate::words::LabelMatrix;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

const INPUT: &str = "input";

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

/// One small configuration per layer kind, with its input shape.
pub fn layer_cases() -> Vec<(&'static str, LayerSpec, Vec<usize>)> {
    vec![
        (
            "conv2d",
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 1,
            },
            vec![2, 5, 6],
        ),
        (
            "conv2d/stride2",
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 2,
            },
            vec![1, 6, 7],
        ),
        ("relu", LayerSpec::Relu, vec![2, 3, 4]),
        ("maxpool2d", LayerSpec::MaxPool2d { size: 2, stride: 2 }, vec![2, 4, 6]),
        ("global_avg_pool", LayerSpec::GlobalAvgPool, vec![3, 4, 5]),
        (
            "dense",
            LayerSpec::Dense {
                in_features: 5,
                out_features: 4,
            },
            vec![5],
        ),
        ("l2norm", LayerSpec::L2Norm, vec![6]),
    ]
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    NdArray::from_vec(shape, data).expect("shape")
}

/// Checks one layer on the linear functional `Σ rᵢ·yᵢ` with random `r`,
/// differentiating with respect to both the input and the parameters.
pub fn check_layer(spec: &LayerSpec, input_shape: &[usize], seed: u64) -> diff::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point = ParameterStore::new();
    point.insert(INPUT, uniform(&mut rng, input_shape));
    let names: Vec<&str> = spec.param_shapes().iter().map(|p| p.0).collect();
    for (name, shape, _) in spec.param_shapes() {
        point.insert(name, uniform(&mut rng, &shape));
    }
    let out_shape = spec.output_shape(input_shape)?;
    let weights = uniform(&mut rng, &out_shape);

    let objective = FnObjective(|p: &ParameterStore<f64>| {
        let params = names.iter().map(|n| p.get(n)).collect::<diff::Result<Vec<_>>>()?;
        let (y, cache) = diff::layer_forward(spec, &params, p.get(INPUT)?)?;
        let value = y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let (gi, gp) = diff::layer_backward(spec, &params, &cache, &weights)?;
        let mut grads = GradientMap::new();
        grads.insert(INPUT.to_string(), gi);
        for (n, g) in names.iter().zip(gp) {
            grads.insert(n.to_string(), g);
        }
        Ok((value, grads))
    });
    check_gradient(&objective, &point, EPSILON)
}

/// Encoder configuration small enough for exhaustive finite differences.
pub fn composite_encoder() -> EncoderConfig {
    EncoderConfig {
        patch_frames: 8,
        n_mels: 8,
        channels: vec![3, 4],
        kernel: 3,
        pool: 2,
        joint_dim: 8,
    }
}

/// Mean hinge loss of a random batch with respect to every parameter of both
/// branches.
pub fn check_composite(seed: u64) -> diff::Result<GradCheckReport> {
    let encoder = composite_encoder();
    let word_dim = 12;
    let n_tags = 6;
    let margin = 1.5;
    let model = JointModel::new(encoder.clone(), word_dim).map_err(|e| DiffError::Objective(e.to_string()))?;
    let dsp = DspConfig {
        n_mels: encoder.n_mels,
        ..DspConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = model.init::<f64>(rng.random());

    let vocab = LabelMatrix {
        kept: (0..n_tags)
            .map(|i| {
                let v = (0..word_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                (format!("tag{i}"), v)
            })
            .collect(),
        dropped: Vec::new(),
    };
    let tracks = (0..2)
        .map(|t| TrainTrack {
            id: format!("track{t}"),
            patches: vec![MelSpectrogram::from_matrix(
                Matrix::from_vec(
                    encoder.patch_frames,
                    encoder.n_mels,
                    (0..encoder.patch_frames * encoder.n_mels)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect(),
                ),
                dsp,
            )],
            tags: vec![t],
        })
        .collect();
    let data = TrainingData {
        tracks,
        vocab,
        dsp,
    };
    let batch = TripletBatch {
        triplets: vec![
            Triplet { track: 0, patch: 0, positive: 0, negatives: vec![2, 3] },
            Triplet { track: 1, patch: 0, positive: 1, negatives: vec![4, 5] },
            Triplet { track: 0, patch: 0, positive: 0, negatives: vec![1, 5] },
        ],
    };
    let objective = FnObjective(|p: &ParameterStore<f64>| {
        trainer::batch_objective(&model, p, &data, &batch, margin, 1)
            .map_err(|e| DiffError::Objective(e.to_string()))
    });
    check_gradient(&objective, &point, EPSILON)
}

/// Every layer case and the composite objective for each seed in `seeds`.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>) -> diff::Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for seed in seeds {
        for (name, spec, shape) in layer_cases() {
            out.push(SuiteEntry {
                name: name.to_string(),
                seed,
                report: check_layer(&spec, &shape, seed)?,
            });
        }
        out.push(SuiteEntry {
            name: "encoder+projection+hinge".into(),
            seed,
            report: check_composite(seed)?,
        });
    }
    Ok(out)
}
