use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tagspace::checkpoint::{self, CheckpointError};
use tagspace::dsp::{DspConfig, Matrix, MelSpectrogram};
use tagspace::encoder::EncoderConfig;
use tagspace::model::JointModel;
use tagspace::trainer::{
    batch_objective, fit, sample_triplets, train_step, triplet_hinge_loss, OptimizerState,
    TrainConfig, TrainError, TrainTrack, TrainingData, TripletBatch,
};
use tagspace::words::LabelMatrix;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        patch_frames: 16,
        n_mels: 12,
        channels: vec![4, 6],
        kernel: 3,
        pool: 2,
        joint_dim: 8,
    }
}

/// Tracks whose patches carry a bright mel band per tag, plus noise.
fn small_data(seed: u64, n_tracks: usize, n_tags: usize) -> TrainingData<f64> {
    let enc = small_encoder();
    let dsp = DspConfig { n_mels: enc.n_mels, ..DspConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = LabelMatrix {
        kept: (0..n_tags)
            .map(|i| (format!("tag{i}"), (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect(),
        dropped: Vec::new(),
    };
    let tracks = (0..n_tracks)
        .map(|t| {
            let mut tags = vec![t % n_tags];
            if t % 3 == 0 {
                tags.push((t + 1) % n_tags);
            }
            tags.sort_unstable();
            let patches = (0..2)
                .map(|_| {
                    let mut data: Vec<f64> = (0..enc.patch_frames * enc.n_mels)
                        .map(|_| rng.random_range(-0.3..0.3))
                        .collect();
                    for &g in &tags {
                        for f in 0..enc.patch_frames {
                            data[f * enc.n_mels + (3 * g) % enc.n_mels] += 2.0;
                        }
                    }
                    MelSpectrogram::from_matrix(Matrix::from_vec(enc.patch_frames, enc.n_mels, data), dsp)
                })
                .collect();
            TrainTrack { id: format!("t{t:02}"), patches, tags }
        })
        .collect();
    TrainingData { tracks, vocab, dsp }
}

#[test]
fn sampled_triplets_respect_membership() {
    let data = small_data(1, 10, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut n = 0;
    while n < 10_000 {
        let batch = sample_triplets(&data.tracks, 7, 100, 4, &mut rng).unwrap();
        for t in &batch.triplets {
            let track = &data.tracks[t.track];
            assert!(t.patch < track.patches.len());
            assert!(track.tags.contains(&t.positive));
            assert_eq!(t.negatives.len(), 4);
            let mut sorted = t.negatives.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 4, "negatives distinct");
            assert!(t.negatives.iter().all(|n| *n < 7 && !track.tags.contains(n)));
            n += 1;
        }
    }
}

#[test]
fn sampling_is_seeded() {
    let data = small_data(1, 10, 7);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_triplets(&data.tracks, 7, 64, 3, &mut rng).unwrap()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

#[test]
fn positive_is_uniform_over_track_tags() {
    let mut data = small_data(1, 1, 6);
    data.tracks[0].tags = vec![1, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch = sample_triplets(&data.tracks, 6, 10_000, 2, &mut rng).unwrap();
    let a = batch.triplets.iter().filter(|t| t.positive == 1).count();
    let share = a as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&share), "share {share}");
}

#[test]
fn sampling_errors() {
    let data = small_data(1, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        sample_triplets::<f64, _>(&[], 3, 4, 1, &mut rng),
        Err(TrainError::EmptyCorpus)
    ));
    let mut full = data.tracks.clone();
    full[0].tags = vec![0, 1, 2];
    assert!(matches!(
        sample_triplets(&full, 3, 4, 1, &mut rng),
        Err(TrainError::NoNegatives { .. })
    ));
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(unit)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn hinge_is_nonnegative_zero_iff_margins_hold_and_permutation_invariant(
        a in unit_vec(5), p in unit_vec(5), negs in prop::collection::vec(unit_vec(5), 1..6),
        margin in 0.05f64..1.5, shift in 0usize..6,
    ) {
        let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let l = triplet_hinge_loss(&a, &p, &refs, margin).unwrap();
        prop_assert!(l.loss >= 0.0);
        let cos = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(s, t)| s * t).sum::<f64>();
        let all_hold = negs.iter().all(|n| cos(&a, &p) >= margin + cos(&a, n));
        prop_assert_eq!(l.loss == 0.0, all_hold);
        let mut rotated = refs.clone();
        let k = shift % rotated.len();
        rotated.rotate_left(k);
        let r = triplet_hinge_loss(&a, &p, &rotated, margin).unwrap();
        prop_assert!((r.loss - l.loss).abs() < 1e-12);
    }
}

fn config(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size: 8,
        negatives_per_anchor: 2,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn small_learning_rate_step_descends() {
    let mut descended = 0;
    for trial in 0..100u64 {
        let data = small_data(trial, 8, 5);
        let model = JointModel::new(small_encoder(), 6).unwrap();
        let mut params = model.init::<f64>(trial + 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let batch = sample_triplets(&data.tracks, 5, 8, 2, &mut rng).unwrap();
        let cfg = config(1e-4, 1);
        let before = batch_objective(&model, &params, &data, &batch, cfg.margin, 1).unwrap().0;
        let mut opt = OptimizerState::new(&params);
        train_step(&model, &mut params, &mut opt, &data, &batch, &cfg).unwrap();
        let after = batch_objective(&model, &params, &data, &batch, cfg.margin, 1).unwrap().0;
        if after <= before {
            descended += 1;
        }
    }
    assert!(descended >= 95, "descended in {descended} of 100 trials");
}

#[test]
fn zero_loss_batch_leaves_parameters_unchanged() {
    let data = small_data(3, 12, 4);
    let model = JointModel::new(small_encoder(), 6).unwrap();
    let cfg = TrainConfig { margin: 0.1, ..config(1e-2, 1) };
    let mut params = model.init::<f64>(3);
    let mut opt = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut found = None;
    for _ in 0..400 {
        let batch = sample_triplets(&data.tracks, 4, 8, 2, &mut rng).unwrap();
        let probe = TripletBatch { triplets: batch.triplets[..1].to_vec() };
        if batch_objective(&model, &params, &data, &probe, cfg.margin, 1).unwrap().0 == 0.0 {
            found = Some(probe);
            break;
        }
        train_step(&model, &mut params, &mut opt, &data, &batch, &cfg).unwrap();
    }
    let batch = found.expect("training reaches a zero-loss triplet");
    let before = params.clone();
    let step = opt.step;
    let (loss, grads) = batch_objective(&model, &params, &data, &batch, cfg.margin, 1).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.values().all(|g| g.data().iter().all(|&x| x == 0.0)));
    train_step(&model, &mut params, &mut opt, &data, &batch, &cfg).unwrap();
    assert_eq!(params, before);
    assert_eq!(opt.step, step + 1);
}

#[test]
fn zero_epochs_returns_initialisation() {
    let data = small_data(2, 8, 4);
    let out = fit(&data, &small_encoder(), &config(1e-3, 0)).unwrap();
    assert!(out.loss_history.is_empty());
    let init = JointModel::new(small_encoder(), 6).unwrap().init::<f64>(7);
    assert_eq!(out.checkpoint.params, init);
}

#[test]
fn fit_is_deterministic_across_runs_and_thread_counts() {
    let data = small_data(4, 16, 5);
    let a = fit(&data, &small_encoder(), &config(3e-3, 4)).unwrap();
    let b = fit(&data, &small_encoder(), &config(3e-3, 4)).unwrap();
    let c = fit(&data, &small_encoder(), &TrainConfig { threads: 3, ..config(3e-3, 4) }).unwrap();
    let bits = |h: &[f64]| h.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.loss_history), bits(&b.loss_history));
    assert_eq!(bits(&a.loss_history), bits(&c.loss_history));
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}

#[test]
fn training_lowers_the_loss() {
    let data = small_data(5, 24, 4);
    let out = fit(&data, &small_encoder(), &config(1e-2, 15)).unwrap();
    let h = &out.loss_history;
    assert!(h.last().unwrap() < h.first().unwrap(), "{h:?}");
}

#[test]
fn checkpoint_file_round_trip_and_damage() {
    let data = small_data(6, 8, 4);
    let ckpt = fit(&data, &small_encoder(), &config(1e-3, 1)).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    checkpoint::save_checkpoint(&ckpt, std::fs::File::create(&path).unwrap()).unwrap();
    let back: tagspace::Checkpoint64 = checkpoint::load_checkpoint(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, ckpt);
    for ((_, a), (_, b)) in back.params.iter().zip(ckpt.params.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let bytes = std::fs::read(&path).unwrap();
    let cut = &bytes[..bytes.len() - 20];
    assert!(matches!(
        checkpoint::checkpoint_from_bytes::<f64>(cut),
        Err(CheckpointError::Truncated(_))
    ));
    let mut bumped = bytes.clone();
    bumped[8..12].copy_from_slice(&7u32.to_le_bytes());
    match checkpoint::checkpoint_from_bytes::<f64>(&bumped) {
        Err(CheckpointError::Version { found: 7, expected }) => assert_eq!(expected, [1]),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(
        checkpoint::checkpoint_from_bytes::<f32>(&bytes),
        Err(CheckpointError::DType { .. })
    ));
}
