use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tagspace::corpus::{
    class_tag, export_wavs, load_manifest, make_splits, mel_profile, nearest_centroid_accuracy, synth_toy_corpus,
    write_manifest, AudioSource, CorpusError, Split, SplitSpec, ToyCorpus, ToyCorpusConfig, TrackRecord,
};
use tagspace::dsp::{self, mel_spectrogram, DspConfig};

fn record(id: &str, tags: &[&str]) -> TrackRecord {
    TrackRecord {
        track_id: id.into(),
        audio: AudioSource::Path(format!("audio/{id}.wav").into()),
        tags: tags.iter().map(|s| s.to_string()).collect(),
        split: None,
    }
}

#[test]
fn five_hundred_split_configurations_partition_the_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for trial in 0..500 {
        let n = rng.random_range(3..120);
        let n_tags = rng.random_range(1..6);
        let records: Vec<TrackRecord> = (0..n)
            .map(|i| record(&format!("r{i:03}"), &[&format!("g{}", rng.random_range(0..n_tags))]))
            .collect();
        let a = rng.random_range(0.0..1.0f64);
        let b = rng.random_range(0.0..(1.0 - a));
        let spec = SplitSpec {
            train: a,
            valid: b,
            test: 1.0 - a - b,
            seed: trial,
            stratify: rng.random_bool(0.5),
        };
        let out = make_splits(&records, &spec).unwrap();
        assert_eq!(out.len(), n);
        let mut per: BTreeMap<Split, Vec<&str>> = BTreeMap::new();
        for (r, o) in records.iter().zip(&out) {
            assert_eq!(r.track_id, o.track_id, "order preserved");
            per.entry(o.split.expect("every record assigned")).or_default().push(&o.track_id);
        }
        let total: usize = per.values().map(Vec::len).sum();
        let union: HashSet<&str> = per.values().flatten().copied().collect();
        assert_eq!(total, n);
        assert_eq!(union.len(), n, "splits are disjoint");
        if !spec.stratify {
            // buckets whose quota rounds to zero may take one record each from the largest
            let topped = spec.fractions().iter().filter(|&&f| f > 0.0 && f * (n as f64) < 1.0).count() as f64;
            for (s, f) in Split::ALL.into_iter().zip(spec.fractions()) {
                let got = per.get(&s).map_or(0, Vec::len);
                assert!((got as f64 - f * n as f64).abs() <= 1.0 + topped + 1e-9, "trial {trial}: {s} {got} vs {f}·{n}");
                if f > 0.0 {
                    assert!(got > 0);
                }
            }
        }
        assert_eq!(make_splits(&records, &spec).unwrap(), out, "seeded");
    }
}

#[test]
fn stratified_split_keeps_class_proportions() {
    let records: Vec<TrackRecord> = (0..100).map(|i| record(&format!("r{i}"), &[&format!("g{}", i % 4)])).collect();
    let spec = SplitSpec { train: 0.8, valid: 0.0, test: 0.2, seed: 3, stratify: true };
    let out = make_splits(&records, &spec).unwrap();
    for g in 0..4 {
        let tag = format!("g{g}");
        let test = out.iter().filter(|r| r.tags[0] == tag && r.split == Some(Split::Test)).count();
        assert_eq!(test, 5);
    }
}

#[test]
fn split_spec_errors() {
    let records = vec![record("a", &["x"]), record("b", &["x"])];
    let bad = SplitSpec { train: 0.5, valid: 0.2, test: 0.2, ..SplitSpec::default() };
    assert!(matches!(make_splits(&records, &bad), Err(CorpusError::SplitSpec(_))));
    assert!(matches!(
        make_splits(&records, &SplitSpec::default()),
        Err(CorpusError::TooFewRecords { records: 2, buckets: 3 })
    ));
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let text = "a\taudio/a.wav\tjazz\n\nb\taudio/b.wav\n";
    match load_manifest(text.as_bytes()) {
        Err(CorpusError::Malformed { line: 3, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    let dup = "a\tx.wav\tjazz\na\ty.wav\trock\n";
    assert!(matches!(load_manifest(dup.as_bytes()), Err(CorpusError::DuplicateId { line: 2, .. })));
    let bad_split = "a\tx.wav\tjazz\tholdout\n";
    assert!(matches!(load_manifest(bad_split.as_bytes()), Err(CorpusError::Malformed { line: 1, .. })));
}

fn manifest_records() -> impl Strategy<Value = Vec<TrackRecord>> {
    prop::collection::btree_map(
        "[a-z0-9_]{1,10}",
        (
            "[a-z/]{1,12}",
            prop::collection::vec("[a-z]{1,6}( [a-z]{1,6})?", 1..4),
            prop::option::of(prop::sample::select(Split::ALL.to_vec())),
        ),
        1..25,
    )
    .prop_map(|m| {
        m.into_iter()
            .map(|(id, (path, tags, split))| TrackRecord {
                track_id: id,
                audio: AudioSource::Path(format!("{path}.wav").into()),
                tags,
                split,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn manifest_round_trip(records in manifest_records()) {
        let mut buf = Vec::new();
        write_manifest(&records, &mut buf).unwrap();
        let back = load_manifest(buf.as_slice()).unwrap();
        prop_assert_eq!(back, records);
    }
}

fn small_toy(seed: u64) -> ToyCorpusConfig {
    ToyCorpusConfig {
        tracks_per_class: 6,
        duration_secs: 1.0,
        seed,
        ..ToyCorpusConfig::default()
    }
}

#[test]
fn toy_corpus_is_deterministic_and_well_formed() {
    let a = synth_toy_corpus::<f64>(&small_toy(4)).unwrap();
    let b = synth_toy_corpus::<f64>(&small_toy(4)).unwrap();
    let c = synth_toy_corpus::<f64>(&small_toy(5)).unwrap();
    assert_eq!(a.records, b.records);
    assert_ne!(a.records, c.records);
    let sa = a.records[7].load_audio::<f64>(None).unwrap();
    let sb = b.records[7].load_audio::<f64>(None).unwrap();
    assert_eq!(sa.samples(), sb.samples());
    assert!(sa.samples().iter().all(|x| (-1.0..=1.0).contains(x)));
    assert_eq!(sa.samples().len(), 22050);

    assert_eq!(a.records.len(), 72);
    assert_eq!(a.seen_tags.len(), 10);
    assert_eq!(a.unseen_tags, [class_tag(10), class_tag(11)]);
    for r in &a.records {
        let g = ToyCorpus::<f64>::class_of(r).unwrap();
        if g >= 10 {
            assert_eq!(r.split, Some(Split::Test));
        } else {
            assert!(matches!(r.split, Some(Split::Train | Split::Test)));
        }
    }
    let seen_test = a.split(Split::Test).filter(|r| ToyCorpus::<f64>::class_of(r).unwrap() < 10).count();
    assert!(seen_test > 0);
    for tag in a.seen_tags.iter().chain(&a.unseen_tags) {
        let v = a.words.get(tag).unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
    let cos = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let u = a.words.get(&class_tag(10)).unwrap();
    let (p0, p1) = (a.words.get(&class_tag(0)).unwrap(), a.words.get(&class_tag(1)).unwrap());
    assert!((cos(u, p0) - cos(u, p1)).abs() < 1e-12, "midpoint is equidistant to its parents");
}

#[test]
fn exported_wavs_decode_to_the_synthetic_signal() {
    let toy = synth_toy_corpus::<f64>(&ToyCorpusConfig { tracks_per_class: 1, ..small_toy(1) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let exported = export_wavs(&toy.records[..2], dir.path()).unwrap();
    for (orig, exp) in toy.records.iter().zip(&exported) {
        assert!(matches!(exp.audio, AudioSource::Path(_)));
        let a = orig.load_audio::<f64>(None).unwrap();
        let b = exp.load_audio::<f64>(Some(dir.path())).unwrap();
        assert_eq!(a.samples().len(), b.samples().len());
        let err = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 32767.0 + 1e-12, "pcm16 quantisation error {err}");
    }
    assert!(matches!(write_manifest(&toy.records, Vec::new()), Err(CorpusError::InlineAudio(_))));
}

#[test]
fn class_mel_profiles_are_distinct_and_peak_near_the_fundamental() {
    let toy = synth_toy_corpus::<f64>(&ToyCorpusConfig { tracks_per_class: 1, ..small_toy(2) }).unwrap();
    let cfg = DspConfig::default();
    let bank = dsp::build_mel_filterbank::<f64>(&cfg).unwrap();
    let mut profiles = Vec::new();
    for r in &toy.records {
        let g = ToyCorpus::<f64>::class_of(r).unwrap();
        let mel = mel_spectrogram(&r.load_audio::<f64>(None).unwrap(), &cfg).unwrap();
        let profile = mel_profile(&mel);
        let peak = dsp::argmax(&profile);
        let f0 = toy.config.class_frequency(g);
        let dist: Vec<f64> = bank.center_freqs().iter().map(|c| -(c - f0).abs()).collect();
        let nearest = dsp::argmax(&dist);
        assert!(peak.abs_diff(nearest) <= 2, "class {g}: peak band {peak}, f0 band {nearest}");
        profiles.push(profile);
    }
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            let d = profiles[i].iter().zip(&profiles[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d > 1.0, "classes {i} and {j} too close: {d}");
        }
    }
}

#[test]
fn nearest_centroid_baseline_separates_seen_classes() {
    let toy = synth_toy_corpus::<f64>(&small_toy(3)).unwrap();
    let cfg = DspConfig::default();
    let profile = |r: &TrackRecord| {
        let mel = mel_spectrogram(&r.load_audio::<f64>(None).unwrap(), &cfg).unwrap();
        (mel_profile(&mel), ToyCorpus::<f64>::class_of(r).unwrap())
    };
    let train: Vec<_> = toy.split(Split::Train).map(profile).collect();
    let test: Vec<_> = toy
        .split(Split::Test)
        .filter(|r| ToyCorpus::<f64>::class_of(r).unwrap() < 10)
        .map(profile)
        .collect();
    let acc = nearest_centroid_accuracy(&train, &test);
    assert!(acc >= 0.9, "baseline accuracy {acc}");
}
