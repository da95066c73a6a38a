use std::path::Path;
use std::process::{Command, Output};

fn tagspace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagspace")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_passes_and_reports_error() {
    let o = tagspace(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("max relative error")).expect("summary line");
    let value: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(value < 1e-4, "{line}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(tagspace(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tagspace(&[]).status.code(), Some(1));
    let o = tagspace(&[
        "annotate", "--checkpoint", "c.bin", "--word-vectors", "w.txt", "--tags", "t.txt", "--threshold", "1.5", "a.wav",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("threshold"));
    assert_eq!(tagspace(&["gradcheck", "--set", "train.nope=1"]).status.code(), Some(1));
    assert_eq!(tagspace(&["gradcheck", "--deterministic", "maybe"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.tsv");
    let o = tagspace(&[
        "train", "--manifest", missing.to_str().unwrap(), "--word-vectors", "w.txt", "--checkpoint", "c.bin",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expect: &[(&str, &[&str])] = &[
        ("synth", &["--out", "--seed", "--config", "--set"]),
        ("train", &["--manifest", "--word-vectors", "--tags", "--checkpoint", "--threads", "--deterministic"]),
        ("annotate", &["--checkpoint", "--word-vectors", "--tags", "--threshold", "--topk"]),
        ("retrieve", &["--manifest", "--query", "--topk", "--out"]),
        ("evaluate", &["--manifest", "--protocol", "--split", "--out"]),
        ("transfer", &["--manifest", "--protocol", "--tags"]),
        ("gradcheck", &["--seeds", "--seed"]),
    ];
    for (cmd, flags) in expect {
        let o = tagspace(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    assert_eq!(tagspace(&["--help"]).status.code(), Some(0));
}

const SMALL: &str = "\
# small run for tests
toy.tracks_per_class = 5
toy.duration_secs = 1.5
encoder.channels = 4,8
encoder.joint_dim = 16
train.epochs = 2
train.batch_size = 8
";

fn run_ok(args: &[&str]) -> Output {
    let o = tagspace(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn pipeline(root: &Path) -> (Vec<u8>, Vec<u8>, String) {
    let config = root.join("small.txt");
    std::fs::write(&config, SMALL).unwrap();
    let cfg = config.to_str().unwrap();
    let data = root.join("data");
    run_ok(&["synth", "--config", cfg, "--seed", "3", "--out", data.to_str().unwrap()]);
    let p = |f: &str| data.join(f).to_str().unwrap().to_string();
    let ckpt = root.join("model.bin");
    let train = run_ok(&[
        "train", "--config", cfg, "--seed", "3", "--manifest", &p("manifest.tsv"), "--word-vectors", &p("words.txt"),
        "--tags", &p("seen_tags.txt"), "--checkpoint", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(stdout(&train).lines().filter(|l| l.starts_with("epoch ")).count(), 2);
    let report = root.join("report.jsonl");
    run_ok(&[
        "evaluate", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--word-vectors", &p("words.txt"),
        "--manifest", &p("manifest.tsv"), "--out", report.to_str().unwrap(),
    ]);
    let transfer = run_ok(&[
        "transfer", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--word-vectors", &p("words.txt"),
        "--manifest", &p("unseen.tsv"), "--tags", &p("unseen_tags.txt"), "--protocol", "accuracy",
    ]);
    let header: serde_json::Value = serde_json::from_str(stdout(&transfer).lines().next().unwrap()).unwrap();
    assert_eq!(header["zero_target_supervision"], true);
    assert_eq!(header["n_tracks"], 10);
    let annotate = run_ok(&[
        "annotate", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--word-vectors", &p("words.txt"),
        "--tags", &p("all_tags.txt"), "--threshold", "-0.2", "--topk", "3", &p("audio/toy_00_000.wav"),
    ]);
    let text = stdout(&annotate);
    assert!(text.starts_with("# "), "config header");
    assert_eq!(text.lines().filter(|l| l.starts_with("  class_")).count(), 3);
    let retrieve = run_ok(&[
        "retrieve", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--word-vectors", &p("words.txt"),
        "--manifest", &p("manifest.tsv"), "--query", "class_10", "--topk", "4",
    ]);
    assert_eq!(stdout(&retrieve).lines().filter(|l| !l.starts_with('#')).count(), 4);
    (std::fs::read(&ckpt).unwrap(), std::fs::read(&report).unwrap(), std::fs::read_to_string(data.join("manifest.tsv")).unwrap())
}

#[test]
fn small_pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, ra, ma) = pipeline(a.path());
    let (cb, rb, mb) = pipeline(b.path());
    assert_eq!(ca, cb, "checkpoints identical");
    assert_eq!(ma, mb);
    let report = String::from_utf8(ra.clone()).unwrap();
    let header: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    assert_eq!(header["protocol"], "auc");
    assert_eq!(header["zero_target_supervision"], false);
    assert!(report.lines().last().unwrap().contains("aggregate"));
    // reports name the manifest path, which differs between the two roots
    let strip = |r: &[u8], root: &Path| String::from_utf8(r.to_vec()).unwrap().replace(root.to_str().unwrap(), "ROOT");
    assert_eq!(strip(&ra, a.path()), strip(&rb, b.path()));
}
