use std::collections::HashSet;

use proptest::prelude::*;
use tagspace::words::{
    build_label_matrix, parse_word_vectors, project_tag, resolve_tag, write_word_vectors,
    ProjectionParams, ResolutionPolicy, ResolutionStatus, WordError, WordVectorTable,
};

fn table(entries: &[(&str, &[f64])]) -> WordVectorTable<f64> {
    let mut t = WordVectorTable::new(entries[0].1.len());
    for (tok, v) in entries {
        t.insert(tok, v).unwrap();
    }
    t
}

#[test]
fn allow_list_restricts_entries() {
    let text = "the 0.1 0.2\njazz 1 2\nrock 3 4\npiano 5 6\n";
    let allow: HashSet<String> = ["jazz", "piano"].iter().map(|s| s.to_string()).collect();
    let (t, stats) = parse_word_vectors::<f64, _>(text.as_bytes(), Some(&allow)).unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!(t.get("piano"), Some(&[5.0, 6.0][..]));
    assert!(t.get("the").is_none());
    assert_eq!(stats.filtered, 2);
}

#[test]
fn parse_errors() {
    assert!(matches!(parse_word_vectors::<f64, _>("".as_bytes(), None), Err(WordError::Empty)));
    assert!(matches!(
        parse_word_vectors::<f64, _>("a 1 2\nb 1\n".as_bytes(), None),
        Err(WordError::DimensionMismatch { line: 2, expected: 2, found: 1 })
    ));
    assert!(matches!(
        parse_word_vectors::<f64, _>("a 1 x\n".as_bytes(), None),
        Err(WordError::BadFloat { line: 1, .. })
    ));
    let (t, stats) = parse_word_vectors::<f64, _>("a 1\na 2\n".as_bytes(), None).unwrap();
    assert_eq!(t.get("a"), Some(&[1.0][..]));
    assert_eq!(stats.duplicates, 1);
}

#[test]
fn resolution_statuses() {
    let t = table(&[("jazz", &[1.0, 0.0]), ("hiphop", &[0.0, 1.0]), ("hip", &[1.0, 1.0]), ("hop", &[3.0, 1.0])]);
    let r = resolve_tag(&t, "Jazz", ResolutionPolicy::Strict);
    assert_eq!(r.status, ResolutionStatus::Exact);
    assert_eq!(r.vector.as_deref(), Some(&[1.0, 0.0][..]));
    assert_eq!(resolve_tag(&t, "hip hop", ResolutionPolicy::Strict).status, ResolutionStatus::Joined);
    let m = resolve_tag(&t, "qzxv", ResolutionPolicy::Averaging);
    assert_eq!(m.status, ResolutionStatus::Missing);
    assert!(m.vector.is_none());

    let t2 = table(&[("hip", &[1.0, 1.0]), ("hop", &[3.0, 1.0])]);
    assert_eq!(resolve_tag(&t2, "hip hop", ResolutionPolicy::Strict).status, ResolutionStatus::Missing);
    let avg = resolve_tag(&t2, "hip hop", ResolutionPolicy::Averaging);
    assert_eq!(avg.status, ResolutionStatus::Averaged);
    assert_eq!(avg.vector.unwrap(), [2.0, 1.0]);
}

#[test]
fn omission_semantics_on_a_mini_table() {
    let t = table(&[("rock", &[1.0, 0.0]), ("jazz", &[0.0, 1.0]), ("pop", &[1.0, 1.0])]);
    let all: Vec<String> = ["rock", "jazz", "pop"].iter().map(|s| s.to_string()).collect();
    let m = build_label_matrix(&t, &all, ResolutionPolicy::Strict).unwrap();
    assert_eq!((m.kept.len(), m.dropped.len()), (3, 0));

    let tags: Vec<String> = ["rock", "qzxv", "jazz", "female vocals", "pop"].iter().map(|s| s.to_string()).collect();
    let m = build_label_matrix(&t, &tags, ResolutionPolicy::Strict).unwrap();
    assert_eq!(m.tags().collect::<Vec<_>>(), ["rock", "jazz", "pop"]);
    assert_eq!(m.dropped, ["qzxv", "female vocals"]);
    assert!(build_label_matrix(&t, &["Rock".into(), "rock ".into()], ResolutionPolicy::Strict).is_err());
}

fn oracle_project(w: &[f64], b: &[f64], v: &[f64], d: usize, dd: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..d).map(|i| b[i] + (0..dd).map(|j| w[i * dd + j] * v[j]).sum::<f64>()).collect();
    let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    z.iter().map(|x| x / n).collect()
}

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn parse_serialize_parse_is_identity(
        rows in prop::collection::btree_map("[a-z]{1,8}", finite_vec(5), 1..20)
    ) {
        let mut t = WordVectorTable::<f64>::new(5);
        for (tok, v) in &rows {
            t.insert(tok, v).unwrap();
        }
        let mut buf = Vec::new();
        write_word_vectors(&t, &mut buf).unwrap();
        let (back, _) = parse_word_vectors::<f64, _>(buf.as_slice(), None).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (tok, v) in &rows {
            prop_assert_eq!(back.get(tok).unwrap(), v.as_slice());
        }
    }

    #[test]
    fn kept_plus_dropped_equals_input(
        tags in prop::collection::btree_set("[a-f]{1,3}", 1..30),
        vocab in prop::collection::btree_set("[a-f]{1,3}", 1..30),
    ) {
        let mut t = WordVectorTable::<f64>::new(2);
        for tok in &vocab {
            t.insert(tok, &[1.0, 0.5]).unwrap();
        }
        let tags: Vec<String> = tags.into_iter().collect();
        let m = build_label_matrix(&t, &tags, ResolutionPolicy::Strict).unwrap();
        prop_assert_eq!(m.kept.len() + m.dropped.len(), tags.len());
        for d in &m.dropped {
            prop_assert!(!vocab.contains(d));
        }
    }

    #[test]
    fn projection_matches_oracle_and_is_unit(
        w in finite_vec(12), b in finite_vec(4), v in finite_vec(3)
    ) {
        let params = ProjectionParams::new(w.clone(), b.clone(), 4, 3).unwrap();
        let z = params.affine(&v).unwrap();
        prop_assume!(z.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6);
        let p = project_tag(&v, &params).unwrap();
        let want = oracle_project(&w, &b, &v, 4, 3);
        for (a, e) in p.as_slice().iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-12);
        }
        prop_assert!((p.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn positive_scaling_is_absorbed(w in finite_vec(12), v in finite_vec(3), c in 0.01f64..100.0) {
        let params = ProjectionParams::new(w, vec![0.0; 4], 4, 3).unwrap();
        let z = params.affine(&v).unwrap();
        prop_assume!(z.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6);
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        let a = project_tag(&v, &params).unwrap();
        let b = project_tag(&scaled, &params).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
