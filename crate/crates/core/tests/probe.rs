mod common;

use common::*;
use dola_core::decode::{generate, DecodeConfig};
use dola_core::dola::{CandidateBucket, ContrastConfig};
use dola_core::probe::{
    critical_layer_histogram, default_taps, jsd_matrix, AnnotatedItem, CorpusItem, HistogramOptions, JsdMatrix,
    ProbeError, JSD_SCALE,
};
use dola_core::synthetic::random_model;
use dola_core::tokenizer::{ByteTokenizer, Tokenizer};

fn enc(s: &str) -> Vec<u32> {
    ByteTokenizer.encode(s).unwrap()
}

#[test]
fn identity_model_gives_an_all_zero_matrix() {
    let model = toy_identity();
    let m = jsd_matrix(&model, &ByteTokenizer, &enc("Q: "), &enc("Paris is nice"), &default_taps(&model)).unwrap();
    assert_eq!(m.shape(), (4, 13));
    assert!(m.values.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn matrix_shape_bounds_and_labels() {
    let model = toy();
    let targets = enc("The capital");
    for taps in [vec![0], vec![0, 2, 4, 6], vec![2, 6, 8]] {
        let m = jsd_matrix(&model, &ByteTokenizer, &enc("Q:"), &targets, &taps).unwrap();
        let rows: Vec<usize> = taps.iter().copied().filter(|&t| t != 8).collect();
        assert_eq!(m.taps, rows);
        assert_eq!(m.shape(), (rows.len(), targets.len()));
        assert_eq!(m.labels[0], "T");
        for &v in m.values.iter().flatten() {
            assert!((0.0..=std::f64::consts::LN_2 * JSD_SCALE).contains(&v));
        }
    }
}

#[test]
fn odd_and_empty_tap_sets_are_rejected() {
    let model = toy();
    assert!(matches!(
        jsd_matrix(&model, &ByteTokenizer, &enc("a"), &enc("b"), &[3]),
        Err(ProbeError::OddTap(3))
    ));
    assert!(matches!(jsd_matrix(&model, &ByteTokenizer, &enc("a"), &enc("b"), &[8]), Err(ProbeError::NoTaps)));
    let tied = random_model(gpt2_like_config(4), 1).unwrap();
    assert!(jsd_matrix(&tied, &ByteTokenizer, &enc("a"), &enc("b"), &[0]).is_err());
    assert_eq!(default_taps(&tied), vec![2]);
}

#[test]
fn matrix_over_a_generation_equals_the_trace() {
    let model = toy();
    let prompt = enc("Q: Name a city.\nA:");
    let taps = vec![0, 2, 4, 6];
    let cfg = ContrastConfig::dynamic(CandidateBucket::explicit(taps.clone(), 8, false).unwrap());
    let out = generate(&model, &ByteTokenizer, &cfg, &DecodeConfig::greedy(30), &prompt).unwrap();
    let probe = jsd_matrix(&model, &ByteTokenizer, &prompt, &out.tokens, &taps).unwrap();
    let labels = out.tokens.iter().map(|&t| ByteTokenizer.token_label(t)).collect();
    let from_trace = JsdMatrix::from_trace(&out.trace, &taps, labels).unwrap();
    assert_eq!(probe, from_trace);
}

#[test]
fn csv_layout() {
    let model = toy();
    let m = jsd_matrix(&model, &ByteTokenizer, &enc("x"), &enc("ab"), &[0, 4]).unwrap();
    let mut out = Vec::new();
    m.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "layer,a,b");
    assert!(lines[1].starts_with("0,"));
    assert!(lines[2].starts_with("4,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn single_token_corpus_gives_one_count() {
    let model = toy();
    let corpus = vec![AnnotatedItem { tokens: vec![80], is_entity: vec![true] }];
    let h = critical_layer_histogram(&model, &ByteTokenizer, &corpus, &default_taps(&model), HistogramOptions::default())
        .unwrap();
    assert_eq!(h.entity_total, 1);
    assert_eq!(h.nonentity_total, 0);
    let hits: Vec<_> = h.rows.iter().filter(|r| r.entity_count == 1).collect();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].entity_pct, 100.0);
    assert!(h.rows.iter().all(|r| r.nonentity_pct == 0.0));
}

#[test]
fn histogram_columns_sum_to_one_hundred() {
    let model = toy();
    let spans = r#"{"spans":[{"text":"The capital of ","is_entity":false},{"text":"France","is_entity":true},{"text":" is ","is_entity":false},{"text":"Paris","is_entity":true}]}"#;
    let item: CorpusItem = serde_json::from_str(spans).unwrap();
    let tokens: CorpusItem = serde_json::from_str(r#"{"tokens":[72,105,33],"is_entity":[true,false,false]}"#).unwrap();
    let corpus = vec![item.resolve(&ByteTokenizer).unwrap(), tokens.resolve(&ByteTokenizer).unwrap()];
    assert_eq!(corpus[0].tokens.len(), 30);
    assert_eq!(corpus[0].is_entity.iter().filter(|&&e| e).count(), 11);
    let opts = HistogramOptions { workers: 2, ..Default::default() };
    let h = critical_layer_histogram(&model, &ByteTokenizer, &corpus, &[0, 2, 4, 6], opts).unwrap();
    assert_eq!(h.entity_total + h.nonentity_total, 33);
    assert_eq!(h.entity_total, 12);
    let e: f64 = h.rows.iter().map(|r| r.entity_pct).sum();
    let n: f64 = h.rows.iter().map(|r| r.nonentity_pct).sum();
    assert!((e - 100.0).abs() < 0.01 && (n - 100.0).abs() < 0.01);
    assert_eq!(h.rows.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![0, 2, 4, 6]);

    let no_bos = HistogramOptions { prepend_bos: false, workers: 0 };
    let h2 = critical_layer_histogram(&model, &ByteTokenizer, &corpus, &[0, 2, 4, 6], no_bos).unwrap();
    assert_eq!(h2.entity_total + h2.nonentity_total, 31);

    let mut out = Vec::new();
    h.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next(), Some("layer,entity_pct,nonentity_pct"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn misaligned_annotations_are_rejected() {
    let model = toy();
    let corpus = vec![
        AnnotatedItem { tokens: vec![1, 2], is_entity: vec![false, true] },
        AnnotatedItem { tokens: vec![1, 2, 3], is_entity: vec![false] },
    ];
    assert!(matches!(
        critical_layer_histogram(&model, &ByteTokenizer, &corpus, &[0], HistogramOptions::default()),
        Err(ProbeError::MisalignedAnnotations { item: 1, tokens: 3, flags: 1 })
    ));
}
