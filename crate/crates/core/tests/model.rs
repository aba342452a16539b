mod common;

use std::time::Instant;

use common::*;
use dola_core::dola::jsd;
use dola_core::model::{
    load_model, load_model_bytes, softmax, ModelError, Tensor, WeightStore,
};
use dola_core::synthetic::{identity_model, random_model, toy_config};
use dola_core::Model;

#[test]
fn two_layer_model_round_trips_with_identical_checksums() {
    let model = random_model(small_config(2), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.bin");
    model.save(&path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.weights().len(), model.weights().len());
    for nt in model.weights().iter() {
        let name = &nt.name;
        assert_eq!(back.weights().get(name).unwrap().checksum(), nt.tensor.checksum(), "{name}");
    }
    assert_eq!(back.parameter_count(), model.parameter_count());
}

#[test]
fn f16_weights_round_trip_and_run() {
    let model = random_model(small_config(2), 3).unwrap();
    let mut store = WeightStore::new();
    for nt in model.weights().iter() {
        store.insert(nt.name.clone(), nt.tensor.clone().into_f16());
    }
    let half = Model::from_parts(model.config().clone(), store).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w16.bin");
    half.save(&path).unwrap();
    let back = load_model(&path).unwrap();
    for nt in half.weights().iter() {
        assert_eq!(back.weights().get(&nt.name).unwrap().checksum(), nt.tensor.checksum());
    }
    let mut cache = back.new_cache();
    let h = back.forward_step(&mut cache, &[1, 2, 3]).unwrap();
    assert_eq!(h.len(), 3);
}

#[test]
fn short_embedding_is_a_shape_mismatch() {
    let model = random_model(small_config(2), 3).unwrap();
    let mut store = model.weights().clone();
    let cfg = model.config();
    store.insert(
        "tok_embeddings.weight",
        Tensor::zeros(vec![cfg.vocab_size - 1, cfg.d_model]),
    );
    match Model::from_parts(cfg.clone(), store) {
        Err(ModelError::ShapeMismatch { name, expected, got }) => {
            assert_eq!(name, "tok_embeddings.weight");
            assert_eq!(expected, vec![cfg.vocab_size, cfg.d_model]);
            assert_eq!(got, vec![cfg.vocab_size - 1, cfg.d_model]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn missing_tensor_and_bad_magic_are_reported() {
    let model = random_model(small_config(2), 3).unwrap();
    let mut store = WeightStore::new();
    for nt in model.weights().iter().filter(|nt| nt.name != "layers.1.ffn.up.weight") {
        store.insert(nt.name.clone(), nt.tensor.clone());
    }
    assert!(matches!(
        Model::from_parts(model.config().clone(), store),
        Err(ModelError::MissingTensor(n)) if n == "layers.1.ffn.up.weight"
    ));
    assert!(matches!(load_model_bytes(b"NOTDOLA!rest"), Err(ModelError::BadMagic)));
}

#[test]
fn incremental_matches_full_context() {
    let model = toy();
    let tokens: Vec<u32> = "incremental decoding".bytes().map(u32::from).collect();
    let mut inc = model.new_cache();
    for (i, &t) in tokens.iter().enumerate() {
        let step = model.forward_step(&mut inc, &[t]).unwrap();
        let mut full_cache = model.new_cache();
        let full = model.forward_step(&mut full_cache, &tokens[..=i]).unwrap();
        for j in 0..=model.n_layers() {
            for (a, b) in step.tap(j).iter().zip(full.tap(j)) {
                assert!((a - b).abs() <= 1e-5, "pos {i} tap {j}");
            }
        }
    }
    assert_eq!(inc.len(), tokens.len());
}

#[test]
fn split_calls_equal_one_call() {
    let model = toy();
    let mut a = model.new_cache();
    model.forward_step(&mut a, &[10]).unwrap();
    let ha = model.forward_step(&mut a, &[20]).unwrap();
    let mut b = model.new_cache();
    let hb = model.forward_step(&mut b, &[10, 20]).unwrap();
    for j in 0..=model.n_layers() {
        for (x, y) in ha.tap(j).iter().zip(hb.tap(j)) {
            assert!((x - y).abs() <= 1e-5);
        }
    }
}

#[test]
fn hidden_state_count_is_n_plus_one() {
    for n in [1, 2, 5, 8] {
        let model = random_model(small_config(n), 1).unwrap();
        let mut c = model.new_cache();
        assert_eq!(model.forward_step(&mut c, &[65, 66]).unwrap().len(), n + 1);
    }
}

#[test]
fn single_token_forward_matches_f64_oracle() {
    for model in [toy(), random_model(gpt2_like_config(3), 11).unwrap()] {
        for token in [0u32, 65, 200] {
            let mut c = model.new_cache();
            let h = model.forward_step(&mut c, &[token]).unwrap();
            let oracle = oracle_single_token_taps(&model, token);
            for j in 0..=model.n_layers() {
                for (a, b) in h.tap(j).iter().zip(&oracle[j]) {
                    assert!((f64::from(*a) - b).abs() <= 1e-4 * (1.0 + b.abs()), "tap {j}");
                }
            }
            let ours = model.project(h.tap(model.n_layers()));
            let theirs = oracle_project(&model, &oracle[model.n_layers()]);
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() <= 1e-3 * (1.0 + b.abs()));
            }
        }
    }
}

#[test]
fn empty_tap_set_yields_only_mature_layer() {
    let model = toy();
    let mut c = model.new_cache();
    let h = model.forward_step(&mut c, &[1]).unwrap();
    let e = model.early_exit_logits(&h, []).unwrap();
    assert_eq!(e.layers().collect::<Vec<_>>(), vec![model.n_layers()]);
    assert_eq!(e.mature().len(), model.vocab_size());
}

#[test]
fn projection_is_pure() {
    let model = toy();
    let mut c = model.new_cache();
    let h = model.forward_step(&mut c, &[1, 2]).unwrap();
    let n = model.n_layers();
    let a = model.early_exit_logits(&h, [n]).unwrap();
    let b = model.early_exit_logits(&h, [n]).unwrap();
    assert_eq!(a.mature(), b.mature());
}

#[test]
fn out_of_range_tap_and_token_are_rejected() {
    let model = toy();
    let mut c = model.new_cache();
    let h = model.forward_step(&mut c, &[1]).unwrap();
    assert!(matches!(
        model.early_exit_logits(&h, [9]),
        Err(ModelError::TapOutOfRange { tap: 9, n_layers: 8 })
    ));
    assert!(matches!(
        model.forward_step(&mut c, &[258]),
        Err(ModelError::TokenOutOfRange { token: 258, vocab: 258 })
    ));
}

#[test]
fn context_overflow_is_an_error() {
    let model = random_model(small_config(2), 1).unwrap();
    let mut c = model.new_cache();
    let long = vec![1u32; 65];
    assert!(matches!(
        model.forward_step(&mut c, &long),
        Err(ModelError::ContextOverflow { needed: 65, max: 64 })
    ));
}

#[test]
fn identity_blocks_make_every_tap_identical() {
    let model = toy_identity();
    let mut c = model.new_cache();
    let h = model.forward_step(&mut c, &[72, 105, 33]).unwrap();
    let taps: Vec<usize> = (0..=model.n_layers()).collect();
    let e = model.early_exit_logits(&h, taps.clone()).unwrap();
    let q_n = softmax(e.mature()).unwrap();
    for &j in &taps {
        assert_eq!(e.get(j).unwrap(), e.mature());
        assert_eq!(jsd(&q_n, &softmax(e.get(j).unwrap()).unwrap()).unwrap(), 0.0);
    }
}

#[test]
fn tied_embeddings_reject_tap_zero() {
    let model = random_model(gpt2_like_config(4), 5).unwrap();
    assert!(!model.weights().contains("output.weight"));
    let mut c = model.new_cache();
    let h = model.forward_step(&mut c, &[3]).unwrap();
    assert!(matches!(model.early_exit_logits(&h, [0]), Err(ModelError::TiedEmbeddingTap)));
    assert_eq!(model.early_exit_logits(&h, [2]).unwrap().len(), 2);
}

#[test]
fn raw_projection_ablation_only_changes_premature_taps() {
    let mut cfg = toy_config();
    let normed = random_model(cfg.clone(), 9).unwrap();
    cfg.exit_norm = false;
    let raw = random_model(cfg, 9).unwrap();
    let (mut a, mut b) = (normed.new_cache(), raw.new_cache());
    let ha = normed.forward_step(&mut a, &[5, 6]).unwrap();
    let hb = raw.forward_step(&mut b, &[5, 6]).unwrap();
    let ea = normed.early_exit_logits(&ha, [2]).unwrap();
    let eb = raw.early_exit_logits(&hb, [2]).unwrap();
    assert_eq!(ea.mature(), eb.mature());
    assert_ne!(ea.get(2), eb.get(2));
}

#[test]
fn tap_projection_cost_grows_at_most_linearly() {
    let model = toy();
    let mut c = model.new_cache();
    let h = model.forward_step(&mut c, &[1, 2, 3]).unwrap();
    let time = |k: usize| {
        let taps: Vec<usize> = (0..k).collect();
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let start = Instant::now();
            for _ in 0..200 {
                std::hint::black_box(model.early_exit_logits(&h, taps.iter().copied()).unwrap());
            }
            best = best.min(start.elapsed().as_secs_f64());
        }
        best
    };
    // Each call also projects the mature layer, so k taps cost k + 1
    // projections. Allow 2x slack over the linear extrapolation for noise.
    let t1 = time(1);
    let t8 = time(8);
    let linear = t1 * 9.0 / 2.0;
    assert!(t8 <= 2.0 * linear, "t1={t1} t8={t8}");
}

#[test]
fn shared_model_across_threads_is_deterministic() {
    let model = identity_model(toy_config(), 2).unwrap();
    let model = &model;
    let outs: Vec<Vec<f64>> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4)
            .map(|_| {
                s.spawn(move || {
                    let mut c = model.new_cache();
                    let h = model.forward_step(&mut c, &[9, 8, 7]).unwrap();
                    model.early_exit_logits(&h, []).unwrap().mature().to_vec()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}
