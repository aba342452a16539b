mod common;

use std::collections::BTreeMap;

use common::*;
use dola_core::decode::{
    apply_repetition_penalty, cd_generate, generate, next_token, replay_trace, CdPair, DecodeConfig,
    DecodeError, GenerationTrace, PenaltyScope, PenaltyStage, SelectionMode,
};
use dola_core::dola::{
    apc_mask, buckets_for, dola_step, layer_rng, CandidateBucket, ContrastConfig, DolaError,
};
use dola_core::model::{softmax, EarlyExitLogits};
use dola_core::synthetic::{random_model, toy_config};
use dola_core::tokenizer::{ByteTokenizer, Tokenizer};
use proptest::prelude::*;

fn prompt(text: &str) -> Vec<u32> {
    ByteTokenizer.encode(text).unwrap()
}

fn dynamic(layers: &[usize]) -> ContrastConfig {
    ContrastConfig::dynamic(CandidateBucket::explicit(layers.iter().copied(), 8, false).unwrap())
}

#[test]
fn greedy_generation_is_deterministic() {
    let model = toy();
    let p = prompt("Q: Where is the Eiffel tower?\nA:");
    for cfg in [ContrastConfig::vanilla(), dynamic(&[0, 2, 4, 6]), ContrastConfig::fixed_layer(4)] {
        let d = DecodeConfig::greedy(40);
        let a = generate(&model, &ByteTokenizer, &cfg, &d, &p).unwrap();
        let b = generate(&model, &ByteTokenizer, &cfg, &d, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 40);
        assert_eq!(a.trace.len(), 40);
    }
}

#[test]
fn singleton_dynamic_matches_static() {
    let model = toy();
    let p = prompt("The quick brown fox");
    let d = DecodeConfig::greedy(100);
    for layer in [0, 2, 4, 6] {
        let a = generate(&model, &ByteTokenizer, &dynamic(&[layer]), &d, &p).unwrap();
        let b = generate(&model, &ByteTokenizer, &ContrastConfig::fixed_layer(layer), &d, &p).unwrap();
        assert_eq!(a.tokens, b.tokens, "layer {layer}");
    }
}

#[test]
fn post_softmax_does_not_change_greedy_tokens() {
    let model = toy();
    let p = prompt("Once upon a time");
    let d = DecodeConfig::greedy(60);
    let on = generate(&model, &ByteTokenizer, &dynamic(&[0, 2, 4, 6]), &d, &p).unwrap();
    let off =
        generate(&model, &ByteTokenizer, &dynamic(&[0, 2, 4, 6]).with_post_softmax(false), &d, &p).unwrap();
    assert_eq!(on.tokens, off.tokens);
    assert_eq!(on.trace.premature_layers(), off.trace.premature_layers());
}

#[test]
fn selected_layers_stay_in_the_bucket() {
    let model = toy();
    for bucket in buckets_for(8, false) {
        let cfg = ContrastConfig::dynamic(bucket.clone());
        let out = generate(&model, &ByteTokenizer, &cfg, &DecodeConfig::greedy(50), &prompt("abc")).unwrap();
        for step in &out.trace.steps {
            let l = step.premature_layer.unwrap();
            assert!(bucket.contains(l));
            assert_eq!(step.jsd_by_layer.keys().copied().collect::<Vec<_>>(), bucket.layers);
            let (best, _) = step
                .jsd_by_layer
                .iter()
                .fold((usize::MAX, f64::NEG_INFINITY), |(bl, bv), (&l, &v)| if v > bv { (l, v) } else { (bl, bv) });
            assert_eq!(l, best);
        }
    }
}

#[test]
fn greedy_tokens_lie_in_the_plausible_head() {
    let model = toy();
    let d = DecodeConfig { record_logits: true, ..DecodeConfig::greedy(80) };
    let cfg = dynamic(&[0, 2, 4, 6]);
    let out = generate(&model, &ByteTokenizer, &cfg, &d, &prompt("Hello")).unwrap();
    for step in &out.trace.steps {
        let logits = step.exit_logits.as_ref().unwrap();
        let q = softmax(&logits[&8]).unwrap();
        let head = apc_mask(&q, 0.1);
        assert!(head.contains(&step.token));
        assert_eq!(head.len(), step.v_head_size);
    }
}

#[test]
fn trace_replay_reproduces_tokens_and_layers() {
    let model = toy();
    let p = prompt("Replay me");
    let bucket = CandidateBucket::explicit([0, 2, 4, 6], 8, false).unwrap();
    let cases = [
        (dynamic(&[0, 2, 4, 6]), DecodeConfig::greedy(30)),
        (ContrastConfig::random(bucket, 17), DecodeConfig::greedy(30)),
        (
            dynamic(&[2, 4]),
            DecodeConfig { penalty_stage: PenaltyStage::MatureLogits, ..DecodeConfig::greedy(30) },
        ),
        (
            dynamic(&[0, 2]),
            DecodeConfig { mode: SelectionMode::Sample, temperature: 0.8, seed: 5, ..DecodeConfig::greedy(30) },
        ),
    ];
    for (cfg, mut d) in cases {
        d.record_logits = true;
        let out = generate(&model, &ByteTokenizer, &cfg, &d, &p).unwrap();
        let replay = replay_trace(&out.trace, &p, &cfg, &d).unwrap();
        assert_eq!(replay.iter().map(|r| r.token).collect::<Vec<_>>(), out.tokens);
        assert_eq!(replay.iter().map(|r| r.premature_layer).collect::<Vec<_>>(), out.trace.premature_layers());
    }
}

#[test]
fn replay_needs_recorded_logits() {
    let model = toy();
    let p = prompt("x");
    let cfg = dynamic(&[0]);
    let d = DecodeConfig::greedy(3);
    let out = generate(&model, &ByteTokenizer, &cfg, &d, &p).unwrap();
    assert!(matches!(replay_trace(&out.trace, &p, &cfg, &d), Err(DecodeError::TraceWithoutLogits(0))));
}

#[test]
fn trace_jsonl_round_trip() {
    let model = toy();
    let d = DecodeConfig { record_logits: true, ..DecodeConfig::greedy(5) };
    let out = generate(&model, &ByteTokenizer, &dynamic(&[0, 4]), &d, &prompt("hi")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    out.trace.write_jsonl(&path).unwrap();
    assert_eq!(GenerationTrace::read_jsonl(&path).unwrap(), out.trace);
}

#[test]
fn random_layer_choice_is_uniform_and_seeded() {
    let bucket = CandidateBucket::explicit([0, 2, 4, 6], 8, false).unwrap();
    let cfg = ContrastConfig::random(bucket, 0);
    let logits: BTreeMap<usize, Vec<f64>> = [0, 2, 4, 6, 8]
        .into_iter()
        .map(|l| (l, (0..5).map(|i| ((i * (l + 1)) % 7) as f64 * 0.3).collect()))
        .collect();
    let exit = EarlyExitLogits::from_map(8, logits).unwrap();
    let draws = 8000;
    let mut rng = layer_rng(2024);
    let mut counts = BTreeMap::new();
    for _ in 0..draws {
        let l = dola_step(&exit, &cfg, &mut rng).unwrap().premature_layer.unwrap();
        *counts.entry(l).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 4);
    let expected = draws as f64 / 4.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-squared with 3 degrees of freedom.
    assert!(chi2 < 16.27, "chi2 = {chi2}, counts = {counts:?}");

    let model = toy();
    let p = prompt("seeded");
    let d = DecodeConfig::greedy(25);
    let b = CandidateBucket::explicit([0, 2, 4, 6], 8, false).unwrap();
    let run = |seed| {
        generate(&model, &ByteTokenizer, &ContrastConfig::random(b.clone(), seed), &d, &p).unwrap().trace.premature_layers()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let model = toy();
    let p = prompt("sample");
    let d = |seed| DecodeConfig { mode: SelectionMode::Sample, seed, ..DecodeConfig::greedy(30) };
    let cfg = dynamic(&[0, 2, 4, 6]);
    let a = generate(&model, &ByteTokenizer, &cfg, &d(1), &p).unwrap();
    let b = generate(&model, &ByteTokenizer, &cfg, &d(1), &p).unwrap();
    let c = generate(&model, &ByteTokenizer, &cfg, &d(2), &p).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_ne!(a.tokens, c.tokens);
}

#[test]
fn input_errors() {
    let model = random_model(small_config(2), 1).unwrap();
    let cfg = ContrastConfig::vanilla();
    assert!(matches!(
        generate(&model, &ByteTokenizer, &cfg, &DecodeConfig::greedy(5), &[]),
        Err(DecodeError::EmptyPrompt)
    ));
    assert!(matches!(
        generate(&model, &ByteTokenizer, &cfg, &DecodeConfig::greedy(60), &[1; 10]),
        Err(DecodeError::ContextOverflow { prompt: 10, new_tokens: 60, max: 64 })
    ));
    assert!(matches!(
        generate(&model, &ByteTokenizer, &ContrastConfig::fixed_layer(3), &DecodeConfig::greedy(5), &[1]),
        Err(DecodeError::Dola(_))
    ));
    assert!(matches!(
        generate(
            &model,
            &ByteTokenizer,
            &ContrastConfig::new(dola_core::dola::Strategy::Cd),
            &DecodeConfig::greedy(5),
            &[1]
        ),
        Err(DecodeError::Dola(DolaError::NeedsAmateur))
    ));
}

#[test]
fn stop_token_ends_generation_without_being_emitted() {
    let model = toy();
    let p = prompt("stop");
    let free = generate(&model, &ByteTokenizer, &ContrastConfig::vanilla(), &DecodeConfig::greedy(20), &p).unwrap();
    let stop = free.tokens[5];
    let first = free.tokens.iter().position(|&t| t == stop).unwrap();
    let d = DecodeConfig { stop_token_ids: vec![stop], ..DecodeConfig::greedy(20) };
    let out = generate(&model, &ByteTokenizer, &ContrastConfig::vanilla(), &d, &p).unwrap();
    assert_eq!(out.tokens, free.tokens[..first]);
    assert_eq!(out.trace.len(), first);
}

#[test]
fn stop_string_truncates_text_and_tokens() {
    let model = toy();
    let p = prompt("stop");
    let free = generate(&model, &ByteTokenizer, &ContrastConfig::vanilla(), &DecodeConfig::greedy(30), &p).unwrap();
    let needle = ByteTokenizer.decode(&free.tokens[10..12]);
    let at = free.text.find(&needle).unwrap();
    let d = DecodeConfig { stop_strings: vec![needle.clone()], ..DecodeConfig::greedy(30) };
    let out = generate(&model, &ByteTokenizer, &ContrastConfig::vanilla(), &d, &p).unwrap();
    assert_eq!(out.text, free.text[..at]);
    assert!(!out.text.contains(&needle));
    assert_eq!(out.tokens.len(), out.trace.len());
    assert_eq!(ByteTokenizer.decode(&out.tokens), out.text);
}

#[test]
fn penalty_scope_generated_only_ignores_the_prompt() {
    let model = toy();
    let p = prompt("aaaa");
    let cfg = ContrastConfig::vanilla();
    let high = |scope| DecodeConfig { penalty_scope: scope, ..DecodeConfig::greedy(1).with_penalty(50.0) };
    let none = generate(&model, &ByteTokenizer, &cfg, &DecodeConfig::greedy(1).with_penalty(1.0), &p).unwrap();
    let gen_only = generate(&model, &ByteTokenizer, &cfg, &high(PenaltyScope::GeneratedOnly), &p).unwrap();
    assert_eq!(none.tokens, gen_only.tokens);
}

#[test]
fn cd_requires_matching_vocabularies() {
    let expert = toy();
    let amateur = random_model(gpt2_like_config(2), 1).unwrap();
    assert!(CdPair::new(&expert, &ByteTokenizer, &amateur, &ByteTokenizer).is_ok());
    let mut cfg = toy_config();
    cfg.vocab_size = 300;
    let other = random_model(cfg, 1).unwrap();
    assert!(matches!(
        CdPair::new(&expert, &ByteTokenizer, &other, &ByteTokenizer),
        Err(DecodeError::VocabMismatch)
    ));
}

#[test]
fn cd_against_itself_picks_the_lowest_plausible_id() {
    let expert = toy();
    let pair = CdPair::new(&expert, &ByteTokenizer, &expert, &ByteTokenizer).unwrap();
    let p = prompt("self contrast");
    let d = DecodeConfig { record_logits: true, ..DecodeConfig::greedy(10).with_penalty(1.0) };
    let out = cd_generate(&pair, &ByteTokenizer, 0.1, &d, &p).unwrap();
    let mut ctx = p.clone();
    for &tok in &out.tokens {
        let mut c = expert.new_cache();
        let h = expert.forward_step(&mut c, &ctx).unwrap();
        let q = softmax(expert.early_exit_logits(&h, []).unwrap().mature()).unwrap();
        assert_eq!(tok, apc_mask(&q, 0.1)[0]);
        ctx.push(tok);
    }
}

#[test]
fn cd_differs_from_vanilla_with_a_distinct_amateur() {
    let expert = toy();
    let amateur = random_model(small_config(2), 99).unwrap();
    let pair = CdPair::new(&expert, &ByteTokenizer, &amateur, &ByteTokenizer).unwrap();
    let p = prompt("expert vs amateur");
    let d = DecodeConfig::greedy(40);
    let cd = cd_generate(&pair, &ByteTokenizer, 0.1, &d, &p).unwrap();
    let van = generate(&expert, &ByteTokenizer, &ContrastConfig::vanilla(), &d, &p).unwrap();
    assert_eq!(cd.tokens.len(), 40);
    assert_ne!(cd.tokens, van.tokens);
}

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-20.0..20.0f64, Just(0.0), Just(f64::NEG_INFINITY), Just(-1000.0)], 2..40)
}

proptest! {
    #[test]
    fn neutral_penalty_is_bit_exact_identity(s in scores_strategy(), ctx in prop::collection::vec(0u32..50, 0..30)) {
        let mut t = s.clone();
        apply_repetition_penalty(&mut t, &ctx, 1.0);
        prop_assert_eq!(
            t.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            s.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn penalty_only_lowers_seen_tokens(
        s in scores_strategy(),
        ctx in prop::collection::vec(0u32..50, 0..30),
        theta in 1.0..3.0f64,
    ) {
        let mut t = s.clone();
        apply_repetition_penalty(&mut t, &ctx, theta);
        for i in 0..s.len() {
            let seen = ctx.contains(&(i as u32));
            let masked = !s[i].is_finite() || s[i] == -1000.0;
            if !seen || masked {
                prop_assert_eq!(t[i].to_bits(), s[i].to_bits());
            } else if s[i] > 0.0 {
                prop_assert_eq!(t[i], s[i] / theta);
            } else {
                prop_assert_eq!(t[i], s[i] * theta);
            }
            prop_assert!(t[i] <= s[i]);
        }
    }

    #[test]
    fn stronger_penalty_never_raises_a_score(
        s in scores_strategy(),
        ctx in prop::collection::vec(0u32..50, 0..30),
        a in 1.0..3.0f64,
        b in 1.0..3.0f64,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (mut x, mut y) = (s.clone(), s.clone());
        apply_repetition_penalty(&mut x, &ctx, lo);
        apply_repetition_penalty(&mut y, &ctx, hi);
        for i in 0..s.len() {
            prop_assert!(y[i] <= x[i] || (x[i].is_nan() && y[i].is_nan()));
        }
    }

    #[test]
    fn greedy_picks_the_lowest_maximal_id(s in scores_strategy()) {
        prop_assume!(s.iter().any(|v| v.is_finite()));
        let tok = next_token(&s, &DecodeConfig::default(), &mut layer_rng(0)).unwrap() as usize;
        let max = s.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(s[tok], max);
        prop_assert!(s[..tok].iter().all(|&v| v < max));
    }
}
