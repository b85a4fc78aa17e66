use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use multisum::corpus::vocab::Vocab;
use multisum::corpus::{Entity, Field, FieldValue, Review, TableData, TokenId};
use multisum::decoding::*;
use multisum::evaluation::gate_trace_for;
use multisum::image::RasterImage;
use multisum::pipeline::FusionOptions;
use multisum::seq_model::{Model, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EOS: TokenId = 2;
const RULES: TokenRules<'static> = TokenRules { eos: EOS, banned: &[0, 1] };

/// Pseudo-random log-probabilities that depend on the whole prefix.
struct HashStub {
    seed: u64,
    vocab: usize,
    eos_bias: f64,
}

impl Scorer for HashStub {
    fn log_probs(&mut self, prefix: &[TokenId]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let mut logits: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        logits[EOS as usize] += self.eos_bias * prefix.len() as f64;
        let z = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        logits.iter().map(|x| x - z).collect()
    }
}

/// Strongly prefers continuing the cycle 3 → 4 → 5 → 3.
struct CycleStub;

impl Scorer for CycleStub {
    fn log_probs(&mut self, prefix: &[TokenId]) -> Vec<f64> {
        let next = match prefix.last() {
            Some(&t) if (3..5).contains(&t) => t + 1,
            _ => 3,
        };
        let mut lp = vec![-8.0; 7];
        lp[next as usize] = -0.01;
        lp[6] = -3.0;
        lp[EOS as usize] = -9.0;
        lp
    }
}

fn cfg(beam: usize, max_len: usize) -> DecodeConfig {
    DecodeConfig { beam_size: beam, max_len, ..DecodeConfig::default() }
}

#[test]
fn beam_one_equals_greedy_on_stub_models() {
    for seed in 0..100 {
        let mut s = HashStub { seed, vocab: 7, eos_bias: 0.15 };
        let c = cfg(1, 30);
        let b = beam_search(&mut s, &c, &RULES);
        let g = greedy_decode(&mut s, &c, &RULES);
        assert_eq!(b.tokens, g.tokens, "seed {seed}");
        assert!((b.logprob - g.logprob).abs() < 1e-12);
    }
}

#[test]
fn cycling_model_never_repeats_a_trigram() {
    for beam in 1..=4 {
        let r = beam_search(&mut CycleStub, &cfg(beam, 40), &RULES);
        assert!(!has_repeated_trigram(&r.tokens), "{:?}", r.tokens);
        let g = greedy_decode(&mut CycleStub, &cfg(beam, 40), &RULES);
        assert!(!has_repeated_trigram(&g.tokens));
    }
}

/// The greedy first token leads into a poor continuation.
struct TrapStub;

impl Scorer for TrapStub {
    fn log_probs(&mut self, prefix: &[TokenId]) -> Vec<f64> {
        let mut lp = vec![f64::NEG_INFINITY; 6];
        match prefix {
            [] => {
                lp[3] = -0.4;
                lp[4] = -1.1;
                lp[5] = -2.5;
            }
            [3] => {
                lp[EOS as usize] = -3.0;
                lp[5] = -0.05;
            }
            [3, 5] => lp[EOS as usize] = -2.0,
            [4] => lp[EOS as usize] = -0.05,
            [5] => lp[EOS as usize] = -0.01,
            _ => lp[EOS as usize] = 0.0,
        }
        lp
    }
}

#[test]
fn best_score_is_monotone_in_beam_size() {
    let scores: Vec<f64> = (1..=5).map(|k| beam_search(&mut TrapStub, &cfg(k, 10), &RULES).score).collect();
    for w in scores.windows(2) {
        assert!(w[1] >= w[0], "{scores:?}");
    }
    assert!(scores[1] > scores[0]);
    assert_eq!(beam_search(&mut TrapStub, &cfg(2, 10), &RULES).tokens, vec![4, EOS]);
}

#[test]
fn longer_hypothesis_wins_under_the_length_penalty() {
    // Two fixed completions: 10 tokens at −10 total and 12 tokens at −10.5.
    struct Two;
    impl Scorer for Two {
        fn log_probs(&mut self, prefix: &[TokenId]) -> Vec<f64> {
            let mut lp = vec![f64::NEG_INFINITY; 5];
            match (prefix.first(), prefix.len()) {
                (None, _) => {
                    lp[3] = -10.0 / 9.0;
                    lp[4] = -10.5 / 11.0;
                }
                (Some(3), 9) | (Some(4), 11) => lp[EOS as usize] = 0.0,
                (Some(3), _) => lp[3] = -10.0 / 9.0,
                (Some(_), _) => lp[4] = -10.5 / 11.0,
            }
            lp
        }
    }
    let c = DecodeConfig { block_repeated_trigrams: false, ..cfg(2, 20) };
    let r = beam_search(&mut Two, &c, &RULES);
    assert_eq!(r.tokens.len(), 12);
    assert!((r.logprob + 10.5).abs() < 1e-9);
    assert!((r.score - (-10.5 / 12f64.powf(0.97))).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_respect_length_and_trigram_rules(seed in 0u64..10_000, beam in 1usize..5, max_len in 1usize..25, bias in 0.0f64..0.4) {
        let mut s = HashStub { seed, vocab: 6, eos_bias: bias };
        let r = beam_search(&mut s, &cfg(beam, max_len), &RULES);
        prop_assert!(r.tokens.len() <= max_len);
        prop_assert!(!has_repeated_trigram(&r.tokens));
        prop_assert!(r.tokens.iter().all(|t| !RULES.banned.contains(t)));
        prop_assert_eq!(r.finished, r.tokens.last() == Some(&EOS));
        if r.tokens.len() < max_len && !r.pruned_fallback {
            prop_assert!(r.finished);
        }
        let again = beam_search(&mut s, &cfg(beam, max_len), &RULES);
        prop_assert_eq!(again, r);
    }
}

fn micro_setup(seed: u64) -> (Model, Vocab, Entity) {
    let v = Vocab::build(["good", "food", "tacos", "."], ["thai"], 100);
    let cfg = ModelConfig::micro(v.len(), v.num_categories());
    let model = Model::new(&cfg, &v, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = RasterImage::new(3, 4, 4, (0..48).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let entity = Entity {
        id: "e1".into(),
        reviews: vec![
            Review { tokens: v.encode("good food ."), rating: 4.0 },
            Review { tokens: v.encode("tacos ."), rating: 2.0 },
            Review { tokens: v.encode("good tacos ."), rating: 5.0 },
        ],
        images: vec![img],
        table: TableData { fields: vec![Field { name: v.encode("food"), value: FieldValue::Binary(true) }] },
    };
    (model, v, entity)
}

fn randomize_gates(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["gate.w_alpha", "gate.w_beta"] {
        let id = model.store.id(name).unwrap();
        let (r, c) = model.store.get(id).shape();
        *model.store.get_mut(id) = multisum::params::normal_init(&mut rng, r, c, 2.0);
    }
}

#[test]
fn generation_is_deterministic_and_within_model_length() {
    let (model, v, e) = micro_setup(3);
    let c = Preset::Yelp.config();
    let a = generate_summary(&model, &v, &e, &c, FusionOptions::default()).unwrap();
    let b = generate_summary(&model, &v, &e, &c, FusionOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tokens, b.tokens);
    assert!(a.tokens.len() < model.config().max_len);
    assert!(!has_repeated_trigram(&a.tokens));
}

#[test]
fn entities_without_images_or_table_decode_with_zero_gates() {
    let (mut model, v, e) = micro_setup(4);
    randomize_gates(&mut model, 9);
    let c = Preset::Amazon.config();
    let bare = Entity { images: vec![], table: TableData::default(), ..e.clone() };
    let s = generate_summary(&model, &v, &bare, &c, FusionOptions::default()).unwrap();
    let trace = gate_trace_for(&model, &entity_inputs(&bare, FusionOptions::default()), &s.tokens, 0.0).unwrap();
    assert!(trace.alpha.iter().chain(&trace.beta).all(|&x| x == 0.0));

    let full = gate_trace_for(&model, &entity_inputs(&e, FusionOptions::default()), &s.tokens, 0.0).unwrap();
    assert!(full.alpha.iter().chain(&full.beta).any(|&x| x > 0.0));
    assert!(full.alpha.iter().chain(&full.beta).all(|&x| (0.0..1.0).contains(&x)));
}

#[test]
fn empty_review_set_is_rejected() {
    let (model, v, e) = micro_setup(5);
    let empty = Entity { reviews: vec![], ..e };
    assert!(generate_summary(&model, &v, &empty, &DecodeConfig::default(), FusionOptions::default()).is_err());
}
