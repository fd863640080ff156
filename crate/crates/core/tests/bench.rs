use mixencoder::bench::corpus::{gen_synthetic, partner, CorpusTask, GenConfig, CONTRADICTION, ENTAILMENT};
use mixencoder::bench::cost::{cost_eval, CostInputs, CostKind};
use mixencoder::bench::metrics::{rank_of_first_positive, ranking_metrics};
use mixencoder::bench::{flop_count, flop_partition};
use mixencoder::encoder::{EncoderConfig, TokenSequence, Vocab};
use mixencoder::model::{Model, ModelConfig, ModelKind};
use mixencoder::numcore::Phase;
use mixencoder::Rng;

fn words(text: &str) -> Vec<&str> {
    text.split(' ').collect()
}

#[test]
fn every_positive_contains_the_query_key_and_no_negative_does() {
    let cfg = GenConfig {
        queries: 300,
        seed: 4,
        ..GenConfig::default()
    };
    let corpus = gen_synthetic(&cfg).unwrap();
    let vocab = Vocab::synthetic(cfg.vocab_size, cfg.kmax).unwrap();
    let key_id = |w: &str| vocab.id(w).unwrap() - vocab.first_word();
    let is_key = |w: &&str| (key_id(w) as usize) < cfg.keys;
    for r in &corpus.records {
        let q_keys: Vec<&str> = words(&r.query).into_iter().filter(is_key).collect();
        assert_eq!(q_keys.len(), 1, "query {}", r.query_id);
        assert_eq!(r.positive_ids.len(), 1);
        for c in &r.candidates {
            let has = words(&c.text).contains(&q_keys[0]);
            assert_eq!(has, r.positive_ids.contains(&c.id), "candidate {}", c.id);
        }
    }
}

#[test]
fn classification_labels_follow_the_key_rule() {
    let cfg = GenConfig {
        task: CorpusTask::Classification,
        queries: 300,
        seed: 5,
        ..GenConfig::default()
    };
    let corpus = gen_synthetic(&cfg).unwrap();
    let vocab = Vocab::synthetic(cfg.vocab_size, cfg.kmax).unwrap();
    let key_of = |text: &str| {
        words(text)
            .into_iter()
            .map(|w| (vocab.id(w).unwrap() - vocab.first_word()) as usize)
            .find(|&i| i < cfg.keys)
            .unwrap()
    };
    let mut seen = [0; 3];
    for r in &corpus.records {
        let qk = key_of(&r.query);
        let ck = key_of(&r.candidates[0].text);
        let label = r.label.unwrap();
        seen[label] += 1;
        let want = if ck == qk {
            ENTAILMENT
        } else if ck == partner(qk) {
            CONTRADICTION
        } else {
            1
        };
        assert_eq!(label, want);
    }
    assert!(seen.iter().all(|&n| n > 50));
}

#[test]
fn token_overlap_relevance_is_exact_rare_token_match() {
    let cfg = GenConfig {
        task: CorpusTask::TokenOverlap,
        queries: 100,
        seed: 6,
        ..GenConfig::default()
    };
    let corpus = gen_synthetic(&cfg).unwrap();
    let vocab = Vocab::synthetic(cfg.vocab_size, cfg.kmax).unwrap();
    let rare = |w: &&str| (vocab.id(w).unwrap() - vocab.first_word()) as usize >= cfg.common_words;
    for r in &corpus.records {
        let q: Vec<&str> = words(&r.query).into_iter().filter(rare).collect();
        assert_eq!(q.len(), 1);
        for c in &r.candidates {
            assert_eq!(words(&c.text).contains(&q[0]), r.positive_ids.contains(&c.id));
        }
    }
}

#[test]
fn generation_is_reproducible() {
    let cfg = GenConfig {
        queries: 50,
        seed: 7,
        ..GenConfig::default()
    };
    assert_eq!(
        gen_synthetic(&cfg).unwrap().to_jsonl().unwrap(),
        gen_synthetic(&cfg).unwrap().to_jsonl().unwrap()
    );
    let other = GenConfig { seed: 8, ..cfg.clone() };
    assert_ne!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&other).unwrap());
}

fn random_scores(rng: &mut Rng, queries: usize, n: usize) -> Vec<(Vec<(u64, f64)>, Vec<u64>)> {
    (0..queries)
        .map(|_| {
            let scores = (0..n as u64).map(|id| (id, rng.unit())).collect();
            (scores, vec![rng.below(n) as u64])
        })
        .collect()
}

#[test]
fn random_scorer_sits_at_chance() {
    let m = ranking_metrics(&random_scores(&mut Rng::seed(1), 5000, 10)).unwrap();
    assert!((m["r1"] - 0.1).abs() <= 0.01, "{m:?}");
    // Expected reciprocal rank of a uniform rank over 10 slots.
    let harmonic: f64 = (1..=10).map(|r| 1.0 / r as f64).sum::<f64>() / 10.0;
    assert!((harmonic - 0.2929).abs() < 1e-4);
    assert!((m["mrr"] - harmonic).abs() <= 0.02, "{m:?}");
}

#[test]
fn reversed_scorer_matches_brute_force_ranks() {
    let mut rng = Rng::seed(2);
    let queries: Vec<(Vec<(u64, f64)>, Vec<u64>)> = (0..200)
        .map(|_| {
            let pos = rng.below(10) as u64;
            // Higher ids score higher, so id `p` sits at rank 10 − p.
            let scores = (0..10u64).map(|id| (id, id as f64)).collect();
            (scores, vec![pos])
        })
        .collect();
    let m = ranking_metrics(&queries).unwrap();
    let want: f64 = queries.iter().map(|(_, p)| 1.0 / (10 - p[0]) as f64).sum::<f64>() / 200.0;
    assert!((m["mrr"] - want).abs() < 1e-12);
    assert_eq!(rank_of_first_positive(&[(5, 1.0), (2, 1.0), (9, 0.5)], &[5]), Some(2));
}

#[test]
fn cost_model_examples() {
    let i = |nc| CostInputs {
        h: 64,
        q: 8,
        d: 8,
        k: 1,
        nc,
    };
    assert_eq!(cost_eval(CostKind::Cross, i(10)).unwrap().online, 819_200);
    let big = cost_eval(
        CostKind::Mix,
        CostInputs {
            h: 768,
            q: 9,
            d: 9,
            k: 1,
            nc: 1000,
        },
    )
    .unwrap();
    assert_eq!(big.online, 768 * 81 + 768 * 768 * 9 + 1000 * (1 + 9 + 768) * 768);
    let diffs: Vec<u128> = (0..6)
        .map(|n| cost_eval(CostKind::Mix, i(n + 1)).unwrap().online - cost_eval(CostKind::Mix, i(n)).unwrap().online)
        .collect();
    assert!(diffs.iter().all(|&d| d == (1 + 8 + 64) * 64));
}

fn model(kind: ModelKind) -> Model<f32> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 100,
            d_model: 16,
            heads: 2,
            num_layers: 3,
            ffn_inner: 32,
            max_len: 32,
        },
        ..ModelConfig::new(kind)
    };
    Model::new(cfg, 1).unwrap()
}

fn texts(n: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = Rng::seed(seed);
    (0..n)
        .map(|_| TokenSequence::new((0..len).map(|_| 10 + rng.below(90) as u32).collect()))
        .collect()
}

#[test]
fn query_encoding_cost_is_independent_of_candidate_count() {
    for kind in [ModelKind::MixA, ModelKind::MixB, ModelKind::MixC, ModelKind::Dual] {
        let m = model(kind);
        let q = texts(1, 7, 1);
        let costs: Vec<u64> = [1, 10, 100]
            .iter()
            .map(|&n| flop_count(&m, &q, &texts(n, 5, 2)).unwrap().phase_macs(Phase::QueryEncoding))
            .collect();
        assert!(costs[0] > 0 && costs.iter().all(|&c| c == costs[0]), "{kind:?} {costs:?}");
    }
}

#[test]
fn cross_encoder_cost_is_exactly_linear() {
    let m = model(ModelKind::Cross);
    let q = texts(1, 7, 3);
    let one = flop_count(&m, &q, &texts(1, 5, 4)).unwrap().total_macs();
    let ten = flop_count(&m, &q, &texts(10, 5, 4)).unwrap().total_macs();
    assert_eq!(ten, 10 * one);
}

#[test]
fn mix_interaction_slope_matches_complexity_terms() {
    for kind in [ModelKind::MixA, ModelKind::MixC] {
        let m = model(kind);
        let q = texts(1, 7, 5);
        let (h, qlen) = (16u64, 8u64);
        let k = m.mix().unwrap().precomputer.strategy.k as u64;
        let layers = m.mix().unwrap().layers.len() as u64;
        let at = |n: usize| {
            let f = flop_count(&m, &q, &texts(n, 5, 6)).unwrap();
            f.attention_module_macs(Phase::CrossAttention) as f64
        };
        let (a, b) = (at(10), at(40));
        let slope = (b - a) / 30.0 / layers as f64;
        let want = ((k + qlen + h) * h * k) as f64;
        assert!((slope - want).abs() / want <= 0.2, "{kind:?}: slope {slope} vs {want}");
        let parts = flop_partition(&flop_count(&m, &q, &texts(3, 5, 7)).unwrap());
        assert!(parts["candidate-interaction"] > 0 && parts["other"] == 0, "{parts:?}");
    }
}
