mod common;

use common::oracle::linear;
use common::weights::{self, randomize};
use common::{flatten, max_rel_err, to_mat};
use mixencoder::encoder::{Encoder, EncoderConfig, TokenSequence, FIRST_SPECIAL};
use mixencoder::model::{FrozenReps, Layout, Model, ModelConfig, ModelKind};
use mixencoder::numcore::{ParamStore, Session};
use mixencoder::precompute::{
    precompute_c, precompute_s, special_ids, CandidateCache, CandidateCacheEntry, ContextCodes, StrategyKind,
    CACHE_HEADER_BYTES,
};
use mixencoder::{Error, Graph, Rng, Tensor};

const KMAX: usize = 4;

fn enc_cfg(layers: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 40,
        d_model: 8,
        heads: 2,
        num_layers: layers,
        ffn_inner: 16,
        max_len: 16,
    }
}

fn setup(layers: usize, seed: u64) -> (ParamStore<f64>, Encoder, ContextCodes) {
    let mut rng = Rng::seed(seed);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &enc_cfg(layers), &mut rng).unwrap();
    let codes = ContextCodes::new(&mut store, "codes", 2, 8, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.4);
    (store, enc, codes)
}

fn cands() -> Vec<TokenSequence> {
    vec![TokenSequence::new(vec![10, 11, 12, 13]), TokenSequence::new(vec![20, 21])]
}

#[test]
fn s_strategy_is_a_slice_of_one_full_encode() {
    let (store, enc, _) = setup(2, 1);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let p = precompute_s(&s, &enc, &cands(), 2, KMAX).unwrap();
    let context = p.context.value();
    assert_eq!(context.shape(), &[2, 2, 8]);
    for (i, c) in cands().iter().enumerate() {
        let mut ids = special_ids(2, KMAX).unwrap();
        ids.extend_from_slice(c.ids());
        let full = enc.encode(&s, &[TokenSequence::new(ids)]).unwrap().hidden.value();
        assert_eq!(&context.data()[i * 16..(i + 1) * 16], &full.data()[..16]);
    }
    let state = p.state.value();
    for i in 0..2 {
        for j in 0..8 {
            let mean = (context.data()[i * 16 + j] + context.data()[i * 16 + 8 + j]) / 2.0;
            assert!((state.data()[i * 8 + j] - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn s_strategy_with_no_layers_ignores_candidate_content() {
    let (store, enc, _) = setup(0, 2);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let p = precompute_s(&s, &enc, &cands(), 1, KMAX).unwrap();
    let want = weights::embed(&store, &enc, &[FIRST_SPECIAL]);
    let got = to_mat(&p.context.value());
    assert_eq!(got[0], want[0]);
    assert_eq!(got[1], want[0]);
}

#[test]
fn s_strategy_distinguishes_candidates_and_rejects_overlength() {
    let (store, enc, _) = setup(2, 3);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let p = precompute_s(&s, &enc, &cands(), 1, KMAX).unwrap().context.value();
    assert_ne!(&p.data()[..8], &p.data()[8..]);
    let long = TokenSequence::new(vec![10; 15]);
    assert!(matches!(
        precompute_s(&s, &enc, &[long], 2, KMAX),
        Err(Error::Overlength { len: 17, max: 16 })
    ));
    assert!(precompute_s(&s, &enc, &cands(), 5, KMAX).is_err());
}

#[test]
fn c_strategy_matches_attention_oracle() {
    let (store, enc, codes) = setup(2, 4);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let p = precompute_c(&s, &enc, &codes, &cands()).unwrap();
    let got = to_mat(&p.context.value());
    let code_rows = to_mat(store.get(codes.codes));
    let w = weights::mha(&store, &codes.attention);
    for (i, c) in cands().iter().enumerate() {
        let y = weights::encode(&store, &enc, c.ids(), 2);
        let want = common::oracle::mha(&code_rows, &y, &w, None);
        let rows: Vec<f64> = got[i * 2..i * 2 + 2].iter().flatten().copied().collect();
        assert!(max_rel_err(&rows, &flatten(&want), 1.0) <= 1e-10);
    }
}

#[test]
fn c_strategy_single_token_and_uniform_attention() {
    let (mut store, enc, codes) = setup(1, 5);
    let single = [TokenSequence::new(vec![9])];
    let y_of = |store: &ParamStore<f64>, c: &TokenSequence| weights::encode(store, &enc, c.ids(), 1);
    {
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let got = to_mat(&precompute_c(&s, &enc, &codes, &single).unwrap().context.value());
        let w = weights::mha(&store, &codes.attention);
        let v = linear(&y_of(&store, &single[0]), &w.v.w, &w.v.b);
        let want = linear(&v, &w.o.w, &w.o.b);
        for row in &got {
            assert!(max_rel_err(row, &want[0], 1.0) < 1e-12);
        }
    }
    // Zero query projection and codes: every key scores equally.
    let q = codes.attention.query;
    store.set(q.weight, Tensor::zeros([8, 8])).unwrap();
    store.set(q.bias, Tensor::zeros([8])).unwrap();
    let c = &cands()[0];
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let got = to_mat(&precompute_c(&s, &enc, &codes, std::slice::from_ref(c)).unwrap().context.value());
    let w = weights::mha(&store, &codes.attention);
    let v = linear(&y_of(&store, c), &w.v.w, &w.v.b);
    let mean = common::oracle::mean_rows(&v);
    let want = linear(&vec![mean], &w.o.w, &w.o.b);
    assert!(max_rel_err(&got[0], &want[0], 1.0) < 1e-12);
}

#[test]
fn c_strategy_rejects_empty_candidates() {
    let (store, enc, codes) = setup(1, 6);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let empty = TokenSequence::with_mask(vec![0, 0], vec![false, false]).unwrap();
    assert!(precompute_c(&s, &enc, &codes, &[empty]).is_err());
}

fn entries(n: usize, k: usize, d: usize, seed: u64) -> Vec<CandidateCacheEntry<f32>> {
    let mut rng = Rng::seed(seed);
    (0..n)
        .map(|i| CandidateCacheEntry {
            id: (i as u64) * 7 + 3,
            context: Tensor::from_fn([k, d], |_| rng.normal(1.0)),
            state: Tensor::from_fn([d], |_| rng.normal(1.0)),
        })
        .collect()
}

#[test]
fn cache_round_trip_and_file_size() {
    let dir = tempfile::tempdir().unwrap();
    for (n, k, d) in [(100, 1, 16), (37, 2, 8), (5, 4, 64)] {
        let cache = CandidateCache::from_entries(StrategyKind::S, k, d, entries(n, k, d, n as u64)).unwrap();
        let path = dir.path().join(format!("c{n}.bin"));
        cache.save(&path).unwrap();
        let bytes = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(bytes, CACHE_HEADER_BYTES + n * (8 + 4 * (k * d + d)));
        assert_eq!(bytes, CandidateCache::<f32>::file_size(n, k, d, 4));
        let back = CandidateCache::<f32>::load(&path).unwrap();
        assert_eq!(back.len(), n);
        for (a, b) in cache.entries().iter().zip(back.entries()) {
            assert_eq!(a.id, b.id);
            assert!(a.context.bit_eq(&b.context) && a.state.bit_eq(&b.state));
        }
    }
}

#[test]
fn cache_rejects_corruption() {
    let cache = CandidateCache::from_entries(StrategyKind::C, 2, 4, entries(3, 2, 4, 1)).unwrap();
    let bytes = cache.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(CandidateCache::<f32>::from_bytes(&bad), Err(Error::CacheFormat(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(CandidateCache::<f32>::from_bytes(&bad), Err(Error::CacheFormat(_))));
    assert!(matches!(
        CandidateCache::<f32>::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::CacheFormat(_))
    ));
    assert!(matches!(CandidateCache::<f64>::from_bytes(&bytes), Err(Error::CacheFormat(_))));
    assert!(CandidateCache::<f32>::from_bytes(&bytes).is_ok());
}

#[test]
fn cache_rejects_bad_entries() {
    let mut dup = entries(3, 1, 4, 2);
    dup[1].id = dup[0].id;
    assert!(CandidateCache::from_entries(StrategyKind::S, 1, 4, dup).is_err());
    let mut nan = entries(2, 1, 4, 3);
    nan[0].state.data_mut()[1] = f32::NAN;
    assert!(CandidateCache::from_entries(StrategyKind::S, 1, 4, nan).is_err());
    assert!(CandidateCache::from_entries(StrategyKind::S, 2, 4, entries(2, 1, 4, 4)).is_err());
}

#[test]
fn lookup_follows_requested_order() {
    let cache = CandidateCache::from_entries(StrategyKind::S, 2, 4, entries(6, 2, 4, 5)).unwrap();
    let ids: Vec<u64> = cache.entries().iter().map(|e| e.id).collect();
    let order = [ids[4], ids[0], ids[5], ids[0]];
    let (context, state) = cache.lookup(&order).unwrap();
    assert_eq!(context.shape(), &[4, 2, 4]);
    for (row, id) in order.iter().enumerate() {
        let e = cache.get(*id).unwrap();
        assert_eq!(&context.data()[row * 8..(row + 1) * 8], e.context.data());
        assert_eq!(&state.data()[row * 4..(row + 1) * 4], e.state.data());
    }
    assert!(matches!(cache.lookup(&[1]), Err(Error::UnknownCandidate(1))));
}

fn model() -> Model<f32> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 60,
            d_model: 16,
            heads: 2,
            num_layers: 3,
            ffn_inner: 32,
            max_len: 24,
        },
        ..ModelConfig::new(ModelKind::MixC)
    };
    Model::new(cfg, 3).unwrap()
}

fn corpus() -> Vec<(u64, TokenSequence)> {
    let mut rng = Rng::seed(8);
    (0..9u64)
        .map(|i| (100 - i * 3, TokenSequence::new((0..3 + i as usize % 4).map(|_| 10 + rng.below(50) as u32).collect())))
        .collect()
}

#[test]
fn cached_scores_equal_inline_scores_and_cache_is_untouched() {
    let m = model();
    let items = corpus();
    let cache = m.build_cache(&items, 4).unwrap();
    let before = cache.checksum();
    let q = vec![TokenSequence::new(vec![12, 30, 44])];
    let ids: Vec<u64> = items.iter().map(|c| c.0).collect();
    let seqs: Vec<TokenSequence> = items.iter().map(|c| c.1.clone()).collect();

    let g = Graph::no_grad();
    let s = m.session(&g);
    let reps = m.cached_reps(&s, &cache, &ids).unwrap();
    let cached = m.score(&s, &q, &reps, Layout::Shared).unwrap().value();
    let g2 = Graph::no_grad();
    let s2 = m.session(&g2);
    let inline = m.score_candidates(&s2, &q, &seqs, Layout::Shared).unwrap().value();
    for (a, b) in cached.data().iter().zip(inline.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
    let frozen = FrozenReps::from_cache(&cache, &ids).unwrap();
    let (frozen_scores, _) = m.score_frozen(&q, &frozen, Layout::Shared, 4).unwrap();
    assert!(frozen_scores.bit_eq(&cached));
    assert_eq!(cache.checksum(), before);
}
