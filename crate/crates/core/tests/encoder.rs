mod common;

use common::weights::{self, randomize};
use common::{flatten, max_rel_err, to_mat};
use mixencoder::encoder::{Encoder, EncoderConfig, TokenSequence, Vocab, CLS, PAD, SEP};
use mixencoder::numcore::{ParamStore, Session};
use mixencoder::{Error, Graph, Rng, Tensor};
use proptest::prelude::*;

fn cfg(layers: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 30,
        d_model: 8,
        heads: 2,
        num_layers: layers,
        ffn_inner: 16,
        max_len: 12,
    }
}

fn setup(layers: usize, seed: u64) -> (ParamStore<f64>, Encoder) {
    let mut rng = Rng::seed(seed);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg(layers), &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.4);
    (store, enc)
}

#[test]
fn embedding_is_token_plus_position() {
    let (store, enc) = setup(0, 1);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let out = enc.embed(&s, &[TokenSequence::new(vec![3, 3, 7])]).unwrap();
    let got = to_mat(&out.hidden.value());
    let want = weights::embed(&store, &enc, &[3, 3, 7]);
    assert_eq!(got, want);
    // Same token at different positions differs only by the position rows.
    assert_ne!(got[0], got[1]);
}

#[test]
fn zero_layers_is_plain_embedding() {
    let (store, enc) = setup(0, 2);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let a = enc.encode(&s, &[TokenSequence::new(vec![4, 5])]).unwrap();
    let b = enc.embed(&s, &[TokenSequence::new(vec![4, 5])]).unwrap();
    assert!(a.hidden.value().bit_eq(&b.hidden.value()));
}

#[test]
fn encoder_matches_oracle_blocks() {
    let (store, enc) = setup(3, 3);
    let seqs = vec![TokenSequence::new(vec![1, 9, 4, 22, 17]), TokenSequence::new(vec![1, 8])];
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let out = enc.encode(&s, &seqs).unwrap();
    let got = to_mat(&out.hidden.value());
    for (b, seq) in seqs.iter().enumerate() {
        let want = weights::encode(&store, &enc, seq.ids(), 3);
        let rows: Vec<f64> = got[b * 5..b * 5 + seq.len()].iter().flatten().copied().collect();
        assert!(max_rel_err(&rows, &flatten(&want), 1.0) <= 1e-10);
    }
}

#[test]
fn zero_attention_and_ffn_outputs_make_layers_identity() {
    let (mut store, enc) = setup(2, 4);
    for layer in &enc.layers {
        for lin in [layer.attention.output, layer.ffn.down] {
            let (w, b) = (store.get(lin.weight).shape().to_vec(), store.get(lin.bias).shape().to_vec());
            store.set(lin.weight, Tensor::zeros(w)).unwrap();
            store.set(lin.bias, Tensor::zeros(b)).unwrap();
        }
    }
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let seq = [TokenSequence::new(vec![2, 6, 11])];
    let a = enc.encode(&s, &seq).unwrap();
    let b = enc.embed(&s, &seq).unwrap();
    assert!(a.hidden.value().bit_eq(&b.hidden.value()));
}

#[test]
fn overlength_and_out_of_vocab_are_rejected() {
    let (store, enc) = setup(1, 5);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let long = TokenSequence::new(vec![4; 13]);
    assert!(matches!(enc.encode(&s, &[long]), Err(Error::Overlength { len: 13, max: 12 })));
    let oov = TokenSequence::new(vec![4, 30]);
    assert!(matches!(enc.encode(&s, &[oov]), Err(Error::OutOfVocab { id: 30, .. })));
    assert!(enc.encode(&s, &[]).is_err());
}

#[test]
fn same_seed_gives_identical_parameters() {
    let build = |seed| {
        let mut store = ParamStore::<f32>::new();
        Encoder::new(&mut store, &cfg(2), &mut Rng::seed(seed)).unwrap();
        store.checksum()
    };
    assert_eq!(build(7), build(7));
    assert_ne!(build(7), build(8));
}

#[test]
fn framing_helpers() {
    let seq = TokenSequence::with_cls(&[5, 6]);
    assert_eq!(seq.ids(), &[CLS, 5, 6]);
    let pair = TokenSequence::pair(&[5], &[7, 8]);
    assert_eq!(pair.ids(), &[CLS, 5, SEP, 7, 8, SEP]);
    let padded = seq.padded(5).unwrap();
    assert_eq!(padded.ids(), &[CLS, 5, 6, PAD, PAD]);
    assert_eq!(padded.real_len(), 3);
    assert!(seq.padded(2).is_err());
}

#[test]
fn vocab_round_trips_through_tsv() {
    let v = Vocab::synthetic(25, 2).unwrap();
    let back = Vocab::from_tsv(&v.to_tsv()).unwrap();
    assert_eq!(v, back);
    let ids = v.tokenize("w0 w3 w3").unwrap();
    assert_eq!(v.detokenize(&ids), "w0 w3 w3");
    assert!(v.tokenize("nope").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padding_never_changes_real_rows(len in 1usize..6, extra in 1usize..5, seed in 0u64..1000) {
        let (store, enc) = setup(2, 11);
        let mut rng = Rng::seed(seed);
        let ids: Vec<u32> = (0..len).map(|_| 3 + rng.below(27) as u32).collect();
        let short = TokenSequence::new(ids.clone());
        let long = TokenSequence::new((0..len + extra).map(|_| 3 + rng.below(27) as u32).collect());
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let alone = enc.encode(&s, &[short.clone()]).unwrap().hidden.value();
        let batched = enc.encode(&s, &[short, long]).unwrap().hidden.value();
        let got: Vec<f64> = batched.data()[..len * 8].to_vec();
        prop_assert!(max_rel_err(&got, alone.data(), 1.0) <= 1e-12);
    }
}
