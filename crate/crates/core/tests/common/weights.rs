//! Copies library parameters into the oracle's plain structures.

use mixencoder::encoder::{Encoder, TransformerLayer};
use mixencoder::numcore::{FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use mixencoder::{Rng, Scalar, Tensor};

use super::oracle::{self, BlockW, FfnW, LinearW, MhaW};
use super::{to_mat, to_vec64, Mat};

pub fn lin<T: Scalar>(store: &ParamStore<T>, l: &Linear) -> LinearW {
    LinearW {
        w: to_mat(store.get(l.weight)),
        b: to_vec64(store.get(l.bias)),
    }
}

pub fn ln<T: Scalar>(store: &ParamStore<T>, l: &LayerNorm) -> (Vec<f64>, Vec<f64>) {
    (to_vec64(store.get(l.gamma)), to_vec64(store.get(l.beta)))
}

pub fn ffn<T: Scalar>(store: &ParamStore<T>, f: &FeedForward) -> FfnW {
    FfnW {
        up: lin(store, &f.up),
        down: lin(store, &f.down),
    }
}

pub fn mha<T: Scalar>(store: &ParamStore<T>, a: &MultiHeadAttention) -> MhaW {
    MhaW {
        q: lin(store, &a.query),
        k: lin(store, &a.key),
        v: lin(store, &a.value),
        o: lin(store, &a.output),
        heads: a.heads,
    }
}

pub fn block<T: Scalar>(store: &ParamStore<T>, t: &TransformerLayer) -> BlockW {
    BlockW {
        ln1: ln(store, &t.ln_attention),
        att: mha(store, &t.attention),
        ln2: ln(store, &t.ln_ffn),
        ffn: ffn(store, &t.ffn),
    }
}

/// Replaces every parameter with `N(0, std²)` noise; layer-norm gains are
/// centred on one.
pub fn randomize<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.name(id).ends_with(".gamma");
        let shape = store.get(id).shape().to_vec();
        let t = Tensor::from_fn(shape, |_| {
            let x = rng.normal::<f64>(std);
            T::from_f64_lossy(if gain { 1.0 + x } else { x })
        });
        store.set(id, t).unwrap();
    }
}

/// Embedding rows of one unpadded sequence.
pub fn embed<T: Scalar>(store: &ParamStore<T>, enc: &Encoder, ids: &[u32]) -> Mat {
    let tok = to_mat(store.get(enc.token_embedding));
    let pos = to_mat(store.get(enc.position_embedding));
    ids.iter()
        .enumerate()
        .map(|(i, &id)| tok[id as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect()
}

/// Full encoder over one unpadded sequence, first `depth` layers.
pub fn encode<T: Scalar>(store: &ParamStore<T>, enc: &Encoder, ids: &[u32], depth: usize) -> Mat {
    let mut x = embed(store, enc, ids);
    for layer in &enc.layers[..depth] {
        x = oracle::block(&x, &block(store, layer), None);
    }
    x
}
