//! Hashed bag-of-n-grams features.
//!
//! The text seen by choice `i` is the token stream `question ++ choice_i ++
//! rationale_i`. Unigrams and bigrams of that stream are hashed into `[0, dim)`
//! with counts. Bigrams cross field boundaries, so the last question token
//! pairs with the first choice token.

use crate::data::Instance;
use fnv::FnvHasher;
use std::hash::Hasher;

/// Sparse vector as `(index, value)` pairs sorted by index, no duplicates.
pub type SparseVec = Vec<(u32, f64)>;

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn bucket(hasher: FnvHasher, dim: usize) -> u32 {
    (hasher.finish() & (dim as u64 - 1)) as u32
}

fn hash_unigram(tok: &str, seed: u64, dim: usize) -> u32 {
    let mut h = FnvHasher::with_key(seed);
    h.write(b"u\x00");
    h.write(tok.as_bytes());
    bucket(h, dim)
}

fn hash_bigram(a: &str, b: &str, seed: u64, dim: usize) -> u32 {
    let mut h = FnvHasher::with_key(seed);
    h.write(b"b\x00");
    h.write(a.as_bytes());
    h.write(&[0xff]);
    h.write(b.as_bytes());
    bucket(h, dim)
}

/// Features of choice `choice_index` of `instance`. `dim` must be a power of two.
pub fn featurize(instance: &Instance, choice_index: usize, hash_seed: u64, dim: usize) -> SparseVec {
    debug_assert!(dim.is_power_of_two());
    let tokens: Vec<String> = tokenize(&instance.question)
        .chain(tokenize(&instance.choices[choice_index]))
        .chain(tokenize(&instance.rationales[choice_index]))
        .collect();
    let mut idx: Vec<u32> = Vec::with_capacity(tokens.len() * 2);
    idx.extend(tokens.iter().map(|t| hash_unigram(t, hash_seed, dim)));
    idx.extend(
        tokens
            .windows(2)
            .map(|w| hash_bigram(&w[0], &w[1], hash_seed, dim)),
    );
    idx.sort_unstable();
    let mut out: SparseVec = Vec::with_capacity(idx.len());
    for i in idx {
        match out.last_mut() {
            Some((last, count)) if *last == i => *count += 1.0,
            _ => out.push((i, 1.0)),
        }
    }
    out
}

pub fn dot(weights: &[f64], x: &[(u32, f64)]) -> f64 {
    x.iter().fold(0.0, |acc, &(i, v)| acc + weights[i as usize] * v)
}
