#![allow(dead_code)]

use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trie_decode_core::{
    train_table_scorer, Catalog, EntityTrie, Scorer, TableScorer, TokenId, Vocabulary,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Vocabulary of `n` ordinary words `t0 .. t{n-1}`.
pub fn word_vocab(n: usize) -> Vocabulary {
    Vocabulary::new((0..n).map(|i| format!("t{i}"))).unwrap()
}

pub fn random_names(
    rng: &mut impl Rng,
    words: usize,
    max_names: usize,
    max_len: usize,
) -> Vec<String> {
    let target = rng.gen_range(1..=max_names);
    let mut names = BTreeSet::new();
    for _ in 0..target * 4 {
        if names.len() == target {
            break;
        }
        let len = rng.gen_range(1..=max_len);
        let name: Vec<String> = (0..len)
            .map(|_| format!("t{}", rng.gen_range(0..words)))
            .collect();
        names.insert(name.join(" "));
    }
    let mut names: Vec<String> = names.into_iter().collect();
    names.shuffle(rng);
    names
}

pub fn catalog_of(names: &[String], vocab: &Vocabulary) -> (Catalog, EntityTrie) {
    let (catalog, report) = Catalog::load(&names.join("\n"), vocab).unwrap();
    assert_eq!(report.duplicates, 0);
    let trie = catalog.build_trie().unwrap();
    (catalog, trie)
}

pub fn random_input(rng: &mut impl Rng, vocab: &Vocabulary, max_len: usize) -> Vec<TokenId> {
    let ordinary = vocab.len() - 2 - trie_decode_core::vocab::NUM_LEADING_SPECIALS;
    let len = rng.gen_range(1..=max_len);
    (0..len)
        .map(|_| {
            TokenId(
                (trie_decode_core::vocab::NUM_LEADING_SPECIALS + rng.gen_range(0..ordinary)) as u32,
            )
        })
        .collect()
}

/// A table scorer trained on a random mix of catalog names and noise.
pub fn random_table_scorer(
    rng: &mut impl Rng,
    vocab: &Vocabulary,
    catalog: &Catalog,
) -> TableScorer {
    let names: Vec<&str> = catalog.names().collect();
    let mut pairs = Vec::new();
    for _ in 0..rng.gen_range(5..40) {
        let input = random_input(rng, vocab, 6);
        let mut target: Vec<TokenId> = if rng.gen_bool(0.7) {
            catalog
                .tokens(names[rng.gen_range(0..names.len())])
                .unwrap()
                .to_vec()
        } else {
            random_input(rng, vocab, 5)
        };
        target.push(TokenId::EOS);
        pairs.push((input, target));
    }
    let alpha = rng.gen_range(0.01..2.0);
    let buckets = rng.gen_range(1..=4);
    train_table_scorer(&pairs, alpha, vocab.len(), buckets).unwrap()
}

/// Deterministic pseudo-random distributions keyed on `(seed, input, prefix)`.
pub struct NoiseScorer {
    pub vocab_size: usize,
    pub seed: u64,
    pub spread: f64,
}

impl Scorer for NoiseScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (self.seed, input, prefix).hash(&mut h);
        let mut r = ChaCha8Rng::seed_from_u64(h.finish());
        let logits: Vec<f64> = (0..self.vocab_size)
            .map(|_| r.gen_range(-self.spread..self.spread))
            .collect();
        let z = trie_decode_core::scorer::logsumexp(&logits);
        logits.into_iter().map(|x| x - z).collect()
    }
}
