//! Criterion benchmarks for trie construction, constrained beam search and
//! markup linking live under `benches/`.
