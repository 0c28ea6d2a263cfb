//! Criterion benchmarks for `imda-core` live in `benches/`.
