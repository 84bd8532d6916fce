//! Criterion benchmarks for the patch pipeline live in `benches/`.
