//! Criterion benchmarks for the runtime live in `benches/`.
