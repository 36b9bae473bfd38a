//! Criterion benchmarks for the pseudolabel crate live in `benches/`.
