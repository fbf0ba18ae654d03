//! Criterion benchmarks for archlab; see `benches/`.
