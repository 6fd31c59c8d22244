//! Criterion benchmarks for the hot paths of the cop3d laboratory live in `benches/`.
