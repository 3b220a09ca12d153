//! Benchmarks for the segtrend search and test kernels live in `benches/`.
