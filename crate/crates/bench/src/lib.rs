//! Criterion benchmarks for mdepth kernels live in `benches/`.
