//! Criterion benchmarks for `isrflow`; see `benches/kernels.rs`.
