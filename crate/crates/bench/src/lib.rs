//! Criterion benchmarks for the convolution and training kernels; see `benches/`.
