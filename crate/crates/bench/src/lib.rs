//! Criterion benchmarks for the core kernels, the encoder, meta-learning
//! steps and metrics. Run with `cargo bench -p mskl-bench`.
