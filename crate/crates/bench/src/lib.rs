//! Criterion benchmarks for the sparse, evolution and recurrence kernels;
//! run with `cargo bench -p cpmr-bench`.
