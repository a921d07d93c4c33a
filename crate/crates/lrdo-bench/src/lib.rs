// SPDX-License-Identifier: Apache-2.0

//! Benchmarks for the numerical kernels of `lrdo-core` live in
//! `benches/kernels.rs`; run them with `cargo bench -p lrdo-bench`.
