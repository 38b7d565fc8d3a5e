//! Benchmarks for `ionctl-core`; see `benches/`.

pub use ionctl_core;
