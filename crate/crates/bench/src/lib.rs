//! Benchmark helpers (see `benches/`).
