//! Benchmarks for the fedplt engine live in `benches/`.
