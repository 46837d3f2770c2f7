//! Criterion benchmarks for the renderer and the generator network; see
//! `benches/`. Strategy comparisons with image error live in
//! `sdf3d_core::bench` and the `sdf3d bench` command.
