//! Criterion benchmarks for mim-core live under `benches/`.

use mim_core::Tensor;

/// Deterministic pseudo-random fill in `[-1, 1)`.
pub fn filled(shape: &[usize], salt: u64) -> Tensor {
    Tensor::from_fn(shape, |i| {
        let h = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
        (h as f32 / (1u64 << 23) as f32) - 1.0
    })
}
