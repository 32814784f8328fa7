//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lan_core::attention::LasaParams;
use lan_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor.
pub fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// A `[C, H, W]` feature map and LASA parameters for it.
pub fn lasa_case(c: usize, h: usize, w: usize) -> (Tensor<f32>, LasaParams<f32>) {
    let mut r = rng(1);
    let f = Tensor::randn(vec![c, h, w], 1.0, &mut r);
    let p = LasaParams::init(c, 4, false, &mut r).expect("positive channels");
    (f, p)
}
