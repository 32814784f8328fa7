use rand::Rng;

use super::{Element, Tensor};

/// Fan-in scaled uniform initialization, `U(-sqrt(3/fan_in), sqrt(3/fan_in))`
/// (unit-gain Kaiming-uniform: weight variance `1/fan_in`).
pub fn kaiming_uniform<T: Element, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Kernel `[out, in, k, k]` and zero bias `[out]`.
pub fn conv_params<T: Element, R: Rng + ?Sized>(
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut R,
) -> (Tensor<T>, Tensor<T>) {
    (
        kaiming_uniform(vec![cout, cin, k, k], cin * k * k, rng),
        Tensor::zeros(vec![cout]),
    )
}

/// Weight `[out, in]` and zero bias `[out]`.
pub fn linear_params<T: Element, R: Rng + ?Sized>(dout: usize, din: usize, rng: &mut R) -> (Tensor<T>, Tensor<T>) {
    (kaiming_uniform(vec![dout, din], din, rng), Tensor::zeros(vec![dout]))
}
