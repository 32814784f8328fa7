//! Central finite differences, used as an independent oracle for `backward`.

use super::{Element, Tensor};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad<T: Element>(mut f: impl FnMut(&Tensor<T>) -> f64, x: &Tensor<T>, h: f64) -> Tensor<T> {
    let all: Vec<usize> = (0..x.numel()).collect();
    let vals = finite_diff_at(&mut f, x, &all, h);
    Tensor::new(x.shape().to_vec(), vals.into_iter().map(T::from_f64).collect()).expect("same shape")
}

/// Central differences at selected flat indices only.
pub fn finite_diff_at<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    indices: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = T::from_f64(orig.to_f64() + h);
            let up = f(&probe);
            probe.data_mut()[i] = T::from_f64(orig.to_f64() - h);
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative-error comparison with an absolute floor for tiny gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradTolerance {
    pub rel: f64,
    /// Below this analytic magnitude the comparison is absolute.
    pub abs_floor: f64,
}

impl Default for GradTolerance {
    fn default() -> Self {
        Self {
            rel: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    /// Worst relative error among elements compared relatively.
    pub max_rel_err: f64,
    /// Worst absolute error among elements compared absolutely.
    pub max_abs_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn record(&mut self, analytic: f64, numeric: f64, tol: GradTolerance) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let ok = if analytic.abs() < tol.abs_floor {
            self.max_abs_err = self.max_abs_err.max(diff);
            diff < tol.abs_floor
        } else {
            let rel = diff / analytic.abs();
            self.max_rel_err = self.max_rel_err.max(rel);
            rel < tol.rel
        };
        if !ok {
            self.failures += 1;
        }
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
    }
}

/// Compares an analytic gradient with central differences at `indices`.
pub fn compare<T: Element>(
    f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    indices: &[usize],
    h: f64,
    tol: GradTolerance,
) -> GradCheck {
    let numeric = finite_diff_at(f, x, indices, h);
    let mut report = GradCheck::default();
    for (&i, n) in indices.iter().zip(numeric) {
        report.record(analytic.data()[i].to_f64(), n, tol);
    }
    report
}
