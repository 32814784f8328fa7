use indexmap::IndexMap;

use super::{Element, Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction. Defaults follow the usual
/// `beta1 = 0.9, beta2 = 0.999, eps = 1e-8`.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let named: Vec<(String, Tensor<T>)> = grads.params().map(|(n, g)| (n.to_string(), g.clone())).collect();
        self.step_with(params, named.iter().map(|(n, g)| (n.as_str(), g)))
    }

    pub fn step_with<'a>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    ) -> Result<()>
    where
        T: 'a,
    {
        let grads: Vec<_> = grads.into_iter().collect();
        for (name, g) in &grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step_size = T::from_f64(self.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.eps);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(1.5);
        let mut adam = Adam::new(0.1);
        let g = Tensor::scalar(0.0);
        adam.step_with(&mut s, [("p", &g)]).unwrap();
        assert_eq!(s.get("p").unwrap().item(), 1.5);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for grad in [3.0, -0.02] {
            let mut s = store(0.0);
            let mut adam = Adam::new(0.01);
            adam.step_with(&mut s, [("p", &Tensor::scalar(grad))]).unwrap();
            let moved = s.get("p").unwrap().item();
            assert!((moved + 0.01 * f64::signum(grad)).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn minimises_square() {
        let mut s = store(1.0);
        let mut adam = Adam::new(0.1);
        for _ in 0..100 {
            let p = s.get("p").unwrap().item();
            adam.step_with(&mut s, [("p", &Tensor::scalar(2.0 * p))]).unwrap();
        }
        assert!(s.get("p").unwrap().item().abs() < 0.1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = store(1.0);
        let mut adam = Adam::new(0.1);
        let g = Tensor::zeros(vec![2]);
        assert!(adam.step_with(&mut s, [("p", &g)]).is_err());
        assert_eq!(adam.steps(), 0);
    }
}
