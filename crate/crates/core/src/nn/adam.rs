//! Adam with bias correction.

use super::{NnError, ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ParamStore<R>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<R>, grads: &[Tensor<R>]) -> Result<(), NnError> {
        if grads.len() != params.len()
            || grads.iter().zip(params.tensors()).any(|(g, p)| g.shape() != p.shape())
        {
            return Err(NnError::ShapeMismatch("gradients do not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (R::from_f64(self.beta1), R::from_f64(self.beta2));
        let c1 = R::from_f64(1.0 - self.beta1.powi(t));
        let c2 = R::from_f64(1.0 - self.beta2.powi(t));
        let lr = R::from_f64(self.lr);
        let eps = R::from_f64(self.eps);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads[i].data);
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (R::ONE - b1) * g[j];
                v[j] = b2 * v[j] + (R::ONE - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_parameters_exactly_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f32>::new();
        ps.add("w", 3, 5, Init::Xavier, &mut rng);
        let before = ps.clone();
        let mut adam = AdamState::new(&ps, 1e-3);
        let zeros = ps.zeros_like();
        for _ in 0..10 {
            adam.update(&mut ps, &zeros).unwrap();
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn quadratic_converges_to_closed_form_minimizer() {
        // loss = (w - 2.5)^2, minimizer 2.5
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", 1, 1, Init::Zeros, &mut rng);
        let mut adam = AdamState::new(&ps, 1e-2);
        for _ in 0..1000 {
            let w = ps.get(id).data[0];
            let g = Tensor::from_vec(1, 1, vec![2.0 * (w - 2.5)]).unwrap();
            adam.update(&mut ps, &[g]).unwrap();
        }
        assert!((ps.get(id).data[0] - 2.5).abs() < 1e-3);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f32>::new();
        ps.add("w", 2, 2, Init::Zeros, &mut rng);
        let mut adam = AdamState::new(&ps, 1e-3);
        let bad = vec![Tensor::zeros(1, 2)];
        assert!(adam.update(&mut ps, &bad).is_err());
    }
}
