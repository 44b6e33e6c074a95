use crate::nn::param::Param;
use crate::scalar::Scalar;

/// Adam with bias correction. Moment buffers are keyed by parameter order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param<T>>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::lit(self.lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        let eps = T::lit(self.eps);
        for (k, p) in params.into_iter().enumerate() {
            if self.m.len() <= k {
                self.m.push(vec![T::zero(); p.len()]);
                self.v.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Param::new(vec![1.0f64, -2.0]);
        p.grad = vec![0.3, -5.0];
        let mut opt = Adam::new(0.01);
        opt.step([&mut p]);
        assert!((p.value[0] - 0.99).abs() < 1e-9);
        assert!((p.value[1] - -1.99).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Param::new(vec![3.0f64]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.grad[0] = 2.0 * p.value[0];
            opt.step([&mut p]);
        }
        assert!(p.value[0].abs() < 1e-2);
    }
}
