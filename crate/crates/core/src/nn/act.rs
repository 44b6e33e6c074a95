use serde::{Deserialize, Serialize};

use crate::nn::param::Param;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    PRelu,
    Relu,
}

/// PReLU with one shared slope per layer, or plain ReLU.
#[derive(Clone, Debug)]
pub struct Activation<T> {
    pub kind: ActivationKind,
    /// Negative-side slope; unused (and untrained) for ReLU.
    pub slope: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        let slope = match kind {
            ActivationKind::PRelu => Param::filled(1, T::lit(0.25)),
            ActivationKind::Relu => Param::new(Vec::new()),
        };
        Activation { kind, slope, cache: None }
    }

    #[inline]
    fn alpha(&self) -> T {
        match self.kind {
            ActivationKind::PRelu => self.slope.value[0],
            ActivationKind::Relu => T::zero(),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let a = self.alpha();
        let mut y = x.clone();
        for e in &mut y.data {
            if *e < T::zero() {
                *e *= a;
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("activation backward without forward");
        let a = self.alpha();
        let mut dx = dy.clone();
        let mut da = 0.0f64;
        for (d, &xv) in dx.data.iter_mut().zip(&x.data) {
            if xv < T::zero() {
                da += (*d * xv).as_f64();
                *d *= a;
            }
        }
        if self.kind == ActivationKind::PRelu {
            self.slope.grad[0] += T::lit(da);
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self.kind {
            ActivationKind::PRelu => vec![&self.slope],
            ActivationKind::Relu => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self.kind {
            ActivationKind::PRelu => vec![&mut self.slope],
            ActivationKind::Relu => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prelu_forward_and_slope_gradient() {
        let mut a = Activation::<f64>::new(ActivationKind::PRelu);
        let x = Tensor::from_vec(vec![-2.0, -1.0, 0.5, 3.0], 1, 1, [4, 1, 1]).unwrap();
        let y = a.forward(&x);
        assert_eq!(y.data, vec![-0.5, -0.25, 0.5, 3.0]);
        let dx = a.backward(&Tensor::from_vec(vec![1.0; 4], 1, 1, [4, 1, 1]).unwrap());
        assert_eq!(dx.data, vec![0.25, 0.25, 1.0, 1.0]);
        assert_eq!(a.slope.grad[0], -3.0);
    }

    #[test]
    fn relu_has_no_params() {
        let a = Activation::<f32>::new(ActivationKind::Relu);
        assert!(a.params().is_empty());
        let x = Tensor::from_vec(vec![-2.0, 1.0], 1, 1, [2, 1, 1]).unwrap();
        assert_eq!(a.infer(&x).data, vec![0.0, 1.0]);
    }
}
