use crate::nn::param::Param;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

const MOMENTUM: f64 = 0.1;
const EPS: f64 = 1e-5;

/// Per-channel batch normalisation over the batch and all voxels.
///
/// Training uses batch statistics and updates running estimates (unbiased
/// variance); inference uses the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm3d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: Param::filled(channels, T::one()),
            beta: Param::filled(channels, T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let v = x.voxels();
        let mut y = x.clone();
        for i in 0..x.n {
            let s = y.sample_mut(i);
            for c in 0..x.c {
                let inv = T::one() / (self.running_var[c] + T::lit(EPS)).sqrt();
                let scale = self.gamma.value[c] * inv;
                let shift = self.beta.value[c] - self.running_mean[c] * scale;
                for e in &mut s[c * v..(c + 1) * v] {
                    *e = *e * scale + shift;
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let v = x.voxels();
        let m = (x.n * v) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.c);
        for c in 0..x.c {
            let (mut sum, mut sq) = (0.0f64, 0.0f64);
            for i in 0..x.n {
                for &e in &x.sample(i)[c * v..(c + 1) * v] {
                    let e = e.as_f64();
                    sum += e;
                    sq += e * e;
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std.push(T::lit(inv));
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean[c] = T::lit((1.0 - MOMENTUM) * self.running_mean[c].as_f64() + MOMENTUM * mean);
            self.running_var[c] = T::lit((1.0 - MOMENTUM) * self.running_var[c].as_f64() + MOMENTUM * unbiased);
            let (mean_t, inv_t) = (T::lit(mean), T::lit(inv));
            for i in 0..x.n {
                for e in &mut xhat.sample_mut(i)[c * v..(c + 1) * v] {
                    *e = (*e - mean_t) * inv_t;
                }
            }
        }
        let mut y = xhat.clone();
        for i in 0..x.n {
            let s = y.sample_mut(i);
            for c in 0..x.c {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for e in &mut s[c * v..(c + 1) * v] {
                    *e = *e * g + b;
                }
            }
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without forward");
        let v = dy.voxels();
        let m = (dy.n * v) as f64;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.dims);
        for c in 0..dy.c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for i in 0..dy.n {
                let d = &dy.sample(i)[c * v..(c + 1) * v];
                let h = &xhat.sample(i)[c * v..(c + 1) * v];
                for (&a, &b) in d.iter().zip(h) {
                    sum_dy += a.as_f64();
                    sum_dy_xhat += (a * b).as_f64();
                }
            }
            self.beta.grad[c] += T::lit(sum_dy);
            self.gamma.grad[c] += T::lit(sum_dy_xhat);
            let k = self.gamma.value[c] * inv_std[c] / T::lit(m);
            let (mean_dy, mean_dyh) = (T::lit(sum_dy), T::lit(sum_dy_xhat));
            let mt = T::lit(m);
            for i in 0..dy.n {
                let d = &dy.sample(i)[c * v..(c + 1) * v];
                let h = &xhat.sample(i)[c * v..(c + 1) * v];
                let out = &mut dx.sample_mut(i)[c * v..(c + 1) * v];
                for ((o, &a), &b) in out.iter_mut().zip(d).zip(h) {
                    *o = k * (mt * a - mean_dy - b * mean_dyh);
                }
            }
        }
        dx
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm3d::<f64>::new(2);
        bn.gamma.value = vec![1.3, -0.7];
        bn.beta.value = vec![0.2, 0.1];
        let x = Tensor::from_vec((0..48).map(|_| rng.random_range(-2.0..2.0)).collect(), 2, 2, [3, 2, 2]).unwrap();
        let probe: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |bn: &BatchNorm3d<f64>, x: &Tensor<f64>| -> f64 {
            let mut b = bn.clone();
            b.forward(x).data.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let mut b = bn.clone();
        b.forward(&x);
        let dx = b.backward(&Tensor::from_vec(probe.clone(), 2, 2, [3, 2, 2]).unwrap());
        let h = 1e-6;
        for i in 0..x.data.len() {
            let (mut p, mut q) = (x.clone(), x.clone());
            p.data[i] += h;
            q.data[i] -= h;
            let fd = (f(&bn, &p) - f(&bn, &q)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "{i}: {fd} vs {}", dx.data[i]);
        }
        for c in 0..2 {
            let (mut p, mut q) = (bn.clone(), bn.clone());
            p.gamma.value[c] += h;
            q.gamma.value[c] -= h;
            let fd = (f(&p, &x) - f(&q, &x)) / (2.0 * h);
            assert!((fd - b.gamma.grad[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_drive_inference() {
        let mut bn = BatchNorm3d::<f64>::new(1);
        let x = Tensor::from_vec(vec![1.0, 3.0, 1.0, 3.0], 1, 1, [2, 2, 1]).unwrap();
        for _ in 0..400 {
            bn.forward(&x);
        }
        assert!((bn.running_mean[0] - 2.0).abs() < 1e-9);
        // unbiased variance of {1,3,1,3} is 4/3
        assert!((bn.running_var[0] - 4.0 / 3.0).abs() < 1e-9);
        let y = bn.infer(&x);
        assert!(y.data[0] < 0.0 && y.data[1] > 0.0);
    }
}
