//! 3D convolution and transposed convolution via im2col + GEMM.

use rand::Rng;

use crate::nn::param::Param;
use crate::nn::tensor::Tensor;
use crate::scalar::{MatRef, Scalar};
use crate::volumes::{voxel_count, Dims};

/// Geometry of a cubic-kernel convolution from a `big` grid onto a `small` one.
///
/// A transposed convolution with the same kernel, stride and padding (plus
/// output padding) maps `small` back onto `big`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub big: Dims,
    pub small: Dims,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn forward(big: Dims, kernel: usize, stride: usize) -> Self {
        let pad = kernel / 2;
        let small = big.map(|b| (b + 2 * pad - kernel) / stride + 1);
        ConvGeom { big, small, kernel, stride }
    }

    /// Transposed convolution onto `stride * small` voxels per axis.
    pub fn transposed(small: Dims, kernel: usize, stride: usize) -> Self {
        let big = small.map(|s| s * stride);
        let g = Self::forward(big, kernel, stride);
        debug_assert_eq!(g.small, small);
        g
    }

    #[inline]
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

/// Unfold `channels` planes on the big grid into a `(channels * k³) x small_voxels` matrix.
pub fn im2col<T: Scalar>(src: &[T], channels: usize, g: &ConvGeom, col: &mut [T]) {
    let [bx, by, bz] = g.big;
    let [sx, sy, sz] = g.small;
    let big_vox = voxel_count(g.big);
    let small_vox = voxel_count(g.small);
    let k = g.kernel;
    let s = g.stride;
    let pad = g.pad();
    debug_assert_eq!(col.len(), channels * g.taps() * small_vox);
    let mut row = 0;
    for c in 0..channels {
        let plane = &src[c * big_vox..(c + 1) * big_vox];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * small_vox..(row + 1) * small_vox];
                    row += 1;
                    for oz in 0..sz {
                        let iz = (oz * s) as isize + kz as isize - pad;
                        let out_plane = &mut dst[oz * sx * sy..(oz + 1) * sx * sy];
                        if iz < 0 || iz >= bz as isize {
                            out_plane.fill(T::zero());
                            continue;
                        }
                        for oy in 0..sy {
                            let iy = (oy * s) as isize + ky as isize - pad;
                            let out_row = &mut out_plane[oy * sx..(oy + 1) * sx];
                            if iy < 0 || iy >= by as isize {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let base = (iz as usize * by + iy as usize) * bx;
                            let line = &plane[base..base + bx];
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + kx as isize - pad;
                                *o = if ix < 0 || ix >= bx as isize {
                                    T::zero()
                                } else {
                                    line[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the matrix back onto the big grid.
pub fn col2im<T: Scalar>(col: &[T], channels: usize, g: &ConvGeom, dst: &mut [T]) {
    let [bx, by, bz] = g.big;
    let [sx, sy, sz] = g.small;
    let big_vox = voxel_count(g.big);
    let small_vox = voxel_count(g.small);
    let k = g.kernel;
    let s = g.stride;
    let pad = g.pad();
    debug_assert_eq!(dst.len(), channels * big_vox);
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dst[c * big_vox..(c + 1) * big_vox];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * small_vox..(row + 1) * small_vox];
                    row += 1;
                    for oz in 0..sz {
                        let iz = (oz * s) as isize + kz as isize - pad;
                        if iz < 0 || iz >= bz as isize {
                            continue;
                        }
                        for oy in 0..sy {
                            let iy = (oy * s) as isize + ky as isize - pad;
                            if iy < 0 || iy >= by as isize {
                                continue;
                            }
                            let base = (iz as usize * by + iy as usize) * bx;
                            let in_row = &src[(oz * sy + oy) * sx..(oz * sy + oy + 1) * sx];
                            let line = &mut plane[base..base + bx];
                            for (ox, &v) in in_row.iter().enumerate() {
                                let ix = (ox * s) as isize + kx as isize - pad;
                                if ix >= 0 && ix < bx as isize {
                                    line[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn uniform_init<T: Scalar, R: Rng>(len: usize, bound: f64, rng: &mut R) -> Vec<T> {
    (0..len)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect()
}

/// Cubic-kernel 3D convolution with bias, zero padding `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv3d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * kernel.pow(3);
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv3d {
            weight: Param::new(uniform_init(out_ch * fan_in, bound, rng)),
            bias: Param::new(uniform_init(out_ch, bound, rng)),
            in_ch,
            out_ch,
            kernel,
            stride,
            cache: None,
        }
    }

    pub fn output_dims(&self, input: Dims) -> Dims {
        ConvGeom::forward(input, self.kernel, self.stride).small
    }

    fn run(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let g = ConvGeom::forward(x.dims, self.kernel, self.stride);
        let sv = voxel_count(g.small);
        let kk = self.in_ch * g.taps();
        let mut y = Tensor::zeros(x.n, self.out_ch, g.small);
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * sv] };
        for i in 0..x.n {
            let xs = x.sample(i);
            let b = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, self.in_ch, &g, &mut col);
                &col
            };
            let out = y.sample_mut(i);
            for (o, &bv) in self.bias.value.iter().enumerate() {
                out[o * sv..(o + 1) * sv].fill(bv);
            }
            T::gemm(
                self.out_ch,
                kk,
                sv,
                T::one(),
                MatRef::row_major(&self.weight.value, kk),
                MatRef::row_major(b, sv),
                T::one(),
                out,
                (sv, 1),
            );
        }
        y
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.run(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("conv backward without forward");
        let g = ConvGeom::forward(x.dims, self.kernel, self.stride);
        let sv = voxel_count(g.small);
        let kk = self.in_ch * g.taps();
        let mut dx = Tensor::zeros(x.n, self.in_ch, x.dims);
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * sv] };
        let mut dcol = vec![T::zero(); kk * sv];
        for i in 0..x.n {
            let dys = dy.sample(i);
            for (o, gb) in self.bias.grad.iter_mut().enumerate() {
                *gb += dys[o * sv..(o + 1) * sv].iter().copied().sum::<T>();
            }
            let xs = x.sample(i);
            let b = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, self.in_ch, &g, &mut col);
                &col
            };
            // dW += dY · colᵀ
            T::gemm(
                self.out_ch,
                sv,
                kk,
                T::one(),
                MatRef::row_major(dys, sv),
                MatRef::row_major_t(b, sv),
                T::one(),
                &mut self.weight.grad,
                (kk, 1),
            );
            // dcol = Wᵀ · dY
            let dst: &mut [T] = if g.is_pointwise() { dx.sample_mut(i) } else { &mut dcol };
            T::gemm(
                kk,
                self.out_ch,
                sv,
                T::one(),
                MatRef::row_major_t(&self.weight.value, kk),
                MatRef::row_major(dys, sv),
                T::zero(),
                dst,
                (sv, 1),
            );
            if !g.is_pointwise() {
                col2im(&dcol, self.in_ch, &g, dx.sample_mut(i));
            }
        }
        dx
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed 3D convolution, kernel 3, padding 1, output padding `stride - 1`,
/// so each axis grows by exactly `stride`.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d<T> {
    /// Row-major `in_ch x (out_ch * k³)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose3d<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let taps = kernel.pow(3);
        let bound = 1.0 / ((in_ch * taps) as f64).sqrt();
        ConvTranspose3d {
            weight: Param::new(uniform_init(in_ch * out_ch * taps, bound, rng)),
            bias: Param::new(uniform_init(out_ch, bound, rng)),
            in_ch,
            out_ch,
            kernel,
            stride,
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_ch, "transposed conv input channels");
        let g = ConvGeom::transposed(x.dims, self.kernel, self.stride);
        let sv = voxel_count(g.small);
        let bv = voxel_count(g.big);
        let kk = self.out_ch * g.taps();
        let mut y = Tensor::zeros(x.n, self.out_ch, g.big);
        let mut col = vec![T::zero(); kk * sv];
        for i in 0..x.n {
            // col = Wᵀ · x
            T::gemm(
                kk,
                self.in_ch,
                sv,
                T::one(),
                MatRef::row_major_t(&self.weight.value, kk),
                MatRef::row_major(x.sample(i), sv),
                T::zero(),
                &mut col,
                (sv, 1),
            );
            let out = y.sample_mut(i);
            for (o, &b) in self.bias.value.iter().enumerate() {
                out[o * bv..(o + 1) * bv].fill(b);
            }
            col2im(&col, self.out_ch, &g, out);
        }
        y
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.run(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("transposed conv backward without forward");
        let g = ConvGeom::transposed(x.dims, self.kernel, self.stride);
        let sv = voxel_count(g.small);
        let bv = voxel_count(g.big);
        let kk = self.out_ch * g.taps();
        let mut dx = Tensor::zeros(x.n, self.in_ch, x.dims);
        let mut dcol = vec![T::zero(); kk * sv];
        for i in 0..x.n {
            let dys = dy.sample(i);
            for (o, gb) in self.bias.grad.iter_mut().enumerate() {
                *gb += dys[o * bv..(o + 1) * bv].iter().copied().sum::<T>();
            }
            im2col(dys, self.out_ch, &g, &mut dcol);
            // dx = W · dcol
            T::gemm(
                self.in_ch,
                kk,
                sv,
                T::one(),
                MatRef::row_major(&self.weight.value, kk),
                MatRef::row_major(&dcol, sv),
                T::zero(),
                dx.sample_mut(i),
                (sv, 1),
            );
            // dW += x · dcolᵀ
            T::gemm(
                self.in_ch,
                sv,
                kk,
                T::one(),
                MatRef::row_major(x.sample(i), sv),
                MatRef::row_major_t(&dcol, sv),
                T::one(),
                &mut self.weight.grad,
                (kk, 1),
            );
        }
        dx
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, conv: &Conv3d<f64>) -> Tensor<f64> {
        let g = ConvGeom::forward(x.dims, conv.kernel, conv.stride);
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut y = Tensor::zeros(x.n, conv.out_ch, g.small);
        let [bx, by, bz] = x.dims;
        let [sx, sy, sz] = g.small;
        for n in 0..x.n {
            for o in 0..conv.out_ch {
                for oz in 0..sz {
                    for oy in 0..sy {
                        for ox in 0..sx {
                            let mut acc = conv.bias.value[o];
                            for c in 0..conv.in_ch {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * conv.stride) as isize + kz - pad;
                                            let iy = (oy * conv.stride) as isize + ky - pad;
                                            let ix = (ox * conv.stride) as isize + kx - pad;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= bz as isize || iy >= by as isize || ix >= bx as isize {
                                                continue;
                                            }
                                            let w = conv.weight.value[((o * conv.in_ch + c) * (k * k * k) as usize)
                                                + ((kz * k + ky) * k + kx) as usize];
                                            let xi = ((n * x.c + c) * bz + iz as usize) * by * bx + iy as usize * bx + ix as usize;
                                            acc += w * x.data[xi];
                                        }
                                    }
                                }
                            }
                            let yi = ((n * conv.out_ch + o) * sz + oz) * sy * sx + oy * sx + ox;
                            y.data[yi] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, dims: Dims) -> Tensor<f64> {
        let len = n * c * voxel_count(dims);
        Tensor::from_vec((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), n, c, dims).unwrap()
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, dims) in [(3, 1, [5, 4, 3]), (3, 2, [6, 4, 4]), (1, 1, [3, 3, 2])] {
            let conv = Conv3d::<f64>::new(2, 3, k, s, &mut rng);
            let x = random_tensor(&mut rng, 2, 2, dims);
            let a = conv.infer(&x);
            let b = naive_conv(&x, &conv);
            assert_eq!(a.shape(), b.shape());
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeom::forward([6, 4, 4], 3, 2);
        let c = 2;
        let x: Vec<f64> = (0..c * 96).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows = c * 27 * voxel_count(g.small);
        let v: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut col = vec![0.0; rows];
        im2col(&x, c, &g, &mut col);
        let lhs: f64 = col.iter().zip(&v).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&v, c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_doubles_dims_and_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut up = ConvTranspose3d::<f64>::new(3, 2, 3, 2, &mut rng);
        up.bias.value.fill(0.0);
        let x = random_tensor(&mut rng, 1, 3, [2, 3, 2]);
        let y = up.infer(&x);
        assert_eq!(y.shape(), [1, 2, 4, 6, 4]);

        // <up(x), v> == <x, down(v)> where down shares the weights
        let v = random_tensor(&mut rng, 1, 2, [4, 6, 4]);
        let mut down = Conv3d::<f64>::new(2, 3, 3, 2, &mut rng);
        down.bias.value.fill(0.0);
        // up weight is in_ch(3) x (out_ch(2) * 27); down weight is out(3) x in(2)*27
        down.weight.value = up.weight.value.clone();
        let dv = down.infer(&v);
        let lhs: f64 = y.data.iter().zip(&v.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dv.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn check_grads<F, B>(params: usize, mut loss: F, mut analytic: B)
    where
        F: FnMut(usize, f64) -> f64,
        B: FnMut() -> Vec<f64>,
    {
        let g = analytic();
        let h = 1e-6;
        for i in 0..params {
            let fd = (loss(i, h) - loss(i, -h)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let conv = Conv3d::<f64>::new(2, 2, 3, 2, &mut rng);
        let x = random_tensor(&mut rng, 2, 2, [4, 4, 2]);
        let probe = random_tensor(&mut rng, 2, 2, [2, 2, 1]);
        let objective = |c: &Conv3d<f64>, x: &Tensor<f64>| -> f64 {
            c.infer(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let nw = conv.weight.value.len();
        check_grads(
            nw,
            |i, h| {
                let mut c = conv.clone();
                c.weight.value[i] += h;
                objective(&c, &x)
            },
            || {
                let mut c = conv.clone();
                c.forward(&x);
                c.backward(&probe);
                c.weight.grad.clone()
            },
        );
        check_grads(
            x.data.len(),
            |i, h| {
                let mut x2 = x.clone();
                x2.data[i] += h;
                objective(&conv, &x2)
            },
            || {
                let mut c = conv.clone();
                c.forward(&x);
                c.backward(&probe).data
            },
        );
    }

    #[test]
    fn transposed_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let up = ConvTranspose3d::<f64>::new(2, 2, 3, 2, &mut rng);
        let x = random_tensor(&mut rng, 1, 2, [2, 2, 1]);
        let probe = random_tensor(&mut rng, 1, 2, [4, 4, 2]);
        let objective = |c: &ConvTranspose3d<f64>, x: &Tensor<f64>| -> f64 {
            c.infer(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        check_grads(
            up.weight.value.len(),
            |i, h| {
                let mut c = up.clone();
                c.weight.value[i] += h;
                objective(&c, &x)
            },
            || {
                let mut c = up.clone();
                c.forward(&x);
                c.backward(&probe);
                c.weight.grad.clone()
            },
        );
        check_grads(
            x.data.len(),
            |i, h| {
                let mut x2 = x.clone();
                x2.data[i] += h;
                objective(&up, &x2)
            },
            || {
                let mut c = up.clone();
                c.forward(&x);
                c.backward(&probe).data
            },
        );
    }
}
