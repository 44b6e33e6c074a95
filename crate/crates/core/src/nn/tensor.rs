use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volumes::{voxel_count, Dims};

/// Dense batch of multi-channel volumes, laid out `[n][c][z][y][x]` with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub data: Vec<T>,
    pub n: usize,
    pub c: usize,
    pub dims: Dims,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, dims: Dims) -> Self {
        Tensor {
            data: vec![T::zero(); n * c * voxel_count(dims)],
            n,
            c,
            dims,
        }
    }

    pub fn from_vec(data: Vec<T>, n: usize, c: usize, dims: Dims) -> Result<Self> {
        if data.len() != n * c * voxel_count(dims) {
            return Err(Error::shape(format!(
                "tensor ({n}, {c}, {dims:?}) needs {} values, got {}",
                n * c * voxel_count(dims),
                data.len()
            )));
        }
        Ok(Tensor { data, n, c, dims })
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.n, self.c, self.dims[0], self.dims[1], self.dims[2]]
    }

    /// All channels of sample `i`.
    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.c * self.voxels();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.c * self.voxels();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Channel concatenation `[a, b]` of two tensors on the same grid.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.n, b.n);
    assert_eq!(a.dims, b.dims);
    let v = a.voxels();
    let mut out = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        out.extend_from_slice(a.sample(i));
        out.extend_from_slice(b.sample(i));
    }
    Tensor {
        data: out,
        n: a.n,
        c: a.c + b.c,
        dims: a.dims,
    }
    .debug_check(v)
}

/// Inverse of [`concat_channels`]: the first `first` channels and the rest.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    assert!(first <= t.c);
    let v = t.voxels();
    let mut a = Vec::with_capacity(t.n * first * v);
    let mut b = Vec::with_capacity(t.n * (t.c - first) * v);
    for i in 0..t.n {
        let s = t.sample(i);
        a.extend_from_slice(&s[..first * v]);
        b.extend_from_slice(&s[first * v..]);
    }
    (
        Tensor { data: a, n: t.n, c: first, dims: t.dims },
        Tensor { data: b, n: t.n, c: t.c - first, dims: t.dims },
    )
}

impl<T: Scalar> Tensor<T> {
    fn debug_check(self, v: usize) -> Self {
        debug_assert_eq!(self.data.len(), self.n * self.c * v);
        self
    }
}
