//! Exact anisotropic Euclidean distance transform.
//!
//! Separable min-plus passes along x, then y, then z. Every candidate distance
//! is accumulated as `((dx*sx)^2 + (dy*sy)^2) + (dz*sz)^2`, and floating-point
//! rounding is monotone, so each pass's minimum is bit-identical to the
//! minimum of that expression over all foreground voxels.

use crate::volumes::{linear_index, Dims, LabelMask};

/// Squared physical distance (mm²) from each voxel to the nearest set voxel of `mask`.
///
/// Every entry is `f64::INFINITY` when the mask is empty.
pub fn squared_distance_to(mask: &LabelMask) -> Vec<f64> {
    let dims = mask.dims();
    let [sx, sy, sz] = mask.spacing().0;
    let mut field = vec![f64::INFINITY; mask.data().len()];

    // x: nearest set voxel along each row by two sweeps
    let [nx, ny, nz] = dims;
    let mut nearest = vec![usize::MAX; nx];
    for z in 0..nz {
        for y in 0..ny {
            let row = linear_index(dims, 0, y, z);
            let mut last: Option<usize> = None;
            for x in 0..nx {
                if mask.is_set(row + x) {
                    last = Some(x);
                }
                nearest[x] = last.map_or(usize::MAX, |l| x - l);
            }
            last = None;
            for x in (0..nx).rev() {
                if mask.is_set(row + x) {
                    last = Some(x);
                }
                if let Some(l) = last {
                    nearest[x] = nearest[x].min(l - x);
                }
                if nearest[x] != usize::MAX {
                    let d = nearest[x] as f64 * sx;
                    field[row + x] = d * d;
                }
            }
        }
    }

    min_plus_pass(&mut field, dims, 1, sy);
    min_plus_pass(&mut field, dims, 2, sz);
    field
}

/// In-place `f[i] <- min_j f[j] + ((i - j) * step)^2` along `axis`.
fn min_plus_pass(field: &mut [f64], dims: Dims, axis: usize, step: f64) {
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let offsets: Vec<f64> = (0..n).map(|d| {
        let v = d as f64 * step;
        v * v
    }).collect();
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let [a, b] = match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    for j in 0..dims[b] {
        for i in 0..dims[a] {
            let mut base = [0usize; 3];
            base[a] = i;
            base[b] = j;
            let start = linear_index(dims, base[0], base[1], base[2]);
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = field[start + k * stride];
            }
            if line.iter().all(|v| v.is_infinite()) {
                continue;
            }
            for (q, o) in out.iter_mut().enumerate() {
                let mut best = f64::INFINITY;
                for (p, &v) in line.iter().enumerate() {
                    if v.is_finite() {
                        let c = v + offsets[q.abs_diff(p)];
                        if c < best {
                            best = c;
                        }
                    }
                }
                *o = best;
            }
            for (k, &v) in out.iter().enumerate() {
                field[start + k * stride] = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::{coords_of, Spacing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(mask: &LabelMask) -> Vec<f64> {
        let dims = mask.dims();
        let [sx, sy, sz] = mask.spacing().0;
        let pts: Vec<[usize; 3]> = mask.foreground().collect();
        (0..mask.data().len())
            .map(|i| {
                let p = coords_of(dims, i);
                pts.iter()
                    .map(|q| {
                        let dx = (p[0] as f64 - q[0] as f64) * sx;
                        let dy = (p[1] as f64 - q[1] as f64) * sy;
                        let dz = (p[2] as f64 - q[2] as f64) * sz;
                        dx * dx + dy * dy + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..40 {
            let dims = [rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..5)];
            let sp = Spacing([
                rng.random_range(0.3..3.0),
                rng.random_range(0.3..3.0),
                rng.random_range(0.5..7.0),
            ]);
            let p = if trial % 5 == 0 { 0.02 } else { 0.2 };
            let data: Vec<u8> = (0..dims.iter().product::<usize>())
                .map(|_| rng.random_bool(p) as u8)
                .collect();
            let mask = LabelMask::new(data, dims, sp).unwrap();
            assert_eq!(squared_distance_to(&mask), brute(&mask));
        }
    }

    #[test]
    fn empty_mask_is_infinite() {
        let m = LabelMask::zeros([3, 3, 3], Spacing::default()).unwrap();
        assert!(squared_distance_to(&m).iter().all(|v| v.is_infinite()));
    }
}
