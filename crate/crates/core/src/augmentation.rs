//! Random training-time transforms applied jointly to a volume and its mask.
//!
//! Geometric transforms (rotation, crop, flip) move the mask with the volume,
//! using nearest-neighbour sampling for the mask. Intensity transforms (blur,
//! Rayleigh noise) touch the volume only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volumes::{linear_index, voxel_count, ImageVolume, LabelMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Probability of applying each transform, independently.
    pub p_each: f64,
    /// Rotation angle is uniform in `[-max, max]`, in-plane about z.
    pub rotation_max_deg: f64,
    /// In-plane side fraction kept by the crop before resizing back.
    pub crop_fraction: f64,
    pub blur_sigma_mm: f64,
    /// Rayleigh scale as a fraction of the volume's intensity range.
    pub rayleigh_scale: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_each: 0.1,
            rotation_max_deg: 15.0,
            crop_fraction: 0.9,
            blur_sigma_mm: 1.5,
            rayleigh_scale: 0.05,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// Policy that never transforms anything.
    pub fn disabled() -> Self {
        AugmentPolicy { p_each: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_each) {
            return Err(Error::domain(format!("p_each must lie in [0, 1], got {}", self.p_each)));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::domain(format!("crop_fraction must lie in (0, 1], got {}", self.crop_fraction)));
        }
        if !(self.rotation_max_deg >= 0.0) || !self.rotation_max_deg.is_finite() {
            return Err(Error::domain("rotation_max_deg must be non-negative"));
        }
        if !(self.rayleigh_scale >= 0.0) || !self.rayleigh_scale.is_finite() {
            return Err(Error::domain("rayleigh_scale must be non-negative"));
        }
        if !(self.blur_sigma_mm >= 0.0) || !self.blur_sigma_mm.is_finite() {
            return Err(Error::domain("blur_sigma_mm must be non-negative"));
        }
        Ok(())
    }
}

/// Which transforms to apply, in application order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransformSet {
    pub rotate: bool,
    pub crop: bool,
    pub flip: bool,
    pub blur: bool,
    pub noise: bool,
}

impl TransformSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn draw<R: Rng>(p: f64, rng: &mut R) -> Self {
        let mut b = || rng.random::<f64>() < p;
        TransformSet { rotate: b(), crop: b(), flip: b(), blur: b(), noise: b() }
    }
}

fn check_pair<T: Scalar>(volume: &ImageVolume<T>, mask: &LabelMask) -> Result<()> {
    if !volume.is_aligned_with(mask) {
        return Err(Error::domain(format!(
            "volume {:?} and mask {:?} are not aligned",
            volume.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

/// Draws the transform set with `policy.p_each` and applies it.
pub fn augment_pair<T: Scalar, R: Rng>(
    volume: &ImageVolume<T>,
    mask: &LabelMask,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(ImageVolume<T>, LabelMask)> {
    policy.validate()?;
    let set = TransformSet::draw(policy.p_each, rng);
    apply_transforms(volume, mask, policy, set, rng)
}

/// Applies exactly the transforms in `set`, drawing their parameters from `rng`.
pub fn apply_transforms<T: Scalar, R: Rng>(
    volume: &ImageVolume<T>,
    mask: &LabelMask,
    policy: &AugmentPolicy,
    set: TransformSet,
    rng: &mut R,
) -> Result<(ImageVolume<T>, LabelMask)> {
    check_pair(volume, mask)?;
    let (mut v, mut m) = (volume.clone(), mask.clone());
    if set.rotate {
        let angle = rng.random_range(-1.0..=1.0) * policy.rotation_max_deg;
        (v, m) = rotate_z(&v, &m, angle)?;
    }
    if set.crop {
        let [nx, ny, _] = v.dims();
        let (cx, cy) = (crop_size(nx, policy.crop_fraction), crop_size(ny, policy.crop_fraction));
        let ox = rng.random_range(0..=nx - cx);
        let oy = rng.random_range(0..=ny - cy);
        (v, m) = crop_resize(&v, &m, [ox, oy], [cx, cy])?;
    }
    if set.flip {
        let axis = rng.random_range(0..3);
        (v, m) = flip(&v, &m, axis)?;
    }
    if set.blur {
        v = gaussian_blur(&v, policy.blur_sigma_mm)?;
    }
    if set.noise {
        v = rayleigh_noise(&v, policy.rayleigh_scale, rng)?;
    }
    Ok((v, m))
}

fn crop_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n)
}

/// Bilinear sample of slice `z` at fractional in-plane coordinates; zero outside.
fn sample_bilinear<T: Scalar>(v: &ImageVolume<T>, fx: f64, fy: f64, z: usize) -> T {
    let [nx, ny, _] = v.dims();
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            let (x, y) = (x0 as i64 + dx, y0 as i64 + dy);
            if wx * wy == 0.0 || x < 0 || y < 0 || x >= nx as i64 || y >= ny as i64 {
                continue;
            }
            acc += wx * wy * v.get(x as usize, y as usize, z).as_f64();
        }
    }
    T::lit(acc)
}

fn sample_nearest(m: &LabelMask, fx: f64, fy: f64, z: usize) -> bool {
    let [nx, ny, _] = m.dims();
    let (x, y) = (fx.round(), fy.round());
    if x < 0.0 || y < 0.0 || x >= nx as f64 || y >= ny as f64 {
        return false;
    }
    m.get(x as usize, y as usize, z)
}

/// Resamples every slice through `src_of(x, y) -> (fx, fy)`.
fn resample_plane<T: Scalar>(
    v: &ImageVolume<T>,
    m: &LabelMask,
    src_of: impl Fn(usize, usize) -> (f64, f64),
) -> Result<(ImageVolume<T>, LabelMask)> {
    let dims = v.dims();
    let mut data = vec![T::zero(); voxel_count(dims)];
    let mut bits = vec![false; data.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let (fx, fy) = src_of(x, y);
                let i = linear_index(dims, x, y, z);
                data[i] = sample_bilinear(v, fx, fy, z);
                bits[i] = sample_nearest(m, fx, fy, z);
            }
        }
    }
    Ok((v.map_data(data)?, m.from_fn_like(|i| bits[i])))
}

/// In-plane rotation by `angle_deg` about the slice centre, in physical
/// coordinates; samples falling outside the grid become zero.
pub fn rotate_z<T: Scalar>(
    volume: &ImageVolume<T>,
    mask: &LabelMask,
    angle_deg: f64,
) -> Result<(ImageVolume<T>, LabelMask)> {
    check_pair(volume, mask)?;
    let [nx, ny, _] = volume.dims();
    let [sx, sy, _] = volume.spacing().0;
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    let (s, c) = angle_deg.to_radians().sin_cos();
    resample_plane(volume, mask, |x, y| {
        let (px, py) = ((x as f64 - cx) * sx, (y as f64 - cy) * sy);
        // inverse rotation maps output to source
        let (qx, qy) = (c * px + s * py, -s * px + c * py);
        (qx / sx + cx, qy / sy + cy)
    })
}

/// Crops the in-plane window `origin .. origin + size` and stretches it back
/// to the full grid.
pub fn crop_resize<T: Scalar>(
    volume: &ImageVolume<T>,
    mask: &LabelMask,
    origin: [usize; 2],
    size: [usize; 2],
) -> Result<(ImageVolume<T>, LabelMask)> {
    check_pair(volume, mask)?;
    let [nx, ny, _] = volume.dims();
    if size[0] == 0 || size[1] == 0 || origin[0] + size[0] > nx || origin[1] + size[1] > ny {
        return Err(Error::domain(format!("crop window {origin:?}+{size:?} exceeds ({nx}, {ny})")));
    }
    let (kx, ky) = (size[0] as f64 / nx as f64, size[1] as f64 / ny as f64);
    resample_plane(volume, mask, |x, y| {
        (
            origin[0] as f64 + (x as f64 + 0.5) * kx - 0.5,
            origin[1] as f64 + (y as f64 + 0.5) * ky - 0.5,
        )
    })
}

/// Mirrors along `axis` (0 = x, 1 = y, 2 = z).
pub fn flip<T: Scalar>(
    volume: &ImageVolume<T>,
    mask: &LabelMask,
    axis: usize,
) -> Result<(ImageVolume<T>, LabelMask)> {
    check_pair(volume, mask)?;
    if axis > 2 {
        return Err(Error::domain(format!("flip axis {axis} out of range")));
    }
    let dims = volume.dims();
    let src = |i: usize| {
        let mut c = crate::volumes::coords_of(dims, i);
        c[axis] = dims[axis] - 1 - c[axis];
        linear_index(dims, c[0], c[1], c[2])
    };
    let data = (0..voxel_count(dims)).map(|i| volume.data()[src(i)]).collect();
    Ok((volume.map_data(data)?, mask.from_fn_like(|i| mask.is_set(src(i)))))
}

/// Separable Gaussian smoothing with a physical sigma, edge-replicated.
pub fn gaussian_blur<T: Scalar>(volume: &ImageVolume<T>, sigma_mm: f64) -> Result<ImageVolume<T>> {
    if !(sigma_mm >= 0.0) {
        return Err(Error::domain("blur sigma must be non-negative"));
    }
    let dims = volume.dims();
    let mut cur: Vec<f64> = volume.data().iter().map(|v| v.as_f64()).collect();
    for axis in 0..3 {
        let sigma = sigma_mm / volume.spacing().0[axis];
        if sigma < 1e-3 || dims[axis] == 1 {
            continue;
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let n = dims[axis] as i64;
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as i64;
            let base = i - pos as usize * stride;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let p = (pos + k as i64 - radius).clamp(0, n - 1) as usize;
                    w * cur[base + p * stride]
                })
                .sum();
        }
        cur = next;
    }
    volume.map_data(cur.into_iter().map(T::lit).collect())
}

/// Adds `σ·sqrt(-2 ln U)` per voxel with `σ = scale · (max - min)`.
pub fn rayleigh_noise<T: Scalar, R: Rng>(
    volume: &ImageVolume<T>,
    scale: f64,
    rng: &mut R,
) -> Result<ImageVolume<T>> {
    let (lo, hi) = volume.range();
    let sigma = scale * (hi - lo).as_f64();
    let data = volume
        .data()
        .iter()
        .map(|&v| {
            let u: f64 = 1.0 - rng.random::<f64>();
            v + T::lit(sigma * (-2.0 * u.ln()).sqrt())
        })
        .collect();
    volume.map_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::Spacing;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case(seed: u64) -> (ImageVolume<f64>, LabelMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [12, 10, 4];
        let sp = Spacing::new(1.4, 1.4, 6.0).unwrap();
        let n = voxel_count(dims);
        let v = ImageVolume::new((0..n).map(|_| rng.random_range(0.0..1.0)).collect(), dims, sp).unwrap();
        let m = LabelMask::new((0..n).map(|_| rng.random_bool(0.3) as u8).collect(), dims, sp).unwrap();
        (v, m)
    }

    #[test]
    fn zero_probability_is_identity() {
        let (v, m) = case(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AugmentPolicy::disabled();
        for _ in 0..20 {
            let (v2, m2) = augment_pair(&v, &m, &p, &mut rng).unwrap();
            assert_eq!((&v2, &m2), (&v, &m));
        }
    }

    #[test]
    fn flip_matches_mirrored_coordinates_and_is_an_involution() {
        let (v, m) = case(3);
        let [nx, _, _] = v.dims();
        let (fv, fm) = flip(&v, &m, 0).unwrap();
        let mut expected = LabelMask::zeros(m.dims(), m.spacing()).unwrap();
        for [x, y, z] in m.foreground() {
            expected.set(nx - 1 - x, y, z, true);
        }
        assert_eq!(crate::metrics::dice_score(&fm, &expected).unwrap(), 1.0);
        assert_eq!(fv.get(0, 2, 1), v.get(nx - 1, 2, 1));
        for axis in 0..3 {
            let (a, b) = flip(&v, &m, axis).unwrap();
            assert_eq!(flip(&a, &b, axis).unwrap(), (v.clone(), m.clone()));
        }
    }

    #[test]
    fn rayleigh_mean_matches_theory() {
        let dims = [40, 40, 10];
        let sp = Spacing::new(1.0, 1.0, 1.0).unwrap();
        let mut data = vec![0.0f64; voxel_count(dims)];
        data[0] = 1.0;
        let v = ImageVolume::new(data, dims, sp).unwrap();
        let scale = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = rayleigh_noise(&v, scale, &mut rng).unwrap();
        let diffs: Vec<f64> = out.data().iter().zip(v.data()).map(|(a, b)| a - b).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        // Rayleigh(σ): mean σ√(π/2), variance (4 − π)/2 · σ²
        let sigma = scale;
        let expected = sigma * (std::f64::consts::PI / 2.0).sqrt();
        let se = sigma * ((4.0 - std::f64::consts::PI) / 2.0).sqrt() / n.sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} ± {se}");
        assert!(diffs.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn zero_rotation_and_full_crop_are_identity() {
        let (v, m) = case(4);
        let (rv, rm) = rotate_z(&v, &m, 0.0).unwrap();
        assert_eq!(rm, m);
        assert!(rv.data().iter().zip(v.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        let [nx, ny, _] = v.dims();
        let (cv, cm) = crop_resize(&v, &m, [0, 0], [nx, ny]).unwrap();
        assert_eq!(cm, m);
        assert!(cv.data().iter().zip(v.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn quarter_turn_on_square_grid_permutes_voxels() {
        let dims = [6, 6, 2];
        let sp = Spacing::new(1.0, 1.0, 3.0).unwrap();
        let mut m = LabelMask::zeros(dims, sp).unwrap();
        m.set(1, 0, 0, true);
        let v = ImageVolume::filled(dims, sp, 1.0f64).unwrap();
        let (_, r) = rotate_z(&v, &m, 90.0).unwrap();
        assert_eq!(r.count(), 1);
        // (1,0) about centre (2.5,2.5) rotated +90° lands on (5,1)
        assert!(r.get(5, 1, 0));
    }

    #[test]
    fn blur_preserves_constant_volumes_and_mean() {
        let dims = [8, 8, 4];
        let sp = Spacing::new(1.0, 1.0, 2.0).unwrap();
        let v = ImageVolume::filled(dims, sp, 3.0f64).unwrap();
        let b = gaussian_blur(&v, 1.5).unwrap();
        assert!(b.data().iter().all(|&x| (x - 3.0).abs() < 1e-12));
    }

    #[test]
    fn intensity_transforms_leave_the_mask_alone() {
        let (v, m) = case(5);
        let p = AugmentPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = TransformSet { blur: true, noise: true, ..TransformSet::none() };
        let (v2, m2) = apply_transforms(&v, &m, &p, set, &mut rng).unwrap();
        assert_eq!(m2, m);
        assert_ne!(v2, v);
    }

    #[test]
    fn invalid_policies_are_rejected() {
        assert!(AugmentPolicy { p_each: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugmentPolicy { crop_fraction: 0.0, ..Default::default() }.validate().is_err());
        assert!(AugmentPolicy { rotation_max_deg: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn masks_stay_binary_and_replay_is_deterministic(data_seed in 0u64..1000, aug_seed in 0u64..1000) {
            let (v, m) = case(data_seed);
            let p = AugmentPolicy { p_each: 0.7, ..Default::default() };
            let a = augment_pair(&v, &m, &p, &mut ChaCha8Rng::seed_from_u64(aug_seed)).unwrap();
            let b = augment_pair(&v, &m, &p, &mut ChaCha8Rng::seed_from_u64(aug_seed)).unwrap();
            prop_assert!(a.1.data().iter().all(|&x| x <= 1));
            prop_assert_eq!(a.0.dims(), v.dims());
            prop_assert_eq!(a, b);
        }
    }
}
