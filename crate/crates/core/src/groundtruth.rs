//! Candidate fat masks from a chamber segmentation: crop a box around the
//! heart, split the cropped intensities into two classes with Otsu's method,
//! and keep the bright class outside the chambers.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volumes::{linear_index, Dims, ImageVolume, LabelMask};

/// Axis-aligned voxel box, `lo` inclusive and `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxRegion {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoxRegion {
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        (self.lo[0]..self.hi[0]).contains(&x)
            && (self.lo[1]..self.hi[1]).contains(&y)
            && (self.lo[2]..self.hi[2]).contains(&z)
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    /// Linear indices of the voxels inside the box for a grid of `dims`.
    pub fn indices(&self, dims: Dims) -> impl Iterator<Item = usize> + '_ {
        (self.lo[2]..self.hi[2]).flat_map(move |z| {
            (self.lo[1]..self.hi[1]).flat_map(move |y| {
                (self.lo[0]..self.hi[0]).map(move |x| linear_index(dims, x, y, z))
            })
        })
    }
}

/// Tightest box around the chamber mask, grown by `margin_mm` on every side
/// (rounded up to whole voxels per axis) and clamped to the grid.
pub fn bounding_box(chamber_mask: &LabelMask, margin_mm: f64) -> Result<BoxRegion> {
    if !(margin_mm.is_finite() && margin_mm >= 0.0) {
        return Err(Error::domain(format!("margin must be non-negative, got {margin_mm}")));
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for p in chamber_mask.foreground() {
        any = true;
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a] + 1);
        }
    }
    if !any {
        return Err(Error::domain("no heart found: chamber mask is empty"));
    }
    let dims = chamber_mask.dims();
    let spacing = chamber_mask.spacing().0;
    for a in 0..3 {
        let grow = (margin_mm / spacing[a]).ceil() as usize;
        lo[a] = lo[a].saturating_sub(grow);
        hi[a] = (hi[a] + grow).min(dims[a]);
    }
    Ok(BoxRegion { lo, hi })
}

/// Two-class Otsu split of an equal-width histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct OtsuResult<T> {
    /// Upper edge of the last bin in the low class.
    pub threshold: T,
    pub between_class_variance: T,
    /// Sample means of the low and high classes.
    pub class_means: (T, T),
    /// Last histogram bin assigned to the low class.
    pub split_bin: usize,
    pub bins: usize,
    min: f64,
    width: f64,
}

impl<T: Scalar> OtsuResult<T> {
    /// Histogram bin of `v` under the binning used for the split.
    pub fn bin_of(&self, v: T) -> usize {
        bin_index(v.as_f64(), self.min, self.width, self.bins)
    }

    /// Whether `v` falls in the high-intensity class.
    pub fn is_high(&self, v: T) -> bool {
        self.bin_of(v) > self.split_bin
    }
}

#[inline]
fn bin_index(v: f64, min: f64, width: f64, bins: usize) -> usize {
    let b = ((v - min) / width).floor();
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

/// Equal-width histogram over `[min, max]` of the samples.
pub fn histogram<T: Scalar>(intensities: &[T], bins: usize) -> Result<(Vec<u64>, f64, f64)> {
    if intensities.is_empty() {
        return Err(Error::domain("otsu threshold of an empty sample"));
    }
    if bins < 2 {
        return Err(Error::domain(format!("otsu needs at least 2 bins, got {bins}")));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in intensities {
        let v = v.as_f64();
        if !v.is_finite() {
            return Err(Error::domain("non-finite intensity in otsu sample"));
        }
        min = min.min(v);
        max = max.max(v);
    }
    if !(max > min) {
        return Err(Error::Degenerate(format!(
            "constant intensity {min} over {} samples",
            intensities.len()
        )));
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0u64; bins];
    for v in intensities {
        counts[bin_index(v.as_f64(), min, width, bins)] += 1;
    }
    Ok((counts, min, width))
}

/// Otsu threshold maximising the between-class variance over every bin
/// boundary. Candidate splits are compared in exact integer arithmetic, so
/// equal-variance splits resolve to the lowest boundary.
pub fn otsu_threshold<T: Scalar>(intensities: &[T], bins: usize) -> Result<OtsuResult<T>> {
    let (counts, min, width) = histogram(intensities, bins)?;
    let total_n: u64 = counts.iter().sum();
    let total_s: u128 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    // Between-class variance with bin indices as values is, up to the
    // constant width²/N², (n1*S0 - n0*S1)^2 / (n0*n1).
    let mut best: Option<(usize, BigUint, BigUint)> = None;
    let (mut n0, mut s0) = (0u64, 0u128);
    for k in 0..bins - 1 {
        n0 += counts[k];
        s0 += k as u128 * counts[k] as u128;
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_s - s0;
        let cross = (n1 as u128 * s0).abs_diff(n0 as u128 * s1);
        let num = BigUint::from(cross) * BigUint::from(cross);
        let den = BigUint::from(n0 as u128 * n1 as u128);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    let (split_bin, _, _) =
        best.ok_or_else(|| Error::Degenerate("no bin boundary separates the samples".into()))?;

    let (mut sum_lo, mut n_lo, mut sum_hi, mut n_hi) = (0.0, 0usize, 0.0, 0usize);
    for v in intensities {
        let v = v.as_f64();
        if bin_index(v, min, width, bins) > split_bin {
            sum_hi += v;
            n_hi += 1;
        } else {
            sum_lo += v;
            n_lo += 1;
        }
    }
    let (m_lo, m_hi) = (sum_lo / n_lo as f64, sum_hi / n_hi as f64);
    let n = (n_lo + n_hi) as f64;
    let var_b = (n_lo as f64 / n) * (n_hi as f64 / n) * (m_hi - m_lo) * (m_hi - m_lo);
    Ok(OtsuResult {
        threshold: T::lit(min + (split_bin + 1) as f64 * width),
        between_class_variance: T::lit(var_b),
        class_means: (T::lit(m_lo), T::lit(m_hi)),
        split_bin,
        bins,
        min,
        width,
    })
}

/// Parameters of the semi-automatic candidate generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthConfig {
    pub margin_mm: f64,
    pub bins: usize,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig {
            margin_mm: 10.0,
            bins: 256,
        }
    }
}

/// Bright-class voxels inside the heart box and outside the chambers.
pub fn candidate_pat_mask<T: Scalar>(
    volume: &ImageVolume<T>,
    chamber_mask: &LabelMask,
    margin_mm: f64,
    bins: usize,
) -> Result<LabelMask> {
    if !volume.is_aligned_with(chamber_mask) {
        return Err(Error::domain(format!(
            "volume {:?} and chamber mask {:?} are not aligned",
            volume.dims(),
            chamber_mask.dims()
        )));
    }
    let bx = bounding_box(chamber_mask, margin_mm)?;
    let dims = volume.dims();
    let samples: Vec<T> = bx.indices(dims).map(|i| volume.data()[i]).collect();
    let otsu = otsu_threshold(&samples, bins)?;
    let mut out = LabelMask::zeros_like(volume);
    for i in bx.indices(dims) {
        if !chamber_mask.is_set(i) && otsu.is_high(volume.data()[i]) {
            let [x, y, z] = crate::volumes::coords_of(dims, i);
            out.set(x, y, z, true);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::Spacing;

    fn mask(dims: Dims, sp: Spacing, pts: &[[usize; 3]]) -> LabelMask {
        let mut m = LabelMask::zeros(dims, sp).unwrap();
        for p in pts {
            m.set(p[0], p[1], p[2], true);
        }
        m
    }

    #[test]
    fn box_of_a_point() {
        let m = mask([12, 12, 12], Spacing::default(), &[[5, 5, 5]]);
        assert_eq!(bounding_box(&m, 0.0).unwrap(), BoxRegion { lo: [5, 5, 5], hi: [6, 6, 6] });
    }

    #[test]
    fn box_of_two_points() {
        let m = mask([12, 12, 12], Spacing::default(), &[[2, 2, 2], [8, 9, 10]]);
        assert_eq!(bounding_box(&m, 0.0).unwrap(), BoxRegion { lo: [2, 2, 2], hi: [9, 10, 11] });
    }

    #[test]
    fn box_margin_in_mm_is_anisotropic_and_clamped() {
        let m = mask([12, 12, 12], Spacing([1.4, 1.4, 6.0]), &[[2, 2, 2], [8, 9, 10]]);
        // ceil(6/1.4) = 5 voxels in-plane, ceil(6/6) = 1 slice
        let b = bounding_box(&m, 6.0).unwrap();
        assert_eq!(b.lo, [0, 0, 1]);
        assert_eq!(b.hi, [12, 12, 12]);
        let m = mask([40, 40, 20], Spacing([1.4, 1.4, 6.0]), &[[10, 10, 10]]);
        let b = bounding_box(&m, 6.0).unwrap();
        assert_eq!(b.lo, [5, 5, 9]);
        assert_eq!(b.hi, [16, 16, 12]);
    }

    #[test]
    fn box_errors() {
        let m = mask([4, 4, 4], Spacing::default(), &[]);
        assert!(matches!(bounding_box(&m, 0.0), Err(Error::Domain(_))));
        let m = mask([4, 4, 4], Spacing::default(), &[[1, 1, 1]]);
        assert!(bounding_box(&m, -1.0).is_err());
    }

    #[test]
    fn otsu_two_groups() {
        let r = otsu_threshold(&[0.0f64, 0.0, 0.0, 10.0, 10.0, 10.0], 256).unwrap();
        assert_eq!(r.split_bin, 0);
        assert_eq!(r.class_means, (0.0, 10.0));
        assert!(!r.is_high(0.0) && r.is_high(10.0));
        assert!(r.class_means.0 <= r.threshold && r.threshold <= r.class_means.1);
        assert_eq!(r.between_class_variance, 25.0);
    }

    #[test]
    fn otsu_two_points() {
        let r = otsu_threshold(&[0.0f32, 1.0], 256).unwrap();
        assert!(!r.is_high(0.0) && r.is_high(1.0));
    }

    #[test]
    fn otsu_degenerate_inputs() {
        assert!(matches!(otsu_threshold(&[5.0f64; 4], 256), Err(Error::Degenerate(_))));
        assert!(matches!(otsu_threshold::<f64>(&[], 256), Err(Error::Domain(_))));
        assert!(matches!(otsu_threshold(&[1.0f64, 2.0], 1), Err(Error::Domain(_))));
    }

    #[test]
    fn otsu_symmetric_histogram_takes_lowest_tie() {
        // three equal groups: splitting after the first or second is a tie
        let v = [0.0f64, 0.0, 5.0, 5.0, 10.0, 10.0];
        let r = otsu_threshold(&v, 3).unwrap();
        assert_eq!(r.split_bin, 0);
    }

    fn phantom_like() -> (ImageVolume<f64>, LabelMask) {
        let dims = [20, 20, 6];
        let sp = Spacing([1.4, 1.4, 6.0]);
        let mut data = vec![0.1; 2400];
        let mut ch = LabelMask::zeros(dims, sp).unwrap();
        for z in 2..4 {
            for y in 8..12 {
                for x in 8..12 {
                    ch.set(x, y, z, true);
                    data[linear_index(dims, x, y, z)] = 0.3;
                }
            }
            for x in 6..14 {
                data[linear_index(dims, x, 6, z)] = 0.9;
            }
        }
        (ImageVolume::new(data, dims, sp).unwrap(), ch)
    }

    #[test]
    fn candidate_picks_bright_ring_outside_chambers() {
        let (v, ch) = phantom_like();
        let c = candidate_pat_mask(&v, &ch, 5.0, 256).unwrap();
        assert_eq!(c.count(), 16);
        assert!(c.foreground().all(|p| p[1] == 6));
        assert!(c.data().iter().zip(ch.data()).all(|(&a, &b)| a & b == 0));
    }

    #[test]
    fn candidate_errors_and_empty_cases() {
        let (v, ch) = phantom_like();
        let flat = ImageVolume::filled(v.dims(), v.spacing(), 1.0).unwrap();
        assert!(matches!(candidate_pat_mask(&flat, &ch, 5.0, 256), Err(Error::Degenerate(_))));

        let all = ch.from_fn_like(|_| true);
        let c = candidate_pat_mask(&v, &all, 0.0, 256).unwrap();
        assert!(c.is_empty());

        let other = LabelMask::zeros([20, 20, 7], v.spacing()).unwrap();
        assert!(candidate_pat_mask(&v, &other, 5.0, 256).is_err());
    }
}
