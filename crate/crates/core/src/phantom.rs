//! Synthetic cardiac stacks with exact masks, and matching synthetic cohorts.
//!
//! A case is an elliptic body with a bright subcutaneous fat rim, a heart made
//! of 2-4 dark chamber ellipsoids with myocardium around the first one, and
//! bright pericardial fat patches hugging the heart. Optional pericardial
//! fluid sits next to the fat at a similar intensity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::distance::squared_distance_to;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats::PatientRecord;
use crate::volumes::{coords_of, voxel_count, voxel_volume_mm3, Dims, ImageVolume, LabelMask, Spacing};

/// Largest fat volume the generator will place, as a fraction of heart volume.
pub const MAX_FAT_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityLevels {
    pub background: f64,
    pub chamber: f64,
    pub myocardium: f64,
    pub fat: f64,
    pub fluid: f64,
}

impl Default for IntensityLevels {
    fn default() -> Self {
        IntensityLevels { background: 0.1, chamber: 0.3, myocardium: 0.4, fat: 0.9, fluid: 0.85 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: [f64; 3],
    /// Fat voxels as a fraction of heart (chamber + myocardium) voxels.
    pub fat_fraction: f64,
    pub fluid_present: bool,
    /// Gaussian noise sd as a fraction of the intensity scale.
    pub noise_sigma: f64,
    pub levels: IntensityLevels,
    /// Multiplier applied to the unit-range levels.
    pub intensity_scale: f64,
    /// In-plane heart radius as a fraction of the in-plane half field of view.
    pub heart_scale: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 32],
            spacing: [1.4, 1.4, 6.0],
            fat_fraction: 0.3,
            fluid_present: false,
            noise_sigma: 0.02,
            levels: IntensityLevels::default(),
            intensity_scale: 1000.0,
            heart_scale: 0.35,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Coarser, wider field of view whose heart and fat volumes are of
    /// clinical size; used for cohort generation.
    pub fn cohort_default() -> Self {
        PhantomSpec {
            dims: [64, 64, 32],
            spacing: [3.5, 3.5, 6.0],
            heart_scale: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        Spacing(self.spacing).validate()?;
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::domain(format!("phantom dims {:?} must be at least 4 per axis", self.dims)));
        }
        if !(self.fat_fraction >= 0.0) {
            return Err(Error::domain(format!("fat_fraction must be non-negative, got {}", self.fat_fraction)));
        }
        if self.fat_fraction > MAX_FAT_FRACTION {
            return Err(Error::domain(format!(
                "fat_fraction {} is infeasible (maximum {MAX_FAT_FRACTION})",
                self.fat_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::domain("noise_sigma must be non-negative"));
        }
        if !(self.intensity_scale > 0.0) || !self.intensity_scale.is_finite() {
            return Err(Error::domain("intensity_scale must be positive"));
        }
        if !(self.heart_scale > 0.0 && self.heart_scale < 0.6) {
            return Err(Error::domain("heart_scale must lie in (0, 0.6)"));
        }
        let l = &self.levels;
        let mut all = [l.background, l.chamber, l.myocardium, l.fat, l.fluid];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("intensity levels must be finite"));
        }
        all.sort_by(f64::total_cmp);
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("intensity levels must be distinct"));
        }
        if self.fluid_present && (l.fluid - l.fat).abs() > 0.1 * l.fat.abs() {
            return Err(Error::domain("fluid level must lie within 10% of the fat level"));
        }
        Ok(())
    }
}

/// Tissue class of each phantom voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Chamber = 1,
    Myocardium = 2,
    PericardialFat = 3,
    SubcutaneousFat = 4,
    Fluid = 5,
}

/// Ground-truth masks of one case.
#[derive(Clone, Debug)]
pub struct PhantomMasks {
    pub chambers: LabelMask,
    pub pat: LabelMask,
    pub fluid: LabelMask,
    pub tissue: Vec<Tissue>,
}

#[derive(Clone, Debug)]
pub struct PhantomCase<T> {
    pub volume: ImageVolume<T>,
    pub chambers: LabelMask,
    pub pat: LabelMask,
    pub fluid: LabelMask,
}

/// How much fat to place.
#[derive(Clone, Copy, Debug)]
enum FatTarget {
    Fraction(f64),
    /// Physical volume; capped at the maximum fraction of the generated heart.
    VolumeCm3(f64),
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    /// In-plane rotation, radians.
    angle: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3], grow: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy, dz) = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let (a, b, cz) = (self.semi[0] + grow, self.semi[1] + grow, self.semi[2] + grow);
        (u / a).powi(2) + (v / b).powi(2) + (dz / cz).powi(2) <= 1.0
    }
}

fn centre_mm(dims: Dims, spacing: [f64; 3], idx: usize) -> [f64; 3] {
    let c = coords_of(dims, idx);
    [0, 1, 2].map(|a| (c[a] as f64 + 0.5) * spacing[a])
}

/// Builds the tissue map and masks; the rng only drives geometry.
fn build_masks(spec: &PhantomSpec, target: FatTarget, rng: &mut ChaCha8Rng) -> Result<PhantomMasks> {
    spec.validate()?;
    let (dims, sp) = (spec.dims, spec.spacing);
    let spacing = Spacing(sp);
    let n = voxel_count(dims);
    let half = [0, 1, 2].map(|a| dims[a] as f64 * sp[a] / 2.0);
    let rh = spec.heart_scale * half[0].min(half[1]);
    let rz = (1.6 * rh).min(0.5 * half[2]);
    let hc = [
        half[0] * (1.0 + rng.random_range(-0.05..0.05)),
        half[1] * (1.0 + rng.random_range(-0.05..0.05)),
        half[2] * (1.0 + rng.random_range(-0.05..0.05)),
    ];

    let n_chambers = rng.random_range(2..=4);
    let chambers: Vec<Ellipsoid> = (0..n_chambers)
        .map(|k| {
            let spread = if k == 0 { 0.15 } else { 0.35 };
            Ellipsoid {
                center: [
                    hc[0] + rng.random_range(-1.0..1.0) * spread * rh,
                    hc[1] + rng.random_range(-1.0..1.0) * spread * rh,
                    hc[2] + rng.random_range(-1.0..1.0) * 0.2 * rz,
                ],
                semi: [
                    rng.random_range(0.45..0.65) * rh,
                    rng.random_range(0.45..0.65) * rh,
                    rng.random_range(0.6..0.9) * rz,
                ],
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        })
        .collect();
    let lv = &chambers[0];
    let wall = (0.25 * lv.semi[0].min(lv.semi[1])).max(1.5 * sp[0].max(sp[1]));

    let body = [0.95 * half[0], 0.9 * half[1]];
    let rim = (0.08 * half[0].min(half[1])).max(1.5 * sp[0].max(sp[1]));
    let ellipse = |p: [f64; 3], shrink: f64| {
        ((p[0] - half[0]) / (body[0] - shrink)).powi(2) + ((p[1] - half[1]) / (body[1] - shrink)).powi(2) <= 1.0
    };

    let mut tissue = vec![Tissue::Background; n];
    let mut interior = vec![false; n];
    for (i, t) in tissue.iter_mut().enumerate() {
        let p = centre_mm(dims, sp, i);
        if chambers.iter().any(|e| e.contains(p, 0.0)) {
            *t = Tissue::Chamber;
        } else if lv.contains(p, wall) {
            *t = Tissue::Myocardium;
        } else if ellipse(p, rim) {
            interior[i] = true;
        } else if ellipse(p, 0.0) {
            *t = Tissue::SubcutaneousFat;
        }
    }
    let heart = LabelMask::new(
        tissue.iter().map(|&t| u8::from(matches!(t, Tissue::Chamber | Tissue::Myocardium))).collect(),
        dims,
        spacing,
    )?;
    let heart_voxels = heart.count();
    if heart_voxels == 0 {
        return Err(Error::domain("phantom grid too coarse to hold a heart"));
    }
    let k = match target {
        FatTarget::Fraction(f) => (f * heart_voxels as f64).round() as usize,
        FatTarget::VolumeCm3(v) => {
            let cap = (MAX_FAT_FRACTION * heart_voxels as f64).floor() as usize;
            ((v.max(0.0) * 1000.0 / voxel_volume_mm3(sp)?).round() as usize).min(cap)
        }
    };

    // fat candidates: body interior outside the heart, nearest first
    let sqd = squared_distance_to(&heart);
    let mut cand: Vec<(f64, usize)> =
        (0..n).filter(|&i| interior[i]).map(|i| (sqd[i].sqrt(), i)).collect();
    if cand.len() < k {
        return Err(Error::domain(format!(
            "cannot place {k} fat voxels: only {} candidates inside the body",
            cand.len()
        )));
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut pat = vec![0u8; n];
    let mut fluid = vec![0u8; n];
    if k > 0 {
        let need = ((k as f64 / 0.6).ceil() as usize).min(cand.len());
        let thickness = cand[need - 1].0.max(1.5 * sp[0].max(sp[1]));
        let harmonics: Vec<(f64, f64)> = (1..=3)
            .map(|h| (rng.random_range(0.3..1.0) / h as f64, rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let (bz, pz) = (rng.random_range(0.2..0.6), rng.random_range(0.0..std::f64::consts::TAU));
        let mut shell: Vec<(f64, usize)> = cand
            .iter()
            .take_while(|(d, _)| *d <= thickness)
            .map(|&(d, i)| {
                let p = centre_mm(dims, sp, i);
                let theta = (p[1] - hc[1]).atan2(p[0] - hc[0]);
                let zn = (p[2] - hc[2]) / rz;
                let field: f64 = harmonics.iter().enumerate().map(|(h, &(a, ph))| a * ((h + 1) as f64 * theta + ph).cos()).sum::<f64>()
                    + bz * (1.5 * zn + pz).cos();
                (field - 0.5 * d / thickness, i)
            })
            .collect();
        shell.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &shell[..k] {
            pat[i] = 1;
            tissue[i] = Tissue::PericardialFat;
        }
        if spec.fluid_present {
            let kf = ((0.25 * k as f64).round() as usize).min(shell.len() - k);
            for &(_, i) in shell.iter().rev().take(kf) {
                fluid[i] = 1;
                tissue[i] = Tissue::Fluid;
            }
        }
    }
    Ok(PhantomMasks {
        chambers: heart,
        pat: LabelMask::new(pat, dims, spacing)?,
        fluid: LabelMask::new(fluid, dims, spacing)?,
        tissue,
    })
}

fn render<T: Scalar>(spec: &PhantomSpec, masks: PhantomMasks) -> Result<PhantomCase<T>> {
    let l = &spec.levels;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let sd = spec.noise_sigma * spec.intensity_scale;
    let normal = Normal::new(0.0, sd).map_err(|e| Error::domain(e.to_string()))?;
    let data = masks
        .tissue
        .iter()
        .map(|t| {
            let level = match t {
                Tissue::Background => l.background,
                Tissue::Chamber => l.chamber,
                Tissue::Myocardium => l.myocardium,
                Tissue::PericardialFat | Tissue::SubcutaneousFat => l.fat,
                Tissue::Fluid => l.fluid,
            };
            let noise = if sd > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
            T::lit(level * spec.intensity_scale + noise)
        })
        .collect();
    Ok(PhantomCase {
        volume: ImageVolume::new(data, spec.dims, Spacing(spec.spacing))?,
        chambers: masks.chambers,
        pat: masks.pat,
        fluid: masks.fluid,
    })
}

/// Masks only, without synthesising intensities.
pub fn generate_masks(spec: &PhantomSpec) -> Result<PhantomMasks> {
    build_masks(spec, FatTarget::Fraction(spec.fat_fraction), &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

pub fn generate_case<T: Scalar>(spec: &PhantomSpec) -> Result<PhantomCase<T>> {
    render(spec, generate_masks(spec)?)
}

/// Coefficients of the synthetic cohort's generative model.
///
/// ```text
/// age ~ N(age_mean, age_sd) clamped to [18, 95]
/// sex ~ Bernoulli(p_female)                      (1 = female)
/// bmi ~ N(bmi_mean, bmi_sd) clamped to [15, 60]
/// target PATV = patv_intercept + patv_sex·(sex − p_female) + patv_age·(age − age_mean)
///               + patv_bmi·(bmi − bmi_mean) + N(0, patv_noise_sd), realised through the masks
/// deceased ~ Bernoulli(logistic(death_intercept + death_patv·PATV + death_age·age))
/// cvd_diagnosis ~ Poisson(max(cvd_floor, cvd_intercept + cvd_patv·PATV + cvd_age·age))
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectSpec {
    pub age_mean: f64,
    pub age_sd: f64,
    pub p_female: f64,
    pub bmi_mean: f64,
    pub bmi_sd: f64,
    pub patv_intercept: f64,
    pub patv_sex: f64,
    pub patv_age: f64,
    pub patv_bmi: f64,
    pub patv_noise_sd: f64,
    pub death_intercept: f64,
    pub death_patv: f64,
    pub death_age: f64,
    pub cvd_intercept: f64,
    pub cvd_patv: f64,
    pub cvd_age: f64,
    pub cvd_floor: f64,
}

impl Default for EffectSpec {
    fn default() -> Self {
        EffectSpec {
            age_mean: 55.0,
            age_sd: 18.0,
            p_female: 0.42,
            bmi_mean: 27.7,
            bmi_sd: 5.9,
            patv_intercept: 140.0,
            patv_sex: -50.0,
            patv_age: 1.7,
            patv_bmi: 3.9,
            patv_noise_sd: 50.0,
            death_intercept: -3.0,
            death_patv: 0.01,
            death_age: 0.03,
            cvd_intercept: 0.5,
            cvd_patv: 0.01,
            cvd_age: 0.02,
            cvd_floor: 0.1,
        }
    }
}

impl EffectSpec {
    /// No regressor influences any outcome.
    pub fn zero_effect() -> Self {
        EffectSpec {
            patv_sex: 0.0,
            patv_age: 0.0,
            patv_bmi: 0.0,
            death_intercept: 0.0,
            death_patv: 0.0,
            death_age: 0.0,
            cvd_intercept: 3.0,
            cvd_patv: 0.0,
            cvd_age: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct CohortMember {
    pub record: PatientRecord,
    pub spec: PhantomSpec,
    pub masks: PhantomMasks,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub members: Vec<CohortMember>,
    pub effects: EffectSpec,
    pub template: PhantomSpec,
}

impl Cohort {
    pub fn records(&self) -> Vec<PatientRecord> {
        self.members.iter().map(|m| m.record.clone()).collect()
    }

    /// Renders the image of member `i`.
    pub fn render<T: Scalar>(&self, i: usize) -> Result<PhantomCase<T>> {
        let m = &self.members[i];
        render(&m.spec, m.masks.clone())
    }
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:03}")
}

/// Cohort of `n` synthetic patients; each PATV is measured on its generated mask.
pub fn generate_cohort(n: usize, seed: u64, effects: &EffectSpec, template: &PhantomSpec) -> Result<Cohort> {
    if n < 10 {
        return Err(Error::domain(format!("a cohort needs at least 10 members, got {n}")));
    }
    let members = generate_cohort_members(n, seed, effects, template)?;
    Ok(Cohort { members, effects: effects.clone(), template: template.clone() })
}

/// The members of [`generate_cohort`] without the minimum size; member `i`
/// does not depend on `n`.
pub fn generate_cohort_members(
    n: usize,
    seed: u64,
    effects: &EffectSpec,
    template: &PhantomSpec,
) -> Result<Vec<CohortMember>> {
    template.validate()?;
    let e = effects;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut members = Vec::with_capacity(n);
    for i in 0..n {
        let age = (e.age_mean + e.age_sd * std_normal.sample(&mut rng)).clamp(18.0, 95.0);
        let sex = u8::from(rng.random_bool(e.p_female.clamp(0.0, 1.0)));
        let bmi = (e.bmi_mean + e.bmi_sd * std_normal.sample(&mut rng)).clamp(15.0, 60.0);
        let target = e.patv_intercept
            + e.patv_sex * (f64::from(sex) - e.p_female)
            + e.patv_age * (age - e.age_mean)
            + e.patv_bmi * (bmi - e.bmi_mean)
            + e.patv_noise_sd * std_normal.sample(&mut rng);
        let spec = PhantomSpec { seed: rng.random(), ..template.clone() };
        let masks = build_masks(&spec, FatTarget::VolumeCm3(target), &mut ChaCha8Rng::seed_from_u64(spec.seed))?;
        let patv = masks.pat.count() as f64 * voxel_volume_mm3(spec.spacing)? / 1000.0;
        let eta = e.death_intercept + e.death_patv * patv + e.death_age * age;
        let deceased = u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()));
        let mean = (e.cvd_intercept + e.cvd_patv * patv + e.cvd_age * age).max(e.cvd_floor);
        let cvd = Poisson::new(mean).map_err(|err| Error::domain(err.to_string()))?.sample(&mut rng) as u32;
        members.push(CohortMember {
            record: PatientRecord { case_id: case_id(i), age, sex, bmi, deceased, cvd_diagnosis: cvd, patv },
            spec,
            masks,
        });
    }
    Ok(members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundtruth::candidate_pat_mask;
    use crate::metrics::dice_score;

    fn clean(seed: u64) -> PhantomSpec {
        PhantomSpec { noise_sigma: 0.0, seed, ..Default::default() }
    }

    #[test]
    fn masks_are_disjoint_and_fat_count_is_on_target() {
        for seed in 0..5 {
            let spec = PhantomSpec { fluid_present: true, seed, ..Default::default() };
            let c = generate_case::<f32>(&spec).unwrap();
            let heart = c.chambers.count() as f64;
            assert!(c.chambers.data().iter().zip(c.pat.data()).all(|(a, b)| a & b == 0));
            assert!(c.fluid.data().iter().zip(c.pat.data()).all(|(a, b)| a & b == 0));
            let ratio = c.pat.count() as f64 / heart;
            assert!((ratio - spec.fat_fraction).abs() <= 0.1 * spec.fat_fraction, "{ratio}");
            assert!(c.fluid.count() > 0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec { seed: 11, ..Default::default() };
        let a = generate_case::<f64>(&spec).unwrap();
        let b = generate_case::<f64>(&spec).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.pat, b.pat);
    }

    #[test]
    fn zero_fat_fraction_gives_empty_mask() {
        let c = generate_case::<f32>(&PhantomSpec { fat_fraction: 0.0, ..Default::default() }).unwrap();
        assert!(c.pat.is_empty());
    }

    #[test]
    fn infeasible_fraction_is_rejected() {
        let spec = PhantomSpec { fat_fraction: 0.85, ..Default::default() };
        assert!(matches!(generate_case::<f32>(&spec), Err(Error::Domain(_))));
    }

    #[test]
    fn fluid_must_be_close_to_fat() {
        let mut spec = PhantomSpec { fluid_present: true, ..Default::default() };
        spec.levels.fluid = 0.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn clean_phantom_candidate_recovers_fat() {
        let spec = clean(3);
        let c = generate_case::<f64>(&spec).unwrap();
        let cand = candidate_pat_mask(&c.volume, &c.chambers, 10.0, 256).unwrap();
        assert!(dice_score(&cand, &c.pat).unwrap() >= 0.95);
    }

    #[test]
    fn cohort_has_requested_size_and_plausible_volumes() {
        let cohort = generate_cohort(10, 2, &EffectSpec::default(), &PhantomSpec::cohort_default()).unwrap();
        assert_eq!(cohort.members.len(), 10);
        for m in &cohort.members {
            assert!(m.record.patv >= 0.0 && m.record.patv < 139.6 + 3.0 * 80.24);
        }
        assert!(generate_cohort(9, 2, &EffectSpec::default(), &PhantomSpec::cohort_default()).is_err());
    }
}
