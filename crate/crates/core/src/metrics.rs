//! Overlap and surface-distance metrics, and fat volume quantification.

use std::io::Write;
use std::path::Path;

use crate::distance::squared_distance_to;
use crate::error::{Error, Result};
use crate::volumes::{voxel_volume_mm3, LabelMask};

/// Per-case segmentation quality and quantification.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hausdorff_mm: Option<f64>,
    pub patv_pred_cm3: f64,
    pub patv_true_cm3: f64,
}

fn check_aligned(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if !a.is_aligned_with(b) {
        return Err(Error::domain(format!(
            "masks are not aligned: dims {:?} / {:?}, spacing {:?} / {:?}",
            a.dims(),
            b.dims(),
            a.spacing().0,
            b.spacing().0
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice_score(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    check_aligned(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        na += p as usize;
        nb += q as usize;
        inter += (p & q) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

fn directed_sq(from: &LabelMask, to_field: &[f64]) -> f64 {
    from.data()
        .iter()
        .zip(to_field)
        .filter(|(&m, _)| m != 0)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance in mm between the foreground voxel centres.
///
/// `spacing` overrides the masks' own spacing for the physical scaling.
pub fn hausdorff_mm(a: &LabelMask, b: &LabelMask, spacing: [f64; 3]) -> Result<f64> {
    check_aligned(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("undefined Hausdorff distance: a mask is empty"));
    }
    let sp = crate::volumes::Spacing::new(spacing[0], spacing[1], spacing[2])?;
    let a = LabelMask::new(a.data().to_vec(), a.dims(), sp)?;
    let b = LabelMask::new(b.data().to_vec(), b.dims(), sp)?;
    let to_b = squared_distance_to(&b);
    let to_a = squared_distance_to(&a);
    Ok(directed_sq(&a, &to_b).max(directed_sq(&b, &to_a)).sqrt())
}

/// Foreground volume in cm³.
pub fn patv_cm3(mask: &LabelMask, spacing: [f64; 3]) -> Result<f64> {
    Ok(mask.count() as f64 * voxel_volume_mm3(spacing)? / 1000.0)
}

/// Compare a predicted mask against the reference.
pub fn evaluate(pred: &LabelMask, truth: &LabelMask) -> Result<EvalResult> {
    let dice = dice_score(pred, truth)?;
    let spacing = truth.spacing().0;
    let hausdorff_mm = if pred.is_empty() || truth.is_empty() {
        None
    } else {
        Some(hausdorff_mm(pred, truth, spacing)?)
    };
    Ok(EvalResult {
        dice,
        hausdorff_mm,
        patv_pred_cm3: patv_cm3(pred, spacing)?,
        patv_true_cm3: patv_cm3(truth, spacing)?,
    })
}

/// One row per case: `case_id,dice,hausdorff_mm,patv_pred_cm3,patv_true_cm3`.
///
/// An undefined Hausdorff distance is written as `NaN`.
pub fn write_eval_csv(rows: &[(String, EvalResult)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "case_id,dice,hausdorff_mm,patv_pred_cm3,patv_true_cm3").unwrap();
    for (id, r) in rows {
        let hd = r.hausdorff_mm.map_or("NaN".to_string(), |h| format!("{h:.6}"));
        writeln!(
            out,
            "{id},{:.6},{hd},{:.6},{:.6}",
            r.dice, r.patv_pred_cm3, r.patv_true_cm3
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parse a file written by [`write_eval_csv`].
pub fn read_eval_csv(path: impl AsRef<Path>) -> Result<Vec<(String, EvalResult)>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::format(format!("{}: bad numeric field {i} in {rec:?}", path.display())))
        };
        let hd = num(2)?;
        rows.push((
            rec.get(0).unwrap_or_default().to_string(),
            EvalResult {
                dice: num(1)?,
                hausdorff_mm: (!hd.is_nan()).then_some(hd),
                patv_pred_cm3: num(3)?,
                patv_true_cm3: num(4)?,
            },
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::Spacing;

    const CLINICAL_SPACING: [f64; 3] = [1.4, 1.4, 6.0];

    fn mask_with(dims: [usize; 3], pts: &[[usize; 3]]) -> LabelMask {
        let mut m = LabelMask::zeros(dims, Spacing(CLINICAL_SPACING)).unwrap();
        for p in pts {
            m.set(p[0], p[1], p[2], true);
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = mask_with([4, 4, 4], &[[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let b = mask_with([4, 4, 4], &[[3, 3, 3]]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        let e = mask_with([4, 4, 4], &[]);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);

        // |a| = |b| = 100 with 50 shared
        let dims = [10, 10, 2];
        let mut x = LabelMask::zeros(dims, Spacing(CLINICAL_SPACING)).unwrap();
        let mut y = x.clone();
        for i in 0..100 {
            x.set(i % 10, i / 10, 0, true);
        }
        for i in 50..150 {
            y.set(i % 10, (i / 10) % 10, i / 100, true);
        }
        assert_eq!(x.count(), 100);
        assert_eq!(y.count(), 100);
        assert_eq!(dice_score(&x, &y).unwrap(), 0.5);
    }

    #[test]
    fn misaligned_masks_are_rejected() {
        let a = mask_with([4, 4, 4], &[[0, 0, 0]]);
        let b = LabelMask::zeros([4, 4, 5], Spacing(CLINICAL_SPACING)).unwrap();
        assert!(matches!(dice_score(&a, &b), Err(Error::Domain(_))));
        assert!(matches!(hausdorff_mm(&a, &b, CLINICAL_SPACING), Err(Error::Domain(_))));
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask_with([4, 4, 4], &[[0, 0, 0], [2, 1, 3]]);
        assert_eq!(hausdorff_mm(&a, &a, CLINICAL_SPACING).unwrap(), 0.0);
        let p = mask_with([4, 4, 4], &[[0, 0, 0]]);
        let q = mask_with([4, 4, 4], &[[1, 0, 0]]);
        assert_eq!(hausdorff_mm(&p, &q, CLINICAL_SPACING).unwrap(), 1.4);
        let e = mask_with([4, 4, 4], &[]);
        assert!(matches!(hausdorff_mm(&p, &e, CLINICAL_SPACING), Err(Error::Domain(_))));
    }

    #[test]
    fn hausdorff_symmetric_and_uses_given_spacing() {
        let p = mask_with([5, 5, 5], &[[0, 0, 0], [4, 4, 0]]);
        let q = mask_with([5, 5, 5], &[[0, 0, 4]]);
        let h1 = hausdorff_mm(&p, &q, [1.0, 1.0, 1.0]).unwrap();
        let h2 = hausdorff_mm(&q, &p, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1, (16.0f64 + 16.0 + 16.0).sqrt());
        assert_eq!(hausdorff_mm(&p, &q, [1.0, 1.0, 2.0]).unwrap(), (16.0f64 + 16.0 + 64.0).sqrt());
    }

    #[test]
    fn patv_examples() {
        let e = mask_with([4, 4, 4], &[]);
        assert_eq!(patv_cm3(&e, CLINICAL_SPACING).unwrap(), 0.0);
        let dims = [10, 10, 10];
        let full = LabelMask::new(vec![1; 1000], dims, Spacing(CLINICAL_SPACING)).unwrap();
        assert!((patv_cm3(&full, CLINICAL_SPACING).unwrap() - 11.76).abs() < 1e-12);
    }

    #[test]
    fn patv_is_additive_over_disjoint_masks() {
        let a = mask_with([6, 6, 3], &[[0, 0, 0], [1, 2, 1], [5, 5, 2]]);
        let b = mask_with([6, 6, 3], &[[3, 3, 0], [4, 1, 1]]);
        let u = a.from_fn_like(|i| a.is_set(i) || b.is_set(i));
        let sum = patv_cm3(&a, CLINICAL_SPACING).unwrap() + patv_cm3(&b, CLINICAL_SPACING).unwrap();
        assert!((patv_cm3(&u, CLINICAL_SPACING).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn eval_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ("case_000".to_string(), EvalResult { dice: 0.75, hausdorff_mm: Some(12.5), patv_pred_cm3: 10.0, patv_true_cm3: 11.0 }),
            ("case_001".to_string(), EvalResult { dice: 1.0, hausdorff_mm: None, patv_pred_cm3: 0.0, patv_true_cm3: 0.0 }),
        ];
        let p = dir.path().join("eval.csv");
        write_eval_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("case_id,dice,hausdorff_mm,patv_pred_cm3,patv_true_cm3\n"));
        assert_eq!(read_eval_csv(&p).unwrap(), rows);
    }
}
