use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One patient: demographics, outcomes and measured fat volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub case_id: String,
    pub age: f64,
    /// 0 = male, 1 = female.
    pub sex: u8,
    pub bmi: f64,
    pub deceased: u8,
    pub cvd_diagnosis: u32,
    /// cm³.
    pub patv: f64,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::domain(format!("{}: {what}", self.case_id)));
        if !(self.age > 0.0) || !self.age.is_finite() {
            return bad("age must be positive");
        }
        if !(self.bmi > 0.0) || !self.bmi.is_finite() {
            return bad("bmi must be positive");
        }
        if self.sex > 1 || self.deceased > 1 {
            return bad("sex and deceased must be 0 or 1");
        }
        if !(self.patv >= 0.0) || !self.patv.is_finite() {
            return bad("patv must be non-negative");
        }
        Ok(())
    }
}

/// Clinical columns as stored on disk (PATV lives in a separate file).
#[derive(Debug, Serialize, Deserialize)]
struct ClinicalRow {
    case_id: String,
    age: f64,
    sex: u8,
    bmi: f64,
    deceased: u8,
    cvd_diagnosis: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct PatvRow {
    case_id: String,
    patv_cm3: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => Error::format(format!("{}: {e}", path.display())),
    }
}

fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `case_id,age,sex,bmi,deceased,cvd_diagnosis`.
pub fn write_clinical_csv(records: &[PatientRecord], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        records.iter().map(|r| ClinicalRow {
            case_id: r.case_id.clone(),
            age: r.age,
            sex: r.sex,
            bmi: r.bmi,
            deceased: r.deceased,
            cvd_diagnosis: r.cvd_diagnosis,
        }),
    )
}

/// Writes `case_id,patv_cm3`.
pub fn write_patv_csv(rows: &[(String, f64)], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        rows.iter().map(|(id, v)| PatvRow { case_id: id.clone(), patv_cm3: *v }),
    )
}

pub fn read_patv_csv(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    Ok(read_rows::<PatvRow>(path.as_ref())?.into_iter().map(|r| (r.case_id, r.patv_cm3)).collect())
}

/// Joins the clinical CSV with a PATV CSV on `case_id`.
pub fn read_records(clinical: impl AsRef<Path>, patv: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let rows: Vec<ClinicalRow> = read_rows(clinical.as_ref())?;
    let volumes: HashMap<String, f64> = read_patv_csv(patv.as_ref())?.into_iter().collect();
    rows.into_iter()
        .map(|r| {
            let patv = *volumes
                .get(&r.case_id)
                .ok_or_else(|| Error::format(format!("no PATV row for case {}", r.case_id)))?;
            let rec = PatientRecord {
                case_id: r.case_id,
                age: r.age,
                sex: r.sex,
                bmi: r.bmi,
                deceased: r.deceased,
                cvd_diagnosis: r.cvd_diagnosis,
                patv,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}
