use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::correlation::{pearson, phi, Correlation};
use crate::stats::records::PatientRecord;
use crate::stats::regression::{logistic_fit, ols_fit, Design, ModelKind, RegressionReport, ALPHA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Sex,
    Age,
    Bmi,
    Patv,
    CvdDiagnosis,
    Deceased,
}

impl Variable {
    pub const REGRESSORS: [Variable; 4] = [Variable::Sex, Variable::Age, Variable::Bmi, Variable::Patv];
    pub const OUTCOMES: [Variable; 3] = [Variable::Patv, Variable::CvdDiagnosis, Variable::Deceased];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Sex => "sex",
            Variable::Age => "age",
            Variable::Bmi => "bmi",
            Variable::Patv => "patv",
            Variable::CvdDiagnosis => "cvd_diagnosis",
            Variable::Deceased => "deceased",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variable::Sex => "Sex",
            Variable::Age => "Age",
            Variable::Bmi => "BMI",
            Variable::Patv => "PATV",
            Variable::CvdDiagnosis => "CVD Diagnosis",
            Variable::Deceased => "Deceased",
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Variable::Sex | Variable::Deceased)
    }

    fn values(self, records: &[PatientRecord]) -> Vec<f64> {
        records
            .iter()
            .map(|r| match self {
                Variable::Sex => f64::from(r.sex),
                Variable::Age => r.age,
                Variable::Bmi => r.bmi,
                Variable::Patv => r.patv,
                Variable::CvdDiagnosis => f64::from(r.cvd_diagnosis),
                Variable::Deceased => f64::from(r.deceased),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScreenMethod {
    Pearson,
    Phi,
    PointBiserial,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Screen {
    pub regressor: Variable,
    pub method: ScreenMethod,
    /// `None` when the correlation is undefined (e.g. a constant series).
    pub correlation: Option<Correlation>,
    pub selected: bool,
}

#[derive(Debug)]
pub struct OutcomeAnalysis {
    pub outcome: Variable,
    pub screening: Vec<Screen>,
    pub fit: Result<RegressionReport>,
}

impl OutcomeAnalysis {
    pub fn selected(&self) -> Vec<Variable> {
        self.screening.iter().filter(|s| s.selected).map(|s| s.regressor).collect()
    }

    /// Regressors flagged significant in the multivariate fit.
    pub fn significant(&self) -> Vec<String> {
        match &self.fit {
            Ok(r) => r.regressors().filter(|c| c.significant).map(|c| c.name.clone()).collect(),
            Err(_) => Vec::new(),
        }
    }
}

fn screen(outcome: Variable, regressor: Variable, records: &[PatientRecord]) -> Screen {
    let (x, y) = (regressor.values(records), outcome.values(records));
    let (method, corr) = match (regressor.is_binary(), outcome.is_binary()) {
        (true, true) => {
            let bits = |v: &[f64]| v.iter().map(|&b| b as u8).collect::<Vec<_>>();
            (ScreenMethod::Phi, phi(&bits(&x), &bits(&y)))
        }
        (false, false) => (ScreenMethod::Pearson, pearson(&x, &y)),
        _ => (ScreenMethod::PointBiserial, pearson(&x, &y)),
    };
    let correlation = corr.ok();
    let selected = correlation.is_some_and(|c| c.p_value < ALPHA);
    Screen { regressor, method, correlation, selected }
}

/// Univariate screening at α = 0.01 followed by a multivariate fit per outcome
/// (OLS for PATV and CVD diagnosis, logistic for mortality).
pub fn run_analysis(records: &[PatientRecord]) -> Result<Vec<OutcomeAnalysis>> {
    if records.len() < 10 {
        return Err(Error::domain(format!("analysis needs at least 10 records, got {}", records.len())));
    }
    for r in records {
        r.validate()?;
    }
    let n = records.len();
    Ok(Variable::OUTCOMES
        .iter()
        .map(|&outcome| {
            let screening: Vec<Screen> = Variable::REGRESSORS
                .iter()
                .filter(|&&r| r != outcome)
                .map(|&r| screen(outcome, r, records))
                .collect();
            let cols: Vec<(Variable, Vec<f64>)> =
                screening.iter().filter(|s| s.selected).map(|s| (s.regressor, s.regressor.values(records))).collect();
            let named: Vec<(&str, &[f64])> = cols.iter().map(|(v, c)| (v.name(), c.as_slice())).collect();
            let fit = Design::with_intercept(&named, n).and_then(|d| {
                if outcome == Variable::Deceased {
                    let y: Vec<u8> = records.iter().map(|r| r.deceased).collect();
                    logistic_fit(&d, &y, outcome.name())
                } else {
                    ols_fit(&d, &outcome.values(records), outcome.name())
                }
            });
            OutcomeAnalysis { outcome, screening, fit }
        })
        .collect())
}

fn num(v: f64) -> String {
    if v != 0.0 && v.is_finite() && (v.abs() < 1e-4 || v.abs() >= 1e9) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Long-format CSV: one row per (outcome, candidate regressor or intercept).
pub fn report_csv(analyses: &[OutcomeAnalysis]) -> String {
    let mut s = String::from(
        "outcome,model,n,term,screen_method,screen_r,screen_p,status,coefficient,std_error,p_value,significant\n",
    );
    for a in analyses {
        let model = if a.outcome == Variable::Deceased { ModelKind::Logistic } else { ModelKind::Ols };
        let model = match model {
            ModelKind::Ols => "ols",
            ModelKind::Logistic => "logistic",
        };
        let n = a.fit.as_ref().map(|r| r.n.to_string()).unwrap_or_default();
        let fit_row = |term: &str| -> String {
            match &a.fit {
                Ok(r) => match r.get(term) {
                    Some(c) => format!(
                        "fitted,{},{},{},{}",
                        num(c.coefficient),
                        num(c.std_error),
                        num(c.p_value),
                        c.significant
                    ),
                    None => "excluded,,,,".to_string(),
                },
                Err(e) => format!("\"error: {}\",,,,", e.to_string().replace('"', "'")),
            }
        };
        let _ = writeln!(s, "{},{model},{n},intercept,,,,{}", a.outcome.name(), fit_row("intercept"));
        for sc in &a.screening {
            let (r, p) = sc.correlation.map(|c| (num(c.r), num(c.p_value))).unwrap_or_default();
            let method = match sc.method {
                ScreenMethod::Pearson => "pearson",
                ScreenMethod::Phi => "phi",
                ScreenMethod::PointBiserial => "point-biserial",
            };
            let tail = if sc.selected { fit_row(sc.regressor.name()) } else { "excluded,,,,".to_string() };
            let _ = writeln!(s, "{},{model},{n},{},{method},{r},{p},{tail}", a.outcome.name(), sc.regressor.name());
        }
    }
    s
}

/// Regressors down the side, outcomes across; `*` marks p < 0.01.
pub fn report_table(analyses: &[OutcomeAnalysis]) -> String {
    let width = 16;
    let mut s = String::new();
    let _ = write!(s, "{:<10}", "");
    for a in analyses {
        let _ = write!(s, "{:>width$}", a.outcome.label());
    }
    s.push('\n');
    for reg in Variable::REGRESSORS {
        let _ = write!(s, "{:<10}", reg.label());
        for a in analyses {
            let cell = if reg == a.outcome {
                "-".to_string()
            } else if !a.selected().contains(&reg) {
                "excluded".to_string()
            } else {
                match &a.fit {
                    Ok(r) => r
                        .get(reg.name())
                        .map(|c| format!("{:.3}{}", c.coefficient, if c.significant { "*" } else { "" }))
                        .unwrap_or_else(|| "excluded".into()),
                    Err(_) => "error".to_string(),
                }
            };
            let _ = write!(s, "{cell:>width$}");
        }
        s.push('\n');
    }
    for a in analyses {
        if let Err(e) = &a.fit {
            let _ = writeln!(s, "{}: {e}", a.outcome.label());
        }
    }
    let _ = writeln!(s, "* p < {ALPHA}");
    s
}

pub fn write_reports(analyses: &[OutcomeAnalysis], csv: impl AsRef<Path>, table: impl AsRef<Path>) -> Result<()> {
    let (csv, table) = (csv.as_ref(), table.as_ref());
    std::fs::write(csv, report_csv(analyses)).map_err(|e| Error::io(csv, e))?;
    std::fs::write(table, report_table(analyses)).map_err(|e| Error::io(table, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn null_cohort(n: usize, seed: u64) -> Vec<PatientRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| PatientRecord {
                case_id: format!("c{i}"),
                age: rng.random_range(30.0..80.0),
                sex: rng.random_range(0..2),
                bmi: rng.random_range(18.0..40.0),
                deceased: rng.random_range(0..2),
                cvd_diagnosis: rng.random_range(0..6),
                patv: rng.random_range(20.0..300.0),
            })
            .collect()
    }

    #[test]
    fn structure_has_three_outcomes_without_self_regression() {
        let a = run_analysis(&null_cohort(60, 1)).unwrap();
        assert_eq!(a.len(), 3);
        for o in &a {
            assert!(o.screening.iter().all(|s| s.regressor != o.outcome));
            if let Ok(r) = &o.fit {
                assert!(r.regressors().all(|c| c.name != o.outcome.name()));
            }
        }
        assert_eq!(a[2].screening.iter().find(|s| s.regressor == Variable::Sex).unwrap().method, ScreenMethod::Phi);
        assert_eq!(a[0].screening.iter().find(|s| s.regressor == Variable::Sex).unwrap().method, ScreenMethod::PointBiserial);
    }

    #[test]
    fn planted_effect_is_selected_and_rendered() {
        let mut recs = null_cohort(200, 2);
        for r in &mut recs {
            r.patv = 50.0 + 2.0 * r.age + (r.bmi - 29.0);
        }
        let a = run_analysis(&recs).unwrap();
        assert!(a[0].selected().contains(&Variable::Age));
        let table = report_table(&a);
        assert!(table.contains("excluded"));
        assert!(table.contains('*'));
        let csv = report_csv(&a);
        // header, then intercept + 3 or 4 candidates per outcome
        assert_eq!(csv.lines().count(), 1 + 4 + 5 + 5, "{csv}");
    }

    #[test]
    fn analysis_is_reproducible() {
        let recs = null_cohort(50, 3);
        let a = report_csv(&run_analysis(&recs).unwrap());
        let b = report_csv(&run_analysis(&recs).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_records() {
        assert!(run_analysis(&null_cohort(9, 4)).is_err());
    }
}
