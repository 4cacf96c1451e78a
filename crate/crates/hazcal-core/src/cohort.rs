//! Cohort data: per-subject survival records with covariates, plus CSV I/O.
//!
//! The CSV grammar (header mandatory) is
//! `entry_age,exit_age,event,<covariate_1>,...,<covariate_p>` with
//! `event` in `{0, 1, 2}` (censored / event of interest / competing event)
//! and nonnegative decimal ages. See `docs/formats.md` in the repository
//! root for the full description.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed outcome status of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum EventKind {
    Censored = 0,
    EventOfInterest = 1,
    Competing = 2,
}

impl EventKind {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::Censored),
            1 => Ok(Self::EventOfInterest),
            2 => Ok(Self::Competing),
            other => Err(Error::InvalidInput(format!(
                "event code must be 0, 1, or 2; got {other}"
            ))),
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// One subject: delayed-entry age `L`, exit age `X = min(T, C)`, outcome
/// status, and the covariate vector `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub entry_age: f64,
    pub exit_age: f64,
    pub event: EventKind,
    pub covariates: Vec<f64>,
}

impl SubjectRecord {
    pub fn new(entry_age: f64, exit_age: f64, event: EventKind, covariates: Vec<f64>) -> Self {
        Self {
            entry_age,
            exit_age,
            event,
            covariates,
        }
    }

    /// At-risk indicator `Y(t) = I(L < t <= X)`.
    pub fn at_risk(&self, t: f64) -> bool {
        self.entry_age < t && t <= self.exit_age
    }
}

/// An i.i.d. sample of subjects sharing a covariate dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<SubjectRecord>,
    pub covariate_names: Vec<String>,
}

impl Cohort {
    pub fn new(subjects: Vec<SubjectRecord>, covariate_names: Vec<String>) -> Result<Self> {
        let cohort = Self {
            subjects,
            covariate_names,
        };
        cohort.validate()?;
        Ok(cohort)
    }

    fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::InvalidInput("cohort must contain at least one subject".into()));
        }
        let p = self.covariate_names.len();
        for (i, s) in self.subjects.iter().enumerate() {
            if s.covariates.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "subject {i} has {} covariates, expected {p}",
                    s.covariates.len()
                )));
            }
            if !(s.exit_age >= s.entry_age && s.entry_age >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "subject {i}: ages must satisfy 0 <= entry ({}) <= exit ({})",
                    s.entry_age, s.exit_age
                )));
            }
            if s.covariates.iter().any(|z| !z.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "subject {i} has a non-finite covariate"
                )));
            }
        }
        Ok(())
    }

    /// Number of subjects.
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Covariate dimension.
    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn events_of_interest(&self) -> usize {
        self.subjects
            .iter()
            .filter(|s| s.event == EventKind::EventOfInterest)
            .count()
    }

    /// Linear predictors `beta' Z_i` for every subject.
    pub fn linear_predictors(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.p() {
            return Err(Error::DimensionMismatch(format!(
                "beta has length {}, expected {}",
                beta.len(),
                self.p()
            )));
        }
        Ok(self
            .subjects
            .iter()
            .map(|s| dot(beta, &s.covariates))
            .collect())
    }

    /// A copy in which competing events are relabelled as the event of
    /// interest and events of interest as censored. Feeding the result to
    /// [`crate::survival::nelson_aalen`] estimates the competing-event
    /// cumulative hazard.
    pub fn with_competing_as_event(&self) -> Self {
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let event = match s.event {
                    EventKind::Competing => EventKind::EventOfInterest,
                    EventKind::EventOfInterest => EventKind::Censored,
                    EventKind::Censored => EventKind::Censored,
                };
                SubjectRecord { event, ..s.clone() }
            })
            .collect();
        Self {
            subjects,
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Read a cohort from `entry_age,exit_age,event,<covariates...>` CSV.
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Csv {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let fields: Vec<&str> = headers.iter().collect();
        if fields.len() < 3 || fields[0] != "entry_age" || fields[1] != "exit_age" || fields[2] != "event"
        {
            return Err(Error::Csv {
                line: 1,
                message: format!(
                    "header must start with entry_age,exit_age,event; got {:?}",
                    fields.join(",")
                ),
            });
        }
        let covariate_names: Vec<String> = fields[3..].iter().map(|s| s.to_string()).collect();
        let p = covariate_names.len();

        let mut subjects = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            let line = idx + 2; // 1-based, after the header
            let record = record.map_err(|e| Error::Csv {
                line,
                message: e.to_string(),
            })?;
            if record.len() != 3 + p {
                return Err(Error::Csv {
                    line,
                    message: format!("expected {} fields, got {}", 3 + p, record.len()),
                });
            }
            let num = |j: usize, name: &str| -> Result<f64> {
                record[j].trim().parse::<f64>().map_err(|_| Error::Csv {
                    line,
                    message: format!("field `{name}` is not a number: {:?}", &record[j]),
                })
            };
            let entry_age = num(0, "entry_age")?;
            let exit_age = num(1, "exit_age")?;
            let code = record[2].trim().parse::<u8>().map_err(|_| Error::Csv {
                line,
                message: format!("field `event` must be 0, 1, or 2: {:?}", &record[2]),
            })?;
            let event = EventKind::from_code(code).map_err(|e| Error::Csv {
                line,
                message: e.to_string(),
            })?;
            let mut covariates = Vec::with_capacity(p);
            for (j, name) in covariate_names.iter().enumerate() {
                covariates.push(num(3 + j, name)?);
            }
            subjects.push(SubjectRecord::new(entry_age, exit_age, event, covariates));
        }

        Self::new(subjects, covariate_names).map_err(|e| match e {
            Error::Csv { .. } => e,
            other => Error::Csv {
                line: 1,
                message: other.to_string(),
            },
        })
    }

    pub fn to_csv_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["entry_age".to_string(), "exit_age".into(), "event".into()];
        header.extend(self.covariate_names.iter().cloned());
        wtr.write_record(&header)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for s in &self.subjects {
            let mut row = vec![
                format!("{}", s.entry_age),
                format!("{}", s.exit_age),
                s.event.to_string(),
            ];
            row.extend(s.covariates.iter().map(|z| format!("{z}")));
            wtr.write_record(&row)
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_csv() -> &'static str {
        "entry_age,exit_age,event,age,smoker\n0,5.5,1,62.1,1\n0,7,0,55.0,0\n2,9,2,61.5,1\n"
    }

    #[test]
    fn csv_round_trip() {
        let cohort = Cohort::from_csv_reader(toy_csv().as_bytes()).unwrap();
        assert_eq!(cohort.n(), 3);
        assert_eq!(cohort.p(), 2);
        assert_eq!(cohort.covariate_names, vec!["age", "smoker"]);
        assert_eq!(cohort.subjects[0].event, EventKind::EventOfInterest);
        assert_eq!(cohort.subjects[2].entry_age, 2.0);

        let mut buf = Vec::new();
        cohort.to_csv_writer(&mut buf).unwrap();
        let again = Cohort::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(cohort, again);
    }

    #[test]
    fn bad_header_is_an_error_naming_line_one() {
        let err = Cohort::from_csv_reader("start,stop,status\n0,1,0\n".as_bytes()).unwrap_err();
        match err {
            Error::Csv { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("entry_age"), "{message}");
            }
            other => panic!("expected Csv error, got {other:?}"),
        }
    }

    #[test]
    fn bad_event_code_names_its_line() {
        let text = "entry_age,exit_age,event,z\n0,1,1,0.5\n0,2,7,0.1\n";
        let err = Cohort::from_csv_reader(text.as_bytes()).unwrap_err();
        match err {
            Error::Csv { line, .. } => assert_eq!(line, 3),
            other => panic!("expected Csv error, got {other:?}"),
        }
    }

    #[test]
    fn exit_before_entry_rejected() {
        let subj = SubjectRecord::new(5.0, 3.0, EventKind::Censored, vec![0.0]);
        assert!(Cohort::new(vec![subj], vec!["z".into()]).is_err());
    }

    #[test]
    fn competing_relabel() {
        let cohort = Cohort::from_csv_reader(toy_csv().as_bytes()).unwrap();
        let flipped = cohort.with_competing_as_event();
        assert_eq!(flipped.subjects[0].event, EventKind::Censored);
        assert_eq!(flipped.subjects[1].event, EventKind::Censored);
        assert_eq!(flipped.subjects[2].event, EventKind::EventOfInterest);
    }
}
