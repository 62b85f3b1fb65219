//! Trial data model: one record per subject carrying the arm, the first
//! non-fatal event (if observed), death (if observed) and the last known
//! follow-up time, plus CSV ingestion and serialization.
//!
//! Censoring is never stored separately. A subject who is alive at the end of
//! follow-up simply has no `death_time`; `followup_time` is `min(Y, C, tau)`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Treatment assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treated];

    pub fn from_indicator(z: u8) -> Option<Arm> {
        match z {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treated),
            _ => None,
        }
    }

    pub fn indicator(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn index(self) -> usize {
        self.indicator() as usize
    }

    /// The counterfactual arm.
    pub fn other(self) -> Arm {
        match self {
            Arm::Control => Arm::Treated,
            Arm::Treated => Arm::Control,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub arm: Arm,
    pub covariates: Vec<f64>,
    /// Observed first non-fatal event time.
    pub event_time: Option<f64>,
    /// Observed death time; equals `followup_time` when present.
    pub death_time: Option<f64>,
    pub followup_time: f64,
}

impl SubjectRecord {
    pub fn new(
        id: impl Into<String>,
        arm: Arm,
        followup_time: f64,
        event_time: Option<f64>,
        died: bool,
    ) -> Self {
        SubjectRecord {
            id: id.into(),
            arm,
            covariates: Vec::new(),
            event_time,
            death_time: died.then_some(followup_time),
            followup_time,
        }
    }

    pub fn with_covariates(mut self, covariates: Vec<f64>) -> Self {
        self.covariates = covariates;
        self
    }

    pub fn died(&self) -> bool {
        self.death_time.is_some()
    }

    pub fn had_event(&self) -> bool {
        self.event_time.is_some()
    }

    /// Observed first event time `E = min(T, Y)` and whether it was observed.
    pub fn first_event(&self) -> (f64, bool) {
        match (self.event_time, self.death_time) {
            (Some(t), _) => (t, true),
            (None, Some(y)) => (y, true),
            (None, None) => (self.followup_time, false),
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.followup_time) {
            return Err(format!("followup_time {} must be finite and >= 0", self.followup_time));
        }
        if let Some(t) = self.event_time {
            if !finite_nonneg(t) {
                return Err(format!("event_time {t} must be finite and >= 0"));
            }
            if t > self.followup_time {
                return Err(format!(
                    "event_time {t} exceeds followup_time {}",
                    self.followup_time
                ));
            }
        }
        if let Some(y) = self.death_time {
            if y != self.followup_time {
                return Err(format!(
                    "death_time {y} must equal followup_time {}",
                    self.followup_time
                ));
            }
        }
        if let Some(x) = self.covariates.iter().find(|x| !x.is_finite()) {
            return Err(format!("non-finite covariate {x}"));
        }
        Ok(())
    }
}

/// A validated, immutable collection of subject records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    covariate_dim: usize,
}

/// Distinct non-fatal event time with the records (by index) whose event
/// occurred exactly then.
#[derive(Debug, Clone, PartialEq)]
pub struct EventGroup {
    pub time: f64,
    pub subjects: Vec<usize>,
}

impl Dataset {
    /// Validates record invariants, id uniqueness and covariate width.
    pub fn new(records: Vec<SubjectRecord>) -> Result<Self> {
        let covariate_dim = records.first().map_or(0, |r| r.covariates.len());
        Self::with_covariate_dim(records, covariate_dim)
    }

    pub fn with_covariate_dim(records: Vec<SubjectRecord>, covariate_dim: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let row = i + 1;
            r.check().map_err(|message| Error::InvalidRow { row, message })?;
            if r.covariates.len() != covariate_dim {
                return Err(Error::InvalidRow {
                    row,
                    message: format!(
                        "expected {covariate_dim} covariates, found {}",
                        r.covariates.len()
                    ),
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidRow {
                    row,
                    message: format!("duplicate subject id {:?}", r.id),
                });
            }
        }
        Ok(Dataset {
            records,
            covariate_dim,
        })
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    /// Length of the regression vector: treatment indicator plus covariates.
    pub fn design_dim(&self) -> usize {
        1 + self.covariate_dim
    }

    /// Regression vector `(z, x_1, ..., x_p)` of record `i`.
    pub fn design_row(&self, i: usize) -> Vec<f64> {
        let r = &self.records[i];
        let mut z = Vec::with_capacity(self.design_dim());
        z.push(f64::from(r.arm.indicator()));
        z.extend_from_slice(&r.covariates);
        z
    }

    pub fn arm_size(&self, arm: Arm) -> usize {
        self.records.iter().filter(|r| r.arm == arm).count()
    }

    pub fn require_both_arms(&self) -> Result<()> {
        for arm in Arm::BOTH {
            if self.arm_size(arm) == 0 {
                return Err(Error::EmptyArm(arm.indicator()));
            }
        }
        Ok(())
    }

    pub fn n_events(&self) -> usize {
        self.records.iter().filter(|r| r.had_event()).count()
    }

    pub fn n_deaths(&self) -> usize {
        self.records.iter().filter(|r| r.died()).count()
    }

    /// Distinct observed non-fatal event times in increasing order, with ties
    /// grouped in record order.
    pub fn event_times(&self) -> Vec<EventGroup> {
        let mut events: Vec<(f64, usize)> = self
            .records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.event_time.map(|t| (t, i)))
            .collect();
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut groups: Vec<EventGroup> = Vec::new();
        for (t, i) in events {
            match groups.last_mut() {
                Some(g) if g.time == t => g.subjects.push(i),
                _ => groups.push(EventGroup {
                    time: t,
                    subjects: vec![i],
                }),
            }
        }
        groups
    }

    /// Whether record `i` belongs to the at-risk set at `t`: still under
    /// observation (`followup > t`) and free of the non-fatal event before
    /// `t` (`event >= t`). A subject whose event is exactly at `t` is always
    /// included, even if follow-up ends at that same instant.
    pub fn at_risk(&self, i: usize, t: f64) -> bool {
        let r = &self.records[i];
        match r.event_time {
            Some(e) if e == t => true,
            Some(e) => e > t && r.followup_time > t,
            None => r.followup_time > t,
        }
    }

    /// Indices of the at-risk set at `t`.
    pub fn risk_set(&self, t: f64) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.at_risk(i, t)).collect()
    }

    /// Same subjects under fresh ids `"{prefix}{k}"`, one per position.
    pub fn resample(&self, indices: &[usize], prefix: &str) -> Dataset {
        let records = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| SubjectRecord {
                id: format!("{prefix}{k}"),
                ..self.records[i].clone()
            })
            .collect();
        Dataset {
            records,
            covariate_dim: self.covariate_dim,
        }
    }
}

const FIXED_COLUMNS: [&str; 6] = [
    "subject_id",
    "arm",
    "followup_time",
    "event_time",
    "event_status",
    "death_status",
];

fn parse_f64(field: &str, name: &str, row: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::InvalidRow {
        row,
        message: format!("{name}: {field:?} is not a number"),
    })
}

fn parse_flag(field: &str, name: &str, row: usize) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::InvalidRow {
            row,
            message: format!("{name}: expected 0 or 1, found {other:?}"),
        }),
    }
}

/// Parses the trial CSV layout. Row numbers in errors count data rows from 1.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < FIXED_COLUMNS.len()
        || headers.iter().zip(FIXED_COLUMNS).any(|(h, want)| h != want)
    {
        return Err(Error::InvalidData(format!(
            "header must start with {}",
            FIXED_COLUMNS.join(",")
        )));
    }
    let covariate_dim = headers.len() - FIXED_COLUMNS.len();

    let mut records = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| Error::InvalidRow {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != headers.len() {
            return Err(Error::InvalidRow {
                row,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let arm_flag = parse_flag(&rec[1], "arm", row)?;
        let arm = if arm_flag { Arm::Treated } else { Arm::Control };
        let followup_time = parse_f64(&rec[2], "followup_time", row)?;
        let event_status = parse_flag(&rec[4], "event_status", row)?;
        let event_time = match (rec[3].trim().is_empty(), event_status) {
            (true, false) => None,
            (false, true) => Some(parse_f64(&rec[3], "event_time", row)?),
            (true, true) => {
                return Err(Error::InvalidRow {
                    row,
                    message: "event_status is 1 but event_time is empty".into(),
                })
            }
            (false, false) => {
                return Err(Error::InvalidRow {
                    row,
                    message: "event_time given but event_status is 0".into(),
                })
            }
        };
        let died = parse_flag(&rec[5], "death_status", row)?;
        let covariates = (FIXED_COLUMNS.len()..rec.len())
            .map(|c| parse_f64(&rec[c], &headers[c], row))
            .collect::<Result<Vec<_>>>()?;
        records.push(
            SubjectRecord::new(&rec[0], arm, followup_time, event_time, died)
                .with_covariates(covariates),
        );
    }
    Dataset::with_covariate_dim(records, covariate_dim)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_dataset(file)
}

pub fn write_dataset<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=ds.covariate_dim).map(|k| format!("cov_{k}")));
    wtr.write_record(&header)?;
    for r in &ds.records {
        let mut row = vec![
            r.id.clone(),
            r.arm.indicator().to_string(),
            r.followup_time.to_string(),
            r.event_time.map(|t| t.to_string()).unwrap_or_default(),
            u8::from(r.had_event()).to_string(),
            u8::from(r.died()).to_string(),
        ];
        row.extend(r.covariates.iter().map(|x| x.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_dataset(ds, file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, arm: Arm, d: f64, e: Option<f64>, died: bool) -> SubjectRecord {
        SubjectRecord::new(id, arm, d, e, died)
    }

    #[test]
    fn loads_two_rows() {
        let csv = "subject_id,arm,followup_time,event_time,event_status,death_status\n\
                   a,0,2.5,1.0,1,0\n\
                   b,1,3,,0,1\n";
        let ds = read_dataset(csv.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records()[0].event_time, Some(1.0));
        assert_eq!(ds.records()[1].death_time, Some(3.0));
        assert_eq!(ds.records()[1].arm, Arm::Treated);
    }

    #[test]
    fn event_after_followup_names_row() {
        let csv = "subject_id,arm,followup_time,event_time,event_status,death_status\n\
                   a,0,2.5,1.0,1,0\n\
                   b,1,3,4,1,0\n";
        match read_dataset(csv.as_bytes()) {
            Err(Error::InvalidRow { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("exceeds"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_only_infers_covariates() {
        let csv = "subject_id,arm,followup_time,event_time,event_status,death_status,cov_1,cov_2\n";
        let ds = read_dataset(csv.as_bytes()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.covariate_dim(), 2);
    }

    #[test]
    fn rejects_duplicates_and_bad_numbers() {
        let dup = "subject_id,arm,followup_time,event_time,event_status,death_status\n\
                   a,0,1,,0,0\na,1,1,,0,0\n";
        assert!(matches!(
            read_dataset(dup.as_bytes()),
            Err(Error::InvalidRow { row: 2, .. })
        ));
        let bad = "subject_id,arm,followup_time,event_time,event_status,death_status\n\
                   a,0,xyz,,0,0\n";
        assert!(matches!(
            read_dataset(bad.as_bytes()),
            Err(Error::InvalidRow { row: 1, .. })
        ));
    }

    #[test]
    fn event_groups_sorted_with_ties() {
        let ds = Dataset::new(vec![
            rec("a", Arm::Control, 5.0, Some(2.0), false),
            rec("b", Arm::Treated, 5.0, Some(1.0), false),
            rec("c", Arm::Treated, 5.0, Some(2.0), false),
        ])
        .unwrap();
        let g = ds.event_times();
        assert_eq!(g.len(), 2);
        assert_eq!((g[0].time, g[0].subjects.clone()), (1.0, vec![1]));
        assert_eq!((g[1].time, g[1].subjects.clone()), (2.0, vec![0, 2]));

        let none = Dataset::new(vec![rec("a", Arm::Control, 5.0, None, false)]).unwrap();
        assert!(none.event_times().is_empty());
    }

    #[test]
    fn risk_set_boundaries() {
        let ds = Dataset::new(vec![
            rec("a", Arm::Control, 3.0, Some(2.0), false),
            rec("b", Arm::Treated, 2.0, None, false),
            rec("c", Arm::Treated, 4.0, None, true),
        ])
        .unwrap();
        assert_eq!(ds.risk_set(0.5), vec![0, 1, 2]);
        // event exactly at t stays in; follow-up ending at t drops out
        assert_eq!(ds.risk_set(2.0), vec![0, 2]);
    }

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::new(vec![
            rec("a", Arm::Control, 3.25, Some(2.0), false).with_covariates(vec![1.5]),
            rec("b", Arm::Treated, 2.0, None, true).with_covariates(vec![-0.1]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
    }
}
