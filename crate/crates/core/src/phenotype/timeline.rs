//! Four-class disease labels from diagnosis/scan/follow-up time points.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("last record date {t_h} precedes the scan date {t_s}")]
    MalformedRecord { t_s: NaiveDate, t_h: NaiveDate },
}

/// Time points driving the 5-year prediction label for one (patient,
/// disease) pair: first diagnosis, scan date, prediction horizon, and the
/// last date of record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseTimeline {
    pub first_diagnosis: Option<NaiveDate>,
    pub scan_date: NaiveDate,
    pub horizon: NaiveDate,
    pub last_record: NaiveDate,
}

/// 5-year horizon: scan date plus 60 months (clamped to month end).
pub fn five_year_horizon(scan_date: NaiveDate) -> NaiveDate {
    scan_date
        .checked_add_months(chrono::Months::new(60))
        .expect("date within chrono range")
}

impl DiseaseTimeline {
    /// Timeline with the standard 5-year horizon.
    pub fn new(
        first_diagnosis: Option<NaiveDate>,
        scan_date: NaiveDate,
        last_record: NaiveDate,
    ) -> Self {
        DiseaseTimeline {
            first_diagnosis,
            scan_date,
            horizon: five_year_horizon(scan_date),
            last_record,
        }
    }
}

/// The four 5-year prediction classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiseaseLabel {
    Healthy = 0,
    Progressor = 1,
    Progressed = 2,
    Censored = 3,
}

impl DiseaseLabel {
    pub fn class_index(self) -> usize {
        self as usize
    }
}

/// Classify one (patient, disease) record:
/// - Progressed: diagnosed on or before the scan date.
/// - Progressor: diagnosed after the scan date but within the horizon.
/// - Healthy: not diagnosed within the horizon and followed up through it.
/// - Censored: not diagnosed within follow-up that ends before the horizon.
pub fn assign_disease_label(t: &DiseaseTimeline) -> Result<DiseaseLabel, TimelineError> {
    if t.last_record < t.scan_date {
        return Err(TimelineError::MalformedRecord {
            t_s: t.scan_date,
            t_h: t.last_record,
        });
    }
    match t.first_diagnosis {
        Some(t_d) if t_d <= t.scan_date => Ok(DiseaseLabel::Progressed),
        Some(t_d) if t_d <= t.horizon => Ok(DiseaseLabel::Progressor),
        // Diagnosed after the horizon: healthy within the window, provided
        // follow-up reaches the horizon — the diagnosis itself implies it did.
        Some(_) => Ok(DiseaseLabel::Healthy),
        None if t.last_record >= t.horizon => Ok(DiseaseLabel::Healthy),
        None => Ok(DiseaseLabel::Censored),
    }
}
