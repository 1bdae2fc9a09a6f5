//! Dataset manifest: one JSONL row per encounter pairing a volume, a report
//! record, diagnosis codes, and the timeline fields that drive labels.

use crate::phenotype::IcdCode;
use crate::train::Split;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {0} malformed: {1}")]
    BadRow(usize, String),
    #[error("patient {0} appears in multiple splits")]
    InconsistentSplit(String),
    #[error("row {row}: {kind} path `{path}` does not resolve")]
    MissingPath {
        row: usize,
        kind: &'static str,
        path: String,
    },
}

/// One encounter: paths are stored relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub encounter_id: String,
    pub volume_path: String,
    pub report_path: String,
    pub icd_codes: Vec<IcdCode>,
    #[serde(default)]
    pub disease_onsets: BTreeMap<String, NaiveDate>,
    pub scan_date: NaiveDate,
    pub last_record_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Read a JSONL manifest. Split labels, when present, must agree within each
/// patient; paths are checked against the manifest's directory when
/// `check_paths` is set.
pub fn read_manifest(path: &Path, check_paths: bool) -> Result<Vec<ManifestRow>, ManifestError> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    let mut split_of: BTreeMap<String, Split> = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow =
            serde_json::from_str(&line).map_err(|e| ManifestError::BadRow(i + 1, e.to_string()))?;
        if let Some(split) = row.split {
            match split_of.get(&row.patient_id) {
                Some(&prev) if prev != split => {
                    return Err(ManifestError::InconsistentSplit(row.patient_id.clone()))
                }
                _ => {
                    split_of.insert(row.patient_id.clone(), split);
                }
            }
        }
        if check_paths {
            for (kind, p) in [("volume", &row.volume_path), ("report", &row.report_path)] {
                if !base.join(p).exists() {
                    return Err(ManifestError::MissingPath {
                        row: i + 1,
                        kind,
                        path: p.clone(),
                    });
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Write rows as JSONL (one compact JSON object per line).
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), ManifestError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| ManifestError::BadRow(0, e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// A report record as stored in the report corpus JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRecord {
    pub report_id: String,
    pub findings: String,
    #[serde(default)]
    pub impressions: String,
}

/// Read a report corpus (JSONL of [`ReportRecord`]) into an id-keyed map.
pub fn read_reports(path: &Path) -> Result<BTreeMap<String, ReportRecord>, ManifestError> {
    let file = std::fs::File::open(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReportRecord =
            serde_json::from_str(&line).map_err(|e| ManifestError::BadRow(i + 1, e.to_string()))?;
        out.insert(rec.report_id.clone(), rec);
    }
    Ok(out)
}

pub fn write_reports(path: &Path, records: &[ReportRecord]) -> Result<(), ManifestError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| ManifestError::BadRow(0, e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phenotype::IcdSystem;

    fn row(pid: &str, enc: &str, split: Option<Split>) -> ManifestRow {
        ManifestRow {
            patient_id: pid.into(),
            encounter_id: enc.into(),
            volume_path: format!("volumes/{enc}.raw"),
            report_path: "reports.jsonl".into(),
            icd_codes: vec![IcdCode {
                system: IcdSystem::Icd10,
                code: "I10".into(),
            }],
            disease_onsets: BTreeMap::new(),
            scan_date: NaiveDate::from_ymd_opt(2015, 3, 2).unwrap(),
            last_record_date: NaiveDate::from_ymd_opt(2021, 3, 2).unwrap(),
            split,
        }
    }

    #[test]
    fn round_trip_without_path_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let rows = vec![row("p1", "e1", Some(Split::Train)), row("p2", "e2", None)];
        write_manifest(&path, &rows).unwrap();
        let back = read_manifest(&path, false).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].patient_id, "p1");
        assert_eq!(back[0].split, Some(Split::Train));
        assert_eq!(back[1].split, None);
    }

    #[test]
    fn inconsistent_split_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let rows = vec![
            row("p1", "e1", Some(Split::Train)),
            row("p1", "e2", Some(Split::Test)),
        ];
        write_manifest(&path, &rows).unwrap();
        assert!(matches!(
            read_manifest(&path, false),
            Err(ManifestError::InconsistentSplit(_))
        ));
    }

    #[test]
    fn missing_paths_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &[row("p1", "e1", None)]).unwrap();
        assert!(matches!(
            read_manifest(&path, true),
            Err(ManifestError::MissingPath { .. })
        ));
    }

    #[test]
    fn report_corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reports.jsonl");
        let recs = vec![ReportRecord {
            report_id: "e1".into(),
            findings: "LIVER: normal.".into(),
            impressions: "Normal exam.".into(),
        }];
        write_reports(&path, &recs).unwrap();
        let map = read_reports(&path).unwrap();
        assert_eq!(map["e1"].findings, "LIVER: normal.");
    }
}
