//! Diagnosis-code phenotyping: ICD→phecode mapping with hierarchical label
//! expansion, phenotype grouping by exclusion ranges, and the four-class
//! disease timeline labels used for 5-year prediction.
//!
//! Phecodes are decimal strings with at most two fractional digits; the
//! hierarchy is realized by digit truncation ("008.52" → "008.5" → "008").

mod timeline;

pub use timeline::{assign_disease_label, DiseaseLabel, DiseaseTimeline, TimelineError};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhecodeError {
    #[error("phecode `{0}` is not a decimal code with at most 2 fractional digits")]
    BadPhecode(String),
    #[error("phecode `{0}` is mapped from ICD but missing from the phecode list")]
    UnlistedPhecode(String),
    #[error("exclusion ranges [{0:.2}, {1:.2}) and [{2:.2}, {3:.2}) overlap")]
    OverlappingRanges(f64, f64, f64, f64),
    #[error("table file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("table csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("table parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Coding system of a diagnosis code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IcdSystem {
    #[serde(rename = "ICD9")]
    Icd9,
    #[serde(rename = "ICD10")]
    Icd10,
}

/// A diagnosis code in canonical dotted form, e.g. ICD10 "E11.9".
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IcdCode {
    pub system: IcdSystem,
    pub code: String,
}

/// Numeric value and fractional-digit count of a phecode string.
fn parse_phecode(p: &str) -> Result<(f64, usize), PhecodeError> {
    let bad = || PhecodeError::BadPhecode(p.to_string());
    let (int_part, frac_part) = match p.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (p, None),
    };
    if int_part.is_empty() || !int_part.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let n_frac = match frac_part {
        Some(f) => {
            if f.is_empty() || f.len() > 2 || !f.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            f.len()
        }
        None => 0,
    };
    let value: f64 = p.parse().map_err(|_| bad())?;
    Ok((value, n_frac))
}

/// Drop the last fractional digit: "008.52" → "008.5", "008.5" → "008".
/// Returns `None` for codes with no fractional part.
fn truncate_phecode(p: &str) -> Option<String> {
    let (int_part, frac) = p.split_once('.')?;
    if frac.len() <= 1 {
        Some(int_part.to_string())
    } else {
        Some(format!("{int_part}.{}", &frac[..frac.len() - 1]))
    }
}

/// ICD→phecode mapping plus the phecode list and grouping ranges.
#[derive(Debug, Clone, Default)]
pub struct PhecodeTable {
    icd_to_phecode: HashMap<IcdCode, String>,
    phecodes: Vec<String>,
    index: HashMap<String, usize>,
    /// Exclusion range per phecode, `[lo, hi)` in numeric phecode space.
    exclusion_ranges: HashMap<String, (f64, f64)>,
}

impl PhecodeTable {
    pub fn new(
        icd_to_phecode: impl IntoIterator<Item = (IcdCode, String)>,
        phecodes: impl IntoIterator<Item = String>,
        exclusion_ranges: impl IntoIterator<Item = (String, (f64, f64))>,
    ) -> Result<Self, PhecodeError> {
        let phecodes: Vec<String> = phecodes.into_iter().collect();
        let mut index = HashMap::with_capacity(phecodes.len());
        for (i, p) in phecodes.iter().enumerate() {
            parse_phecode(p)?;
            index.insert(p.clone(), i);
        }
        let icd_to_phecode: HashMap<IcdCode, String> = icd_to_phecode.into_iter().collect();
        for p in icd_to_phecode.values() {
            if !index.contains_key(p) {
                return Err(PhecodeError::UnlistedPhecode(p.clone()));
            }
        }
        let exclusion_ranges: HashMap<String, (f64, f64)> =
            exclusion_ranges.into_iter().collect();
        Ok(PhecodeTable {
            icd_to_phecode,
            phecodes,
            index,
            exclusion_ranges,
        })
    }

    pub fn len(&self) -> usize {
        self.phecodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phecodes.is_empty()
    }

    pub fn phecodes(&self) -> &[String] {
        &self.phecodes
    }

    pub fn index_of(&self, phecode: &str) -> Option<usize> {
        self.index.get(phecode).copied()
    }

    pub fn map_icd(&self, code: &IcdCode) -> Option<&str> {
        self.icd_to_phecode.get(code).map(|s| s.as_str())
    }

    /// Load from two CSV files: mapping rows `(system, icd_code, phecode)` and
    /// range rows `(phecode, excl_range_lo, excl_range_hi, description)`.
    /// The phecode list is the union of mapped and range-annotated phecodes
    /// plus all of their truncation ancestors, in sorted order.
    pub fn load_csv(mapping_path: &Path, ranges_path: &Path) -> Result<Self, PhecodeError> {
        let mut mapping = Vec::new();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(mapping_path)?;
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| PhecodeError::Parse {
                path: mapping_path.display().to_string(),
                line: i + 2,
                msg: e.to_string(),
            })?;
            if row.len() < 3 {
                return Err(PhecodeError::Parse {
                    path: mapping_path.display().to_string(),
                    line: i + 2,
                    msg: "expected 3 columns: system, icd_code, phecode".into(),
                });
            }
            let system = match row[0].trim() {
                "ICD9" => IcdSystem::Icd9,
                "ICD10" => IcdSystem::Icd10,
                other => {
                    return Err(PhecodeError::Parse {
                        path: mapping_path.display().to_string(),
                        line: i + 2,
                        msg: format!("unknown system `{other}`"),
                    })
                }
            };
            mapping.push((
                IcdCode {
                    system,
                    code: row[1].trim().to_string(),
                },
                row[2].trim().to_string(),
            ));
        }

        let mut ranges = Vec::new();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(ranges_path)?;
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| PhecodeError::Parse {
                path: ranges_path.display().to_string(),
                line: i + 2,
                msg: e.to_string(),
            })?;
            if row.len() < 3 {
                return Err(PhecodeError::Parse {
                    path: ranges_path.display().to_string(),
                    line: i + 2,
                    msg: "expected columns: phecode, excl_range_lo, excl_range_hi, description"
                        .into(),
                });
            }
            let lo: f64 = row[1].trim().parse().map_err(|_| PhecodeError::Parse {
                path: ranges_path.display().to_string(),
                line: i + 2,
                msg: format!("bad range lo `{}`", &row[1]),
            })?;
            let hi: f64 = row[2].trim().parse().map_err(|_| PhecodeError::Parse {
                path: ranges_path.display().to_string(),
                line: i + 2,
                msg: format!("bad range hi `{}`", &row[2]),
            })?;
            ranges.push((row[0].trim().to_string(), (lo, hi)));
        }

        let mut all: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for (_, p) in &mapping {
            parse_phecode(p)?;
            all.insert(p.clone());
            let mut cur = p.clone();
            while let Some(parent) = truncate_phecode(&cur) {
                all.insert(parent.clone());
                cur = parent;
            }
        }
        for (p, _) in &ranges {
            parse_phecode(p)?;
            all.insert(p.clone());
        }
        Self::new(mapping, all, ranges)
    }
}

/// Immediate parent of `p` in the truncation hierarchy, or `None` when `p`
/// has no fractional digits or the truncated code is absent from the table.
pub fn parent_phecode(table: &PhecodeTable, p: &str) -> Result<Option<String>, PhecodeError> {
    parse_phecode(p)?;
    match truncate_phecode(p) {
        Some(parent) if table.index.contains_key(&parent) => Ok(Some(parent)),
        _ => Ok(None),
    }
}

/// Binary multi-label supervision target aligned to `PhecodeTable::phecodes`.
/// Hierarchy-closed: a set bit implies set bits for all table ancestors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhenotypeVector {
    pub bits: Vec<bool>,
}

impl PhenotypeVector {
    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Verify hierarchy closure against the table in one pass over set bits.
    pub fn is_hierarchy_closed(&self, table: &PhecodeTable) -> bool {
        for (i, &bit) in self.bits.iter().enumerate() {
            if !bit {
                continue;
            }
            let mut cur = table.phecodes[i].clone();
            while let Some(parent) = truncate_phecode(&cur) {
                if let Some(j) = table.index_of(&parent) {
                    if !self.bits[j] {
                        return false;
                    }
                }
                cur = parent;
            }
        }
        true
    }
}

/// Per-call tally of codes that had no phecode mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappingDiagnostics {
    pub mapped: usize,
    pub unmapped: usize,
}

/// Map ICD codes to phecodes and expand positives up the truncation
/// hierarchy. Unmapped codes are counted, not errors.
pub fn build_phenotype_vector(
    codes: &[IcdCode],
    table: &PhecodeTable,
) -> (PhenotypeVector, MappingDiagnostics) {
    let mut bits = vec![false; table.len()];
    let mut diag = MappingDiagnostics::default();
    for code in codes {
        match table.map_icd(code) {
            Some(phecode) => {
                diag.mapped += 1;
                let mut cur = phecode.to_string();
                loop {
                    if let Some(i) = table.index_of(&cur) {
                        bits[i] = true;
                    }
                    match truncate_phecode(&cur) {
                        Some(parent) => cur = parent,
                        None => break,
                    }
                }
            }
            None => diag.unmapped += 1,
        }
    }
    (PhenotypeVector { bits }, diag)
}

/// Group phecodes whose numeric value falls inside the same exclusion range.
/// Group ids are `"lo-hi"` strings of the range bounds. Overlapping distinct
/// ranges are an error.
pub fn group_phenotypes(
    table: &PhecodeTable,
) -> Result<std::collections::BTreeMap<String, Vec<String>>, PhecodeError> {
    let mut ranges: Vec<(f64, f64)> = table.exclusion_ranges.values().copied().collect();
    ranges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ranges.dedup();
    for w in ranges.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.0 < a.1 {
            return Err(PhecodeError::OverlappingRanges(a.0, a.1, b.0, b.1));
        }
    }
    let mut groups: std::collections::BTreeMap<String, Vec<String>> =
        std::collections::BTreeMap::new();
    for p in &table.phecodes {
        let (value, _) = parse_phecode(p)?;
        if let Some(&(lo, hi)) = ranges
            .iter()
            .find(|&&(lo, hi)| value >= lo && value < hi)
            .map(|r| r)
        {
            groups
                .entry(format!("{lo}-{hi}"))
                .or_default()
                .push(p.clone());
        }
    }
    Ok(groups)
}
