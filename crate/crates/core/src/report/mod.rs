//! Radiology report text handling: findings extraction, splitting into the
//! twelve anatomical sections, and the alternating full-report/section batch
//! schedule used during contrastive training.

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no findings header found in report")]
    NoFindingsHeader,
    #[error("findings text is empty")]
    EmptyFindings,
    #[error("section synonym file error: {0}")]
    BadSynonymFile(String),
}

/// The twelve anatomical sections, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anatomy {
    LowerThorax,
    LiverBiliary,
    Gallbladder,
    Spleen,
    Pancreas,
    AdrenalGlands,
    KidneysUreters,
    Gastrointestinal,
    PeritonealCavity,
    PelvicOrgans,
    VasculatureNodes,
    Musculoskeletal,
}

impl Anatomy {
    pub const ALL: [Anatomy; 12] = [
        Anatomy::LowerThorax,
        Anatomy::LiverBiliary,
        Anatomy::Gallbladder,
        Anatomy::Spleen,
        Anatomy::Pancreas,
        Anatomy::AdrenalGlands,
        Anatomy::KidneysUreters,
        Anatomy::Gastrointestinal,
        Anatomy::PeritonealCavity,
        Anatomy::PelvicOrgans,
        Anatomy::VasculatureNodes,
        Anatomy::Musculoskeletal,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Anatomy::LowerThorax => "lower_thorax",
            Anatomy::LiverBiliary => "liver_biliary",
            Anatomy::Gallbladder => "gallbladder",
            Anatomy::Spleen => "spleen",
            Anatomy::Pancreas => "pancreas",
            Anatomy::AdrenalGlands => "adrenal_glands",
            Anatomy::KidneysUreters => "kidneys_ureters",
            Anatomy::Gastrointestinal => "gastrointestinal",
            Anatomy::PeritonealCavity => "peritoneal_cavity",
            Anatomy::PelvicOrgans => "pelvic_organs",
            Anatomy::VasculatureNodes => "vasculature_nodes",
            Anatomy::Musculoskeletal => "musculoskeletal",
        }
    }

    pub fn index(self) -> usize {
        Anatomy::ALL.iter().position(|&a| a == self).unwrap()
    }
}

/// A raw radiology report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiologyReport {
    pub report_id: String,
    pub findings: String,
    #[serde(default)]
    pub impressions: String,
}

/// Findings split into the twelve sections. Sections whose header pattern
/// did not match hold the full findings text with `fallback_used` set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionedReport {
    pub sections: BTreeMap<Anatomy, String>,
    pub fallback_used: BTreeMap<Anatomy, bool>,
    pub full_findings: String,
}

impl SectionedReport {
    pub fn section(&self, anatomy: Anatomy) -> &str {
        &self.sections[&anatomy]
    }
}

static FINDINGS_HEADER: OnceLock<Regex> = OnceLock::new();
static NEXT_TOP_HEADER: OnceLock<Regex> = OnceLock::new();

fn findings_header() -> &'static Regex {
    FINDINGS_HEADER.get_or_init(|| {
        RegexBuilder::new(r"\bFINDINGS?\s*[:\-]")
            .case_insensitive(true)
            .build()
            .unwrap()
    })
}

fn next_top_header() -> &'static Regex {
    NEXT_TOP_HEADER.get_or_init(|| {
        RegexBuilder::new(r"\b(?:IMPRESSIONS?|CONCLUSIONS?|RECOMMENDATIONS?)\s*[:\-]")
            .case_insensitive(true)
            .build()
            .unwrap()
    })
}

/// Extract the findings section: text between the findings header and the
/// next top-level header (impression/conclusion) or end of report.
pub fn extract_findings(raw_report: &str) -> Result<String, ReportError> {
    let m = findings_header()
        .find(raw_report)
        .ok_or(ReportError::NoFindingsHeader)?;
    let rest = &raw_report[m.end()..];
    let end = next_top_header().find(rest).map_or(rest.len(), |m| m.start());
    let text = rest[..end].trim();
    if text.is_empty() {
        return Err(ReportError::EmptyFindings);
    }
    Ok(text.to_string())
}

/// Header synonyms per anatomy, compiled into one alternation regex.
#[derive(Debug, Clone)]
pub struct SectionPatterns {
    /// (anatomy, compiled header regex) pairs; longer synonyms win at a
    /// shared match position via alternation order.
    header: Regex,
    /// Maps the alternation group index to its anatomy.
    group_anatomy: Vec<Anatomy>,
}

impl SectionPatterns {
    /// Parse a synonym file: JSON object `{anatomy_key: [synonym, ...]}`.
    pub fn from_json(json: &str) -> Result<Self, ReportError> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(json).map_err(|e| ReportError::BadSynonymFile(e.to_string()))?;
        let mut entries: Vec<(Anatomy, String)> = Vec::new();
        for anatomy in Anatomy::ALL {
            let synonyms = raw
                .get(anatomy.key())
                .ok_or_else(|| ReportError::BadSynonymFile(format!("missing key `{}`", anatomy.key())))?;
            if synonyms.is_empty() {
                return Err(ReportError::BadSynonymFile(format!(
                    "no synonyms for `{}`",
                    anatomy.key()
                )));
            }
            for s in synonyms {
                entries.push((anatomy, regex::escape(s)));
            }
        }
        // Longest synonym first so e.g. "LIVER AND BILIARY TREE" beats "LIVER".
        entries.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
        let alternation = entries
            .iter()
            .map(|(_, pat)| format!("({pat})"))
            .collect::<Vec<_>>()
            .join("|");
        let header = RegexBuilder::new(&format!(r"\b(?:{alternation})\s*[:\-]"))
            .case_insensitive(true)
            .build()
            .map_err(|e| ReportError::BadSynonymFile(e.to_string()))?;
        Ok(SectionPatterns {
            header,
            group_anatomy: entries.into_iter().map(|(a, _)| a).collect(),
        })
    }

    /// The synonym library shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(include_str!("../../data/section_synonyms.json"))
            .expect("builtin synonym file is valid")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ReportError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| ReportError::BadSynonymFile(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }
}

/// Split findings into the twelve sections. Any anatomy whose header is not
/// found gets the full findings text with its fallback flag set.
pub fn split_sections(
    findings: &str,
    patterns: &SectionPatterns,
) -> Result<SectionedReport, ReportError> {
    if findings.trim().is_empty() {
        return Err(ReportError::EmptyFindings);
    }
    // Locate every anatomy header occurrence in order.
    struct Hit {
        anatomy: Anatomy,
        start: usize,
        body_start: usize,
    }
    let mut hits: Vec<Hit> = Vec::new();
    for caps in patterns.header.captures_iter(findings) {
        let whole = caps.get(0).unwrap();
        let group = (1..=patterns.group_anatomy.len())
            .find(|&g| caps.get(g).is_some())
            .expect("one alternation group matches");
        hits.push(Hit {
            anatomy: patterns.group_anatomy[group - 1],
            start: whole.start(),
            body_start: whole.end(),
        });
    }

    let mut sections = BTreeMap::new();
    let mut fallback_used = BTreeMap::new();
    for anatomy in Anatomy::ALL {
        // First occurrence wins.
        let hit = hits.iter().find(|h| h.anatomy == anatomy);
        match hit {
            Some(h) => {
                let end = hits
                    .iter()
                    .filter(|other| other.start > h.start)
                    .map(|other| other.start)
                    .min()
                    .unwrap_or(findings.len());
                sections.insert(anatomy, findings[h.body_start..end].trim().to_string());
                fallback_used.insert(anatomy, false);
            }
            None => {
                sections.insert(anatomy, findings.to_string());
                fallback_used.insert(anatomy, true);
            }
        }
    }
    Ok(SectionedReport {
        sections,
        fallback_used,
        full_findings: findings.to_string(),
    })
}

/// Rotation order for section batches plus the step counter.
#[derive(Debug, Clone)]
pub struct SectionSchedule {
    pub anatomy_order: [Anatomy; 12],
}

impl Default for SectionSchedule {
    fn default() -> Self {
        SectionSchedule {
            anatomy_order: Anatomy::ALL,
        }
    }
}

/// Text mode chosen for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchTextMode {
    Full,
    Section(Anatomy),
}

/// Which anatomy an odd step selects: odd steps rotate through the order,
/// advancing once per odd step.
pub fn step_anatomy(step: u64, schedule: &SectionSchedule) -> Option<Anatomy> {
    if step % 2 == 0 {
        None
    } else {
        Some(schedule.anatomy_order[((step - 1) / 2) as usize % 12])
    }
}

/// Batch text for a training step: even steps present full findings, odd
/// steps present one anatomy section for every report in the batch.
pub fn schedule_batch_text(
    step: u64,
    reports: &[&SectionedReport],
    schedule: &SectionSchedule,
) -> (Vec<String>, BatchTextMode) {
    match step_anatomy(step, schedule) {
        None => (
            reports.iter().map(|r| r.full_findings.clone()).collect(),
            BatchTextMode::Full,
        ),
        Some(anatomy) => (
            reports.iter().map(|r| r.section(anatomy).to_string()).collect(),
            BatchTextMode::Section(anatomy),
        ),
    }
}
