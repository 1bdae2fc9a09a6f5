//! Synthetic cohort generator: volumes with planted geometric findings,
//! reports whose sentences describe exactly those findings, diagnosis codes
//! mapping onto a small phecode tree, and disease timelines consistent with
//! the planted image signal. A ground-truth sidecar makes every downstream
//! number checkable.

use crate::eval::PromptSet;
use crate::manifest::{write_manifest, write_reports, ManifestRow, ReportRecord};
use crate::phenotype::{
    assign_disease_label, DiseaseTimeline, IcdCode, IcdSystem,
};
use crate::report::Anatomy;
use crate::volume::{write_raw, CTVolume, Orientation, PreprocessConfig};
use chrono::NaiveDate;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("output directory unwritable: {0}")]
    Io(#[from] std::io::Error),
    #[error("volume write failed: {0}")]
    Volume(#[from] crate::volume::VolumeError),
    #[error("manifest write failed: {0}")]
    Manifest(#[from] crate::manifest::ManifestError),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// A geometric feature planted in volumes together with its textual, coded,
/// and temporal footprint.
#[derive(Debug, Clone, Serialize)]
pub struct PlantedFinding {
    pub name: String,
    pub anatomy: Anatomy,
    pub phecode: String,
    pub icd: IcdCode,
    pub disease: String,
    /// Relative blob center in (x, y, z) ∈ [0,1]³.
    pub center: [f64; 3],
    /// One sentence per present severity (index 0 = severity 1).
    pub positive_sentences: Vec<String>,
    pub negative_sentence: String,
}

fn icd10(code: &str) -> IcdCode {
    IcdCode {
        system: IcdSystem::Icd10,
        code: code.into(),
    }
}

/// The fixed catalog of four planted findings.
pub fn planted_findings() -> Vec<PlantedFinding> {
    vec![
        PlantedFinding {
            name: "hepatic_lesion".into(),
            anatomy: Anatomy::LiverBiliary,
            phecode: "571.51".into(),
            icd: icd10("K76.89"),
            disease: "liver_disease".into(),
            center: [0.30, 0.32, 0.38],
            positive_sentences: vec![
                "There is a small hyperdense hepatic lesion.".into(),
                "There is a moderate hyperdense hepatic lesion.".into(),
                "There is a large hyperdense hepatic lesion.".into(),
            ],
            negative_sentence: "No focal hepatic lesion identified.".into(),
        },
        PlantedFinding {
            name: "splenomegaly".into(),
            anatomy: Anatomy::Spleen,
            phecode: "289.41".into(),
            icd: icd10("R16.1"),
            disease: "spleen_disorder".into(),
            center: [0.70, 0.30, 0.42],
            positive_sentences: vec![
                "The spleen is mildly enlarged.".into(),
                "The spleen is moderately enlarged.".into(),
                "The spleen is massively enlarged.".into(),
            ],
            negative_sentence: "The spleen is normal in size.".into(),
        },
        PlantedFinding {
            name: "renal_cyst".into(),
            anatomy: Anatomy::KidneysUreters,
            phecode: "593.21".into(),
            icd: icd10("N28.1"),
            disease: "kidney_disease".into(),
            center: [0.32, 0.68, 0.55],
            positive_sentences: vec![
                "A tiny renal cyst is seen.".into(),
                "A simple renal cyst is seen.".into(),
                "A complex renal cyst is seen.".into(),
            ],
            negative_sentence: "No renal cysts.".into(),
        },
        PlantedFinding {
            name: "vertebral_deformity".into(),
            anatomy: Anatomy::Musculoskeletal,
            phecode: "805.21".into(),
            icd: icd10("S32.0"),
            disease: "osteoporosis".into(),
            center: [0.68, 0.70, 0.64],
            positive_sentences: vec![
                "There is a mild vertebral compression deformity.".into(),
                "There is a moderate vertebral compression deformity.".into(),
                "There is a severe vertebral compression deformity.".into(),
            ],
            negative_sentence: "No acute osseous abnormality.".into(),
        },
    ]
}

/// Cohort generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCohortSpec {
    pub n_patients: usize,
    pub volume_shape: [usize; 3],
    /// Probability that a finding is present in a given patient.
    pub prevalence: f64,
    /// Standard deviation of voxel noise, in HU.
    pub noise_hu: f64,
    pub seed: u64,
}

impl Default for SyntheticCohortSpec {
    fn default() -> Self {
        SyntheticCohortSpec {
            n_patients: 128,
            volume_shape: [32, 32, 32],
            prevalence: 0.5,
            noise_hu: 40.0,
            seed: 0,
        }
    }
}

/// Ground-truth record for one encounter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncounterTruth {
    /// Severity per finding name: 0 absent, 1..=3 present.
    pub severities: BTreeMap<String, u8>,
    /// Timeline class per disease name.
    pub disease_classes: BTreeMap<String, u8>,
}

/// Sidecar with everything the oracles need.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub finding_names: Vec<String>,
    pub disease_names: Vec<String>,
    pub encounters: BTreeMap<String, EncounterTruth>,
}

impl TruthSidecar {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Paths produced by [`generate_synthetic_cohort`].
#[derive(Debug, Clone)]
pub struct GeneratedCohort {
    pub out_dir: PathBuf,
    pub manifest: PathBuf,
    pub reports: PathBuf,
    pub icd_phecode_csv: PathBuf,
    pub phecode_ranges_csv: PathBuf,
    pub prompts: PathBuf,
    pub truth: PathBuf,
    pub preprocess_config: PathBuf,
}

fn section_body(
    findings_catalog: &[PlantedFinding],
    severities: &[u8],
    anatomy: Anatomy,
) -> String {
    let mut parts: Vec<String> = Vec::new();
    for (f, &sev) in findings_catalog.iter().zip(severities) {
        if f.anatomy != anatomy {
            continue;
        }
        if sev == 0 {
            parts.push(f.negative_sentence.clone());
        } else {
            parts.push(f.positive_sentences[(sev - 1) as usize].clone());
        }
    }
    if parts.is_empty() {
        "Unremarkable.".to_string()
    } else {
        parts.join(" ")
    }
}

/// Canonical section header text per anatomy (the first builtin synonym).
fn header_for(anatomy: Anatomy) -> &'static str {
    match anatomy {
        Anatomy::LowerThorax => "LOWER THORAX",
        Anatomy::LiverBiliary => "LIVER AND BILIARY TREE",
        Anatomy::Gallbladder => "GALLBLADDER",
        Anatomy::Spleen => "SPLEEN",
        Anatomy::Pancreas => "PANCREAS",
        Anatomy::AdrenalGlands => "ADRENAL GLANDS",
        Anatomy::KidneysUreters => "KIDNEYS AND URETERS",
        Anatomy::Gastrointestinal => "GASTROINTESTINAL TRACT",
        Anatomy::PeritonealCavity => "PERITONEAL CAVITY",
        Anatomy::PelvicOrgans => "PELVIC ORGANS",
        Anatomy::VasculatureNodes => "VASCULATURE AND LYMPH NODES",
        Anatomy::Musculoskeletal => "MUSCULOSKELETAL",
    }
}

fn build_volume(
    shape: [usize; 3],
    findings_catalog: &[PlantedFinding],
    severities: &[u8],
    noise_hu: f64,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let [nx, ny, nz] = shape;
    let mut v = Array3::<f32>::zeros(shape);
    // Smooth soft-tissue background with a gentle gradient.
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let base = -60.0 + 120.0 * (x as f64 / nx as f64) + 40.0 * (z as f64 / nz as f64);
                let noise = noise_hu * normal(rng);
                v[[x, y, z]] = (base + noise) as f32;
            }
        }
    }
    for (f, &sev) in findings_catalog.iter().zip(severities) {
        if sev == 0 {
            continue;
        }
        let r = (0.10 + 0.05 * sev as f64) * nx.min(ny).min(nz) as f64;
        let amp = 280.0 * sev as f64;
        let c = [
            f.center[0] * nx as f64,
            f.center[1] * ny as f64,
            f.center[2] * nz as f64,
        ];
        let reach = (r * 2.0).ceil() as isize;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let x = c[0] as isize + dx;
                    let y = c[1] as isize + dy;
                    let z = c[2] as isize + dz;
                    if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize
                    {
                        continue;
                    }
                    let d2 = ((x as f64 - c[0]).powi(2)
                        + (y as f64 - c[1]).powi(2)
                        + (z as f64 - c[2]).powi(2))
                        / (r * r);
                    if d2 <= 4.0 {
                        // Soft-edged blob.
                        let w = (-d2).exp();
                        v[[x as usize, y as usize, z as usize]] += (amp * w) as f32;
                    }
                }
            }
        }
    }
    v
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Filler phecodes that pad the tree beyond the planted ones.
const FILLER_PHECODES: [(&str, &str); 4] = [
    ("401", "I10"),
    ("250", "E11.9"),
    ("272", "E78.5"),
    ("496", "J44.9"),
];

/// Write the ICD→phecode mapping and exclusion-range CSVs for the cohort's
/// little phecode tree (planted codes, their ancestors, and fillers).
fn write_tables(dir: &Path, findings_catalog: &[PlantedFinding]) -> Result<(PathBuf, PathBuf), SynthError> {
    let map_path = dir.join("icd_phecode.csv");
    let rng_path = dir.join("phecode_ranges.csv");
    let mut map = String::from("system,icd_code,phecode\n");
    for f in findings_catalog {
        map.push_str(&format!("ICD10,{},{}\n", f.icd.code, f.phecode));
    }
    for (phecode, icd) in FILLER_PHECODES {
        map.push_str(&format!("ICD10,{icd},{phecode}\n"));
    }
    std::fs::write(&map_path, map)?;

    let mut ranges = String::from("phecode,excl_range_lo,excl_range_hi,description\n");
    for f in findings_catalog {
        let family: f64 = f.phecode.split('.').next().unwrap().parse().unwrap();
        for code in phecode_chain(&f.phecode) {
            ranges.push_str(&format!("{code},{family},{},synthetic family\n", family + 1.0));
        }
    }
    for (phecode, _) in FILLER_PHECODES {
        let family: f64 = phecode.parse().unwrap();
        ranges.push_str(&format!("{phecode},{family},{},synthetic family\n", family + 1.0));
    }
    std::fs::write(&rng_path, ranges)?;
    Ok((map_path, rng_path))
}

/// "571.51" → ["571.51", "571.5", "571"].
fn phecode_chain(p: &str) -> Vec<String> {
    let mut out = vec![p.to_string()];
    let mut cur = p.to_string();
    while let Some((int, frac)) = cur.clone().split_once('.') {
        let next = if frac.len() <= 1 {
            int.to_string()
        } else {
            format!("{int}.{}", &frac[..frac.len() - 1])
        };
        out.push(next.clone());
        cur = next;
    }
    out
}

/// Prompt sets per finding: the positive sentences plus a terse phrase, and
/// the negative sentence plus a terse negation.
pub fn prompt_sets(findings_catalog: &[PlantedFinding]) -> Vec<PromptSet> {
    findings_catalog
        .iter()
        .map(|f| {
            let terse = f.name.replace('_', " ");
            let mut presence = f.positive_sentences.clone();
            presence.push(format!("{terse} present"));
            PromptSet {
                finding_name: f.name.clone(),
                presence_prompts: presence,
                absence_prompts: vec![f.negative_sentence.clone(), format!("no {terse}")],
            }
        })
        .collect()
}

/// Generate the full cohort under `out_dir`. Deterministic: a fixed spec
/// yields byte-identical files.
pub fn generate_synthetic_cohort(
    spec: &SyntheticCohortSpec,
    out_dir: &Path,
) -> Result<GeneratedCohort, SynthError> {
    std::fs::create_dir_all(out_dir.join("volumes"))?;
    std::fs::create_dir_all(out_dir.join("tables"))?;
    let catalog = planted_findings();
    let scan_base = NaiveDate::from_ymd_opt(2012, 1, 1).unwrap();

    let mut manifest_rows = Vec::with_capacity(spec.n_patients);
    let mut report_records = Vec::with_capacity(spec.n_patients);
    let mut truth_encounters = BTreeMap::new();

    for idx in 0..spec.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (idx as u64).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
        let patient_id = format!("p{idx:05}");
        let encounter_id = format!("e{idx:05}");

        // Severities: absent with 1-prevalence, else uniform over 1..=3.
        let severities: Vec<u8> = catalog
            .iter()
            .map(|_| {
                if rng.random_range(0.0..1.0) < spec.prevalence {
                    rng.random_range(1..=3u8)
                } else {
                    0
                }
            })
            .collect();

        let volume = build_volume(spec.volume_shape, &catalog, &severities, spec.noise_hu, &mut rng);
        let vol_rel = format!("volumes/{encounter_id}.raw");
        let ct = CTVolume::new(volume, [1.5, 1.5, 3.0], Orientation::RAS)?;
        write_raw(&ct, &out_dir.join(&vol_rel))?;

        // Report text: all twelve sections, in order.
        let mut findings_text = String::new();
        for anatomy in Anatomy::ALL {
            findings_text.push_str(header_for(anatomy));
            findings_text.push_str(": ");
            findings_text.push_str(&section_body(&catalog, &severities, anatomy));
            findings_text.push('\n');
        }
        let positives: Vec<&str> = catalog
            .iter()
            .zip(&severities)
            .filter(|(_, &s)| s > 0)
            .map(|(f, _)| f.name.as_str())
            .collect();
        let impressions = if positives.is_empty() {
            "No acute findings.".to_string()
        } else {
            format!(
                "Notable for {}.",
                positives
                    .iter()
                    .map(|n| n.replace('_', " "))
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        };
        report_records.push(ReportRecord {
            report_id: encounter_id.clone(),
            findings: findings_text,
            impressions,
        });

        // Diagnosis codes: positives' ICDs, occasional mapped filler,
        // occasional stray unmapped code.
        let mut icd_codes: Vec<IcdCode> = catalog
            .iter()
            .zip(&severities)
            .filter(|(_, &s)| s > 0)
            .map(|(f, _)| f.icd.clone())
            .collect();
        if rng.random_range(0.0..1.0) < 0.3 {
            let (_, icd) = FILLER_PHECODES[rng.random_range(0..FILLER_PHECODES.len())];
            icd_codes.push(icd10(icd));
        }
        if rng.random_range(0.0..1.0) < 0.1 {
            icd_codes.push(icd10("Z99.9"));
        }
        icd_codes.sort_by(|a, b| a.code.cmp(&b.code));

        // Timeline: long follow-up for most patients; onsets only where the
        // finding is planted, mostly inside the 5-year window.
        let scan_date = scan_base + chrono::Duration::days((idx as i64 * 13) % 1461);
        let long_followup = rng.random_range(0.0..1.0) < 0.9;
        let last_record_date = if long_followup {
            scan_date + chrono::Duration::days(rng.random_range(1900..2900))
        } else {
            scan_date + chrono::Duration::days(rng.random_range(200..1500))
        };
        let mut disease_onsets = BTreeMap::new();
        for (f, &sev) in catalog.iter().zip(&severities) {
            if sev == 0 {
                continue;
            }
            let onset = if rng.random_range(0.0..1.0) < 0.85 {
                scan_date + chrono::Duration::days(rng.random_range(90..1500))
            } else {
                scan_date - chrono::Duration::days(rng.random_range(30..800))
            };
            // Onsets after the end of follow-up are unobserved.
            if onset <= last_record_date {
                disease_onsets.insert(f.disease.clone(), onset);
            }
        }

        // Ground-truth classes through the label logic itself.
        let mut disease_classes = BTreeMap::new();
        for f in &catalog {
            let t = DiseaseTimeline::new(disease_onsets.get(&f.disease).copied(), scan_date, last_record_date);
            let label = assign_disease_label(&t).expect("well-formed synthetic timeline");
            disease_classes.insert(f.disease.clone(), label.class_index() as u8);
        }
        let severity_map: BTreeMap<String, u8> = catalog
            .iter()
            .zip(&severities)
            .map(|(f, &s)| (f.name.clone(), s))
            .collect();
        truth_encounters.insert(
            encounter_id.clone(),
            EncounterTruth {
                severities: severity_map,
                disease_classes,
            },
        );

        manifest_rows.push(ManifestRow {
            patient_id,
            encounter_id,
            volume_path: vol_rel,
            report_path: "reports.jsonl".into(),
            icd_codes,
            disease_onsets,
            scan_date,
            last_record_date,
            split: None,
        });
    }

    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &manifest_rows)?;
    let reports = out_dir.join("reports.jsonl");
    write_reports(&reports, &report_records)?;
    let (icd_phecode_csv, phecode_ranges_csv) = write_tables(&out_dir.join("tables"), &catalog)?;

    let prompts = out_dir.join("prompts.json");
    std::fs::write(&prompts, serde_json::to_string_pretty(&prompt_sets(&catalog))?)?;

    let truth = out_dir.join("truth.json");
    let sidecar = TruthSidecar {
        finding_names: catalog.iter().map(|f| f.name.clone()).collect(),
        disease_names: catalog.iter().map(|f| f.disease.clone()).collect(),
        encounters: truth_encounters,
    };
    std::fs::write(&truth, serde_json::to_string_pretty(&sidecar)?)?;

    // A matching preprocessing config (same grid, so geometry is identity).
    let preprocess_config = out_dir.join("preprocess.json");
    let ppc = PreprocessConfig {
        target_shape: spec.volume_shape,
        ..Default::default()
    };
    let mut f = std::fs::File::create(&preprocess_config)?;
    writeln!(f, "{}", serde_json::to_string_pretty(&ppc)?)?;

    let spec_path = out_dir.join("cohort.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec)?)?;

    Ok(GeneratedCohort {
        out_dir: out_dir.to_path_buf(),
        manifest,
        reports,
        icd_phecode_csv,
        phecode_ranges_csv,
        prompts,
        truth,
        preprocess_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{read_manifest, read_reports};

    fn small_spec(seed: u64) -> SyntheticCohortSpec {
        SyntheticCohortSpec {
            n_patients: 24,
            volume_shape: [16, 16, 16],
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic_cohort(&small_spec(7), d1.path()).unwrap();
        generate_synthetic_cohort(&small_spec(7), d2.path()).unwrap();
        for rel in ["manifest.jsonl", "reports.jsonl", "truth.json", "volumes/e00003.raw"] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs across runs");
        }
        let d3 = tempfile::tempdir().unwrap();
        generate_synthetic_cohort(&small_spec(8), d3.path()).unwrap();
        let a = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let b = std::fs::read(d3.path().join("manifest.jsonl")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn prevalence_matches_binomial_expectation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticCohortSpec {
            n_patients: 1000,
            volume_shape: [8, 8, 8],
            prevalence: 0.5,
            seed: 3,
            ..Default::default()
        };
        generate_synthetic_cohort(&spec, dir.path()).unwrap();
        let truth = TruthSidecar::load(&dir.path().join("truth.json")).unwrap();
        for name in &truth.finding_names {
            let positives = truth
                .encounters
                .values()
                .filter(|e| e.severities[name] > 0)
                .count();
            let observed = positives as f64 / 1000.0;
            assert!(
                (observed - 0.5).abs() < 0.05,
                "{name}: observed prevalence {observed}"
            );
        }
    }

    #[test]
    fn positive_sentences_cooccur_with_image_features() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_cohort(&small_spec(5), dir.path()).unwrap();
        let truth = TruthSidecar::load(&dir.path().join("truth.json")).unwrap();
        let reports = read_reports(&dir.path().join("reports.jsonl")).unwrap();
        let catalog = planted_findings();
        for (eid, t) in &truth.encounters {
            let text = &reports[eid].findings;
            for f in &catalog {
                let sev = t.severities[&f.name];
                if sev > 0 {
                    assert!(
                        text.contains(&f.positive_sentences[(sev - 1) as usize]),
                        "{eid}: missing positive sentence for {}",
                        f.name
                    );
                } else {
                    assert!(text.contains(&f.negative_sentence), "{eid}: missing negative");
                }
            }
        }
    }

    #[test]
    fn manifest_paths_resolve_and_volumes_read_back() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_cohort(&small_spec(2), dir.path()).unwrap();
        let rows = read_manifest(&dir.path().join("manifest.jsonl"), true).unwrap();
        assert_eq!(rows.len(), 24);
        let v = crate::volume::read_raw(&dir.path().join(&rows[0].volume_path)).unwrap();
        assert_eq!(v.shape(), [16, 16, 16]);
    }

    #[test]
    fn planted_severity_raises_blob_intensity() {
        let catalog = planted_findings();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let quiet = build_volume([16, 16, 16], &catalog, &[0, 0, 0, 0], 0.0, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loud = build_volume([16, 16, 16], &catalog, &[3, 0, 0, 0], 0.0, &mut rng);
        let c = &catalog[0].center;
        let idx = [
            (c[0] * 16.0) as usize,
            (c[1] * 16.0) as usize,
            (c[2] * 16.0) as usize,
        ];
        assert!(loud[idx] > quiet[idx] + 500.0);
    }
}
