//! Data ingestion, feature encoding, disease-frequency filtering, temporal
//! splitting, and a synthetic generator with planted low-rank structure.
//!
//! File formats:
//! - `interactions.csv`: header `patient_id,disease_code,admit_time`;
//!   admit_time is integer epoch seconds or an ISO-8601 timestamp.
//! - `demographics.csv`: header `patient_id,age,gender,race`; gender tokens
//!   `M`/`F`; race tokens `race_00`..`race_32`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Interaction, InteractionMatrix};
use crate::model::seeded_rng;

pub const NUM_AGE_BUCKETS: usize = 9;
pub const NUM_RACES: usize = 33;
/// 9 age buckets + 1 gender bit + 33 race categories.
pub const FEATURE_WIDTH: usize = NUM_AGE_BUCKETS + 1 + NUM_RACES;

const TAG_SYNTH_U: u64 = 20;
const TAG_SYNTH_V: u64 = 21;
const TAG_SYNTH_DEMO: u64 = 22;
const TAG_SYNTH_TIME: u64 = 23;
const TAG_SYNTH_CONFOUND: u64 = 24;

const INTERACTIONS_HEADER: [&str; 3] = ["patient_id", "disease_code", "admit_time"];
const DEMOGRAPHICS_HEADER: [&str; 4] = ["patient_id", "age", "gender", "race"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub patient_id: String,
    pub disease_code: String,
    /// Epoch seconds.
    pub admit_time: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub patient_id: String,
    /// Years; cohort floor is 18 and ages above 89 are stored as 91.
    pub age: u32,
    pub gender: Gender,
    /// Race category index, 0..Num_RACES.
    pub race: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTables {
    pub interactions: Vec<RawInteraction>,
    pub demographics: Vec<Demographics>,
}

fn parse_admit_time(token: &str) -> Option<i64> {
    if let Ok(epoch) = token.parse::<i64>() {
        return Some(epoch);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(token) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = chrono::NaiveDateTime::parse_and_remainder(token, fmt) {
            if naive.1.is_empty() {
                return Some(naive.0.and_utc().timestamp());
            }
        }
    }
    None
}

fn parse_gender(token: &str) -> Option<Gender> {
    match token {
        "M" => Some(Gender::Male),
        "F" => Some(Gender::Female),
        _ => None,
    }
}

fn parse_race(token: &str) -> Option<u8> {
    let idx = token.strip_prefix("race_")?.parse::<u8>().ok()?;
    ((idx as usize) < NUM_RACES).then_some(idx)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn check_header(actual: &csv::StringRecord, expected: &[&str], path: &Path) -> Result<()> {
    if actual.len() != expected.len() || actual.iter().zip(expected).any(|(a, e)| a != *e) {
        return Err(Error::Ingest {
            line: 1,
            msg: format!(
                "{}: expected header `{}`, got `{}`",
                path.display(),
                expected.join(","),
                actual.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    Ok(())
}

/// Parse and validate the interaction and demographics files. Interactions
/// are deduplicated per (patient, disease) keeping the earliest admission;
/// ids keep their first-seen order. Ages above 89 are stored as 91.
pub fn ingest(interactions_path: &Path, demographics_path: &Path) -> Result<RawTables> {
    let mut reader = csv::Reader::from_path(interactions_path)?;
    check_header(reader.headers()?, &INTERACTIONS_HEADER, interactions_path)?;
    let mut interactions: Vec<RawInteraction> = Vec::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        if record.len() != 3 {
            return Err(Error::Ingest {
                line,
                msg: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let patient_id = record[0].to_string();
        let disease_code = record[1].to_string();
        if patient_id.is_empty() || disease_code.is_empty() {
            return Err(Error::Ingest {
                line,
                msg: "empty patient_id or disease_code".into(),
            });
        }
        let admit_time = parse_admit_time(&record[2]).ok_or_else(|| Error::Ingest {
            line,
            msg: format!(
                "admit_time `{}` is neither epoch seconds nor ISO-8601",
                &record[2]
            ),
        })?;
        match seen.entry((patient_id.clone(), disease_code.clone())) {
            std::collections::hash_map::Entry::Occupied(slot) => {
                let existing = &mut interactions[*slot.get()];
                if admit_time < existing.admit_time {
                    existing.admit_time = admit_time;
                }
            }
            std::collections::hash_map::Entry::Vacant(slot) => {
                slot.insert(interactions.len());
                interactions.push(RawInteraction {
                    patient_id,
                    disease_code,
                    admit_time,
                });
            }
        }
    }
    if interactions.is_empty() {
        return Err(Error::Ingest {
            line: 1,
            msg: format!("no interactions in {}", interactions_path.display()),
        });
    }

    let mut reader = csv::Reader::from_path(demographics_path)?;
    check_header(reader.headers()?, &DEMOGRAPHICS_HEADER, demographics_path)?;
    let mut demographics: Vec<Demographics> = Vec::new();
    let mut seen_patients: HashSet<String> = HashSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record_line(&record);
        if record.len() != 4 {
            return Err(Error::Ingest {
                line,
                msg: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let patient_id = record[0].to_string();
        if !seen_patients.insert(patient_id.clone()) {
            return Err(Error::Ingest {
                line,
                msg: format!("duplicate demographics for patient `{patient_id}`"),
            });
        }
        let age: u32 = record[1].parse().map_err(|_| Error::Ingest {
            line,
            msg: format!("age `{}` is not an integer", &record[1]),
        })?;
        if age < 18 {
            return Err(Error::Ingest {
                line,
                msg: format!("age {age} below the cohort floor of 18"),
            });
        }
        let age = if age > 89 { 91 } else { age };
        let gender = parse_gender(&record[2]).ok_or_else(|| Error::Ingest {
            line,
            msg: format!("unknown gender `{}`; allowed tokens: M, F", &record[2]),
        })?;
        let race = parse_race(&record[3]).ok_or_else(|| Error::Ingest {
            line,
            msg: format!(
                "unknown race `{}`; allowed tokens: race_00..race_{}",
                &record[3],
                NUM_RACES - 1
            ),
        })?;
        demographics.push(Demographics {
            patient_id,
            age,
            gender,
            race,
        });
    }

    Ok(RawTables {
        interactions,
        demographics,
    })
}

/// Keep interactions whose disease ranks among the `d_max` most frequent
/// (frequency = distinct patients, ties broken by lexicographic code) and
/// drop patients left with no interactions. At clinical-registry scale this
/// is how the cohort is trimmed to the few thousand best-supported codes;
/// desk-scale synthetic data usually skips it.
pub fn filter_top_diseases(tables: &RawTables, d_max: usize) -> Result<RawTables> {
    if d_max == 0 {
        return Err(Error::Config("d_max must be >= 1".into()));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for row in &tables.interactions {
        *freq.entry(row.disease_code.as_str()).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let kept: HashSet<&str> = ranked.iter().take(d_max).map(|&(code, _)| code).collect();

    let interactions: Vec<RawInteraction> = tables
        .interactions
        .iter()
        .filter(|row| kept.contains(row.disease_code.as_str()))
        .cloned()
        .collect();
    let surviving: HashSet<&str> = interactions
        .iter()
        .map(|row| row.patient_id.as_str())
        .collect();
    let demographics = tables
        .demographics
        .iter()
        .filter(|d| surviving.contains(d.patient_id.as_str()))
        .cloned()
        .collect();
    Ok(RawTables {
        interactions,
        demographics,
    })
}

/// Bucket index for an age following the nine cohort groups
/// [18,20], [21,30], ..., [81,89], [91].
pub fn age_bucket(age: u32) -> Result<usize> {
    match age {
        18..=20 => Ok(0),
        21..=30 => Ok(1),
        31..=40 => Ok(2),
        41..=50 => Ok(3),
        51..=60 => Ok(4),
        61..=70 => Ok(5),
        71..=80 => Ok(6),
        81..=89 => Ok(7),
        91 => Ok(8),
        _ => Err(Error::Domain(format!("age {age} has no bucket"))),
    }
}

/// One-hot feature rows: 9-dim age bucket, 1-dim gender (0 male, 1 female),
/// 33-dim race; width 43. Values stay raw 0/1 without rescaling.
pub fn encode_features(demographics: &[Demographics]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((demographics.len(), FEATURE_WIDTH));
    for (i, demo) in demographics.iter().enumerate() {
        out[[i, age_bucket(demo.age)?]] = 1.0;
        out[[i, NUM_AGE_BUCKETS]] = match demo.gender {
            Gender::Male => 0.0,
            Gender::Female => 1.0,
        };
        out[[i, NUM_AGE_BUCKETS + 1 + demo.race as usize]] = 1.0;
    }
    Ok(out)
}

/// Prepared dataset: interned ids, a per-patient temporal train/test split,
/// and the frozen demographic feature matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub patient_ids: Vec<String>,
    pub disease_codes: Vec<String>,
    pub train: InteractionMatrix,
    pub test: InteractionMatrix,
    pub features: Array2<f64>,
    pub demographics: Vec<Demographics>,
}

impl Dataset {
    pub fn num_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn num_diseases(&self) -> usize {
        self.disease_codes.len()
    }

    pub fn patient_index(&self, id: &str) -> Option<usize> {
        self.patient_ids.iter().position(|p| p == id)
    }

    pub fn disease_index(&self, code: &str) -> Option<usize> {
        self.disease_codes.iter().position(|c| c == code)
    }

    pub fn train_positives(&self, patient: usize) -> HashSet<usize> {
        self.train.patient_row(patient).iter().map(|e| e.disease).collect()
    }

    pub fn test_positives(&self, patient: usize) -> HashSet<usize> {
        self.test.patient_row(patient).iter().map(|e| e.disease).collect()
    }

    /// Train ∪ test interactions (the full observed matrix).
    pub fn full_matrix(&self) -> InteractionMatrix {
        self.train
            .union(&self.test)
            .expect("train and test share the index space and are disjoint")
    }
}

/// Count ⌈ratio·n⌉ computed with a small nudge so that products that are
/// mathematically integral (0.8·5 = 4) do not round up through the binary
/// representation of the ratio.
fn nudged_ceil(x: f64) -> usize {
    ((x - 1e-9).ceil().max(1.0)) as usize
}

/// Per-patient temporal split: interactions sorted by admission time (ties
/// by disease code), the first ⌈ratio·n⌉ go to train, the rest to test.
/// Patients with a single record contribute it to train.
pub fn temporal_split(tables: &RawTables, ratio: f64) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    if tables.interactions.is_empty() {
        return Err(Error::Ingest {
            line: 1,
            msg: "no interactions".into(),
        });
    }

    let mut patient_ids: Vec<String> = Vec::new();
    let mut patient_lookup: HashMap<&str, usize> = HashMap::new();
    let mut disease_codes: Vec<String> = Vec::new();
    let mut disease_lookup: HashMap<&str, usize> = HashMap::new();
    for row in &tables.interactions {
        if !patient_lookup.contains_key(row.patient_id.as_str()) {
            patient_lookup.insert(row.patient_id.as_str(), patient_ids.len());
            patient_ids.push(row.patient_id.clone());
        }
        if !disease_lookup.contains_key(row.disease_code.as_str()) {
            disease_lookup.insert(row.disease_code.as_str(), disease_codes.len());
            disease_codes.push(row.disease_code.clone());
        }
    }

    let mut per_patient: Vec<Vec<(i64, &str, usize)>> = vec![Vec::new(); patient_ids.len()];
    for row in &tables.interactions {
        let p = patient_lookup[row.patient_id.as_str()];
        let d = disease_lookup[row.disease_code.as_str()];
        per_patient[p].push((row.admit_time, row.disease_code.as_str(), d));
    }

    let mut train_entries = Vec::new();
    let mut test_entries = Vec::new();
    for (p, rows) in per_patient.iter_mut().enumerate() {
        rows.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)));
        let n_train = nudged_ceil(ratio * rows.len() as f64).min(rows.len());
        for (i, &(t, _, d)) in rows.iter().enumerate() {
            let entry = Interaction {
                patient: p,
                disease: d,
                timestamp: t,
            };
            if i < n_train {
                train_entries.push(entry);
            } else {
                test_entries.push(entry);
            }
        }
    }

    let demo_lookup: HashMap<&str, &Demographics> = tables
        .demographics
        .iter()
        .map(|d| (d.patient_id.as_str(), d))
        .collect();
    let mut demographics = Vec::with_capacity(patient_ids.len());
    for id in &patient_ids {
        let demo = demo_lookup.get(id.as_str()).ok_or_else(|| {
            Error::Domain(format!("patient `{id}` has interactions but no demographics"))
        })?;
        demographics.push((*demo).clone());
    }
    let features = encode_features(&demographics)?;

    let p = patient_ids.len();
    let d = disease_codes.len();
    Ok(Dataset {
        patient_ids,
        disease_codes,
        train: InteractionMatrix::new(p, d, train_entries)?,
        test: InteractionMatrix::new(p, d, test_entries)?,
        features,
        demographics,
    })
}

/// Ingest, optionally filter to the most frequent diseases, and split.
pub fn load_dataset(
    interactions_path: &Path,
    demographics_path: &Path,
    max_diseases: Option<usize>,
    ratio: f64,
) -> Result<Dataset> {
    let mut tables = ingest(interactions_path, demographics_path)?;
    if let Some(d_max) = max_diseases {
        tables = filter_top_diseases(&tables, d_max)?;
    }
    temporal_split(&tables, ratio)
}

/// Write raw tables back to the interchange CSV formats.
pub fn write_raw_tables(
    tables: &RawTables,
    interactions_path: &Path,
    demographics_path: &Path,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(interactions_path)?;
    writer.write_record(INTERACTIONS_HEADER)?;
    for row in &tables.interactions {
        writer.write_record([
            row.patient_id.as_str(),
            row.disease_code.as_str(),
            &row.admit_time.to_string(),
        ])?;
    }
    writer.flush()?;

    let mut writer = csv::Writer::from_path(demographics_path)?;
    writer.write_record(DEMOGRAPHICS_HEADER)?;
    for demo in &tables.demographics {
        writer.write_record([
            demo.patient_id.as_str(),
            &demo.age.to_string(),
            match demo.gender {
                Gender::Male => "M",
                Gender::Female => "F",
            },
            &format!("race_{:02}", demo.race),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Render a float with 17 significant digits; parsing the result recovers
/// the original bits.
pub fn lossless_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_matrix_csv(path: &Path, ids: &[String], matrix: &Array2<f64>) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "id")?;
    for j in 0..matrix.ncols() {
        write!(out, ",dim_{j}")?;
    }
    writeln!(out)?;
    for (id, row) in ids.iter().zip(matrix.outer_iter()) {
        write!(out, "{id}")?;
        for v in row {
            write!(out, ",{}", lossless_f64(*v))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub patients: usize,
    pub diseases: usize,
    pub rank: usize,
    pub density: f64,
    pub seed: u64,
    /// Couple preferences to the age bucket so the frozen demographic
    /// features carry signal.
    pub confound: bool,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 || self.diseases == 0 {
            return Err(Error::Config("patients and diseases must be >= 1".into()));
        }
        if self.rank == 0 || self.rank > self.patients.min(self.diseases) {
            return Err(Error::Config(format!(
                "rank {} must lie in 1..=min(P, D)",
                self.rank
            )));
        }
        if !(self.density > 0.0 && self.density < 0.5) {
            return Err(Error::Config(format!(
                "density {} must lie in (0, 0.5)",
                self.density
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub tables: RawTables,
    /// Planted patient factors, P×r.
    pub truth_u: Array2<f64>,
    /// Planted disease factors, D×r.
    pub truth_v: Array2<f64>,
    /// Interactions per patient (⌈density·D⌉, at least 1).
    pub per_patient: usize,
}

fn gaussian_row(rng: &mut rand_chacha::ChaCha20Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generate planted-structure data in memory: latent factors from unit
/// Gaussians, each patient linked to the diseases with the top-⌈density·D⌉
/// preference values u_pᵀv_d, timestamps strictly increasing per patient.
pub fn synth_tables(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let (p_count, d_count, r) = (cfg.patients, cfg.diseases, cfg.rank);

    let mut truth_v = Array2::zeros((d_count, r));
    for (d, mut row) in truth_v.outer_iter_mut().enumerate() {
        let mut rng = seeded_rng(cfg.seed, TAG_SYNTH_V, d as u64);
        for (slot, v) in row.iter_mut().zip(gaussian_row(&mut rng, r)) {
            *slot = v;
        }
    }

    let mut demographics = Vec::with_capacity(p_count);
    for p in 0..p_count {
        let mut rng = seeded_rng(cfg.seed, TAG_SYNTH_DEMO, p as u64);
        let raw_age: u32 = rng.random_range(18..=90);
        let age = if raw_age > 89 { 91 } else { raw_age };
        let gender = if rng.random::<bool>() {
            Gender::Female
        } else {
            Gender::Male
        };
        let race = rng.random_range(0..NUM_RACES as u8);
        demographics.push(Demographics {
            patient_id: format!("p{p:05}"),
            age,
            gender,
            race,
        });
    }

    let mut bucket_offsets: Vec<Vec<f64>> = Vec::new();
    if cfg.confound {
        for b in 0..NUM_AGE_BUCKETS {
            let mut rng = seeded_rng(cfg.seed, TAG_SYNTH_CONFOUND, b as u64);
            bucket_offsets.push(gaussian_row(&mut rng, r));
        }
    }

    let mut truth_u = Array2::zeros((p_count, r));
    for (p, mut row) in truth_u.outer_iter_mut().enumerate() {
        let mut rng = seeded_rng(cfg.seed, TAG_SYNTH_U, p as u64);
        let mut vals = gaussian_row(&mut rng, r);
        if cfg.confound {
            let bucket = age_bucket(demographics[p].age)?;
            for (v, o) in vals.iter_mut().zip(&bucket_offsets[bucket]) {
                *v += o;
            }
        }
        for (slot, v) in row.iter_mut().zip(vals) {
            *slot = v;
        }
    }

    let per_patient = nudged_ceil(cfg.density * d_count as f64).min(d_count);
    let base_time: i64 = 1_577_836_800; // 2020-01-01T00:00:00Z
    let mut interactions = Vec::with_capacity(p_count * per_patient);
    for p in 0..p_count {
        let u = truth_u.row(p);
        let mut scored: Vec<(f64, usize)> = (0..d_count)
            .map(|d| (u.dot(&truth_v.row(d)), d))
            .collect();
        scored.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = scored[..per_patient].iter().map(|&(_, d)| d).collect();

        let mut rng = seeded_rng(cfg.seed, TAG_SYNTH_TIME, p as u64);
        use rand::seq::SliceRandom;
        chosen.shuffle(&mut rng);
        let mut t = base_time;
        for d in chosen {
            t += rng.random_range(3_600..=2_592_000);
            interactions.push(RawInteraction {
                patient_id: format!("p{p:05}"),
                disease_code: format!("d{d:05}"),
                admit_time: t,
            });
        }
    }

    Ok(SynthOutput {
        tables: RawTables {
            interactions,
            demographics,
        },
        truth_u,
        truth_v,
        per_patient,
    })
}

#[derive(Debug, Serialize)]
struct SynthManifest<'a> {
    patients: usize,
    diseases: usize,
    rank: usize,
    density: f64,
    seed: u64,
    confound: bool,
    interactions: usize,
    per_patient: usize,
    realized_sparsity: f64,
    files: Vec<&'a str>,
}

/// Generate and write a synthetic dataset: interactions, demographics, the
/// planted factor matrices, and a manifest echoing the configuration.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    let output = synth_tables(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    write_raw_tables(
        &output.tables,
        &out_dir.join("interactions.csv"),
        &out_dir.join("demographics.csv"),
    )?;
    let patient_ids: Vec<String> = (0..cfg.patients).map(|p| format!("p{p:05}")).collect();
    let disease_ids: Vec<String> = (0..cfg.diseases).map(|d| format!("d{d:05}")).collect();
    write_matrix_csv(&out_dir.join("truth_u.csv"), &patient_ids, &output.truth_u)?;
    write_matrix_csv(&out_dir.join("truth_v.csv"), &disease_ids, &output.truth_v)?;
    let manifest = SynthManifest {
        patients: cfg.patients,
        diseases: cfg.diseases,
        rank: cfg.rank,
        density: cfg.density,
        seed: cfg.seed,
        confound: cfg.confound,
        interactions: output.tables.interactions.len(),
        per_patient: output.per_patient,
        realized_sparsity: output.tables.interactions.len() as f64
            / (cfg.patients * cfg.diseases) as f64,
        files: vec![
            "interactions.csv",
            "demographics.csv",
            "truth_u.csv",
            "truth_v.csv",
        ],
    };
    let mut file = File::create(out_dir.join("manifest.json"))?;
    file.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use tempfile::tempdir;

    fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        fs::write(&path, content).unwrap();
        path
    }

    const DEMO_OK: &str = "patient_id,age,gender,race\n\
                           a,30,M,race_00\n\
                           b,45,F,race_12\n\
                           c,91,M,race_32\n";

    #[test]
    fn ingest_rejects_empty_interactions() {
        let dir = tempdir().unwrap();
        let ints = write_file(dir.path(), "i.csv", "patient_id,disease_code,admit_time\n");
        let demo = write_file(dir.path(), "d.csv", DEMO_OK);
        let err = ingest(&ints, &demo).unwrap_err();
        assert!(err.to_string().contains("no interactions"), "{err}");
    }

    #[test]
    fn ingest_dedups_keeping_earliest() {
        let dir = tempdir().unwrap();
        let ints = write_file(
            dir.path(),
            "i.csv",
            "patient_id,disease_code,admit_time\na,x,9\na,x,5\nb,y,7\n",
        );
        let demo = write_file(dir.path(), "d.csv", DEMO_OK);
        let tables = ingest(&ints, &demo).unwrap();
        assert_eq!(tables.interactions.len(), 2);
        assert_eq!(tables.interactions[0].admit_time, 5);
    }

    #[test]
    fn ingest_interns_in_first_seen_order() {
        let dir = tempdir().unwrap();
        let ints = write_file(
            dir.path(),
            "i.csv",
            "patient_id,disease_code,admit_time\nb,y,1\na,x,2\nc,y,2020-01-02T03:04:05Z\n",
        );
        let demo = write_file(dir.path(), "d.csv", DEMO_OK);
        let tables = ingest(&ints, &demo).unwrap();
        assert_eq!(tables.interactions.len(), 3);
        let ds = temporal_split(&tables, 0.8).unwrap();
        assert_eq!(ds.patient_ids, vec!["b", "a", "c"]);
        assert_eq!(ds.disease_codes, vec!["y", "x"]);
    }

    #[test]
    fn ingest_reports_line_numbers_and_tokens() {
        let dir = tempdir().unwrap();
        let ints = write_file(
            dir.path(),
            "i.csv",
            "patient_id,disease_code,admit_time\na,x,notatime\n",
        );
        let demo = write_file(dir.path(), "d.csv", DEMO_OK);
        let err = ingest(&ints, &demo).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let ints = write_file(
            dir.path(),
            "i2.csv",
            "patient_id,disease_code,admit_time\na,x,1\n",
        );
        let demo_bad = write_file(
            dir.path(),
            "d2.csv",
            "patient_id,age,gender,race\na,30,Q,race_00\n",
        );
        let err = ingest(&ints, &demo_bad).unwrap_err();
        assert!(err.to_string().contains("M, F"), "{err}");

        let demo_bad_race = write_file(
            dir.path(),
            "d3.csv",
            "patient_id,age,gender,race\na,30,M,race_99\n",
        );
        let err = ingest(&ints, &demo_bad_race).unwrap_err();
        assert!(err.to_string().contains("race_00"), "{err}");
    }

    fn tables_from(rows: &[(&str, &str, i64)]) -> RawTables {
        let interactions = rows
            .iter()
            .map(|&(p, d, t)| RawInteraction {
                patient_id: p.into(),
                disease_code: d.into(),
                admit_time: t,
            })
            .collect();
        let patients: HashSet<&str> = rows.iter().map(|&(p, _, _)| p).collect();
        let mut patients: Vec<&str> = patients.into_iter().collect();
        patients.sort_unstable();
        let demographics = patients
            .iter()
            .map(|&p| Demographics {
                patient_id: p.into(),
                age: 40,
                gender: Gender::Male,
                race: 0,
            })
            .collect();
        RawTables {
            interactions,
            demographics,
        }
    }

    #[test]
    fn filter_top_diseases_tie_break_and_identity() {
        let tables = tables_from(&[
            ("p1", "a", 1),
            ("p2", "a", 1),
            ("p3", "a", 1),
            ("p1", "b", 1),
            ("p2", "b", 1),
            ("p2", "c", 1),
            ("p3", "c", 1),
        ]);
        let kept = filter_top_diseases(&tables, 2).unwrap();
        let codes: HashSet<&str> = kept
            .interactions
            .iter()
            .map(|r| r.disease_code.as_str())
            .collect();
        assert_eq!(codes, HashSet::from(["a", "b"]));

        let all = filter_top_diseases(&tables, 10).unwrap();
        assert_eq!(all, tables);
    }

    #[test]
    fn filter_drops_emptied_patients() {
        let tables = tables_from(&[("p1", "a", 1), ("p2", "a", 1), ("p3", "rare", 1)]);
        let kept = filter_top_diseases(&tables, 1).unwrap();
        assert!(kept
            .interactions
            .iter()
            .all(|r| r.patient_id != "p3"));
        assert!(kept.demographics.iter().all(|d| d.patient_id != "p3"));
    }

    #[test]
    fn feature_encoding_follows_bucket_layout() {
        let demo = vec![
            Demographics {
                patient_id: "a".into(),
                age: 18,
                gender: Gender::Male,
                race: 0,
            },
            Demographics {
                patient_id: "b".into(),
                age: 91,
                gender: Gender::Female,
                race: 32,
            },
            Demographics {
                patient_id: "c".into(),
                age: 25,
                gender: Gender::Male,
                race: 5,
            },
            Demographics {
                patient_id: "d".into(),
                age: 30,
                gender: Gender::Male,
                race: 5,
            },
        ];
        let f = encode_features(&demo).unwrap();
        assert_eq!(f.ncols(), 43);
        assert_eq!(f[[0, 0]], 1.0);
        assert_eq!(f[[0, NUM_AGE_BUCKETS]], 0.0);
        assert_eq!(f[[0, NUM_AGE_BUCKETS + 1]], 1.0);
        assert_eq!(f[[1, 8]], 1.0);
        assert_eq!(f[[1, NUM_AGE_BUCKETS]], 1.0);
        assert_eq!(f[[1, NUM_AGE_BUCKETS + 1 + 32]], 1.0);
        // Ages 25 and 30 share the [21, 30] bucket.
        assert_eq!(f.row(2)[1], 1.0);
        assert_eq!(f.row(3)[1], 1.0);
        // Exactly one 1 per block.
        for row in f.outer_iter() {
            assert_eq!(row.slice(ndarray::s![..NUM_AGE_BUCKETS]).sum(), 1.0);
            assert_eq!(row.slice(ndarray::s![NUM_AGE_BUCKETS + 1..]).sum(), 1.0);
        }
    }

    #[test]
    fn age_bucket_rejects_gap_and_minors() {
        assert!(age_bucket(90).is_err());
        assert!(age_bucket(17).is_err());
        assert!(age_bucket(92).is_err());
    }

    #[test]
    fn split_counts_and_leak_freedom() {
        let tables = tables_from(&[
            ("p", "a", 10),
            ("p", "b", 20),
            ("p", "c", 30),
            ("p", "d", 40),
            ("p", "e", 50),
        ]);
        let ds = temporal_split(&tables, 0.8).unwrap();
        assert_eq!(ds.train.nnz(), 4);
        assert_eq!(ds.test.nnz(), 1);
        let max_train = ds.train.patient_row(0).iter().map(|e| e.timestamp).max().unwrap();
        for e in ds.test.patient_row(0) {
            assert!(e.timestamp >= max_train);
        }

        let single = tables_from(&[("q", "a", 1)]);
        let ds = temporal_split(&single, 0.8).unwrap();
        assert_eq!((ds.train.nnz(), ds.test.nnz()), (1, 0));
    }

    #[test]
    fn split_preserves_total_count() {
        let out = synth_tables(&SynthConfig {
            patients: 40,
            diseases: 30,
            rank: 4,
            density: 0.1,
            seed: 5,
            confound: false,
        })
        .unwrap();
        let ds = temporal_split(&out.tables, 0.8).unwrap();
        assert_eq!(ds.train.nnz() + ds.test.nnz(), out.tables.interactions.len());
    }

    #[test]
    fn synth_guarantees_one_interaction_per_patient() {
        let out = synth_tables(&SynthConfig {
            patients: 6,
            diseases: 10,
            rank: 2,
            density: 0.05, // density·D = 0.5 < 1
            seed: 3,
            confound: false,
        })
        .unwrap();
        assert_eq!(out.per_patient, 1);
        assert_eq!(out.tables.interactions.len(), 6);
    }

    #[test]
    fn synth_realized_sparsity_near_request() {
        let cfg = SynthConfig {
            patients: 50,
            diseases: 200,
            rank: 4,
            density: 0.05,
            seed: 11,
            confound: false,
        };
        let out = synth_tables(&cfg).unwrap();
        let realized =
            out.tables.interactions.len() as f64 / (cfg.patients * cfg.diseases) as f64;
        assert!(
            (realized - cfg.density).abs() / cfg.density <= 0.05,
            "realized {realized}"
        );
    }

    #[test]
    fn synth_files_are_reproducible() {
        let cfg = SynthConfig {
            patients: 8,
            diseases: 12,
            rank: 3,
            density: 0.2,
            seed: 21,
            confound: true,
        };
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        synth_generate(&cfg, dir_a.path()).unwrap();
        synth_generate(&cfg, dir_b.path()).unwrap();
        for name in ["interactions.csv", "demographics.csv", "truth_u.csv", "truth_v.csv", "manifest.json"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn roundtrip_write_then_ingest() {
        let cfg = SynthConfig {
            patients: 10,
            diseases: 15,
            rank: 3,
            density: 0.2,
            seed: 9,
            confound: false,
        };
        let out = synth_tables(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let ints = dir.path().join("interactions.csv");
        let demo = dir.path().join("demographics.csv");
        write_raw_tables(&out.tables, &ints, &demo).unwrap();
        let back = ingest(&ints, &demo).unwrap();
        assert_eq!(back, out.tables);
    }

    #[test]
    fn lossless_f64_roundtrips() {
        for &x in &[0.1, -3.25e-200, 1.0 / 3.0, 12345.678901234567] {
            let s = lossless_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }
}
